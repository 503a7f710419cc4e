from pathlib import Path

import numpy as np
import pytest

from maskplan.artifacts import read_csv, read_json, read_jsonl, write_csv, write_json_artifact, write_jsonl
from maskplan.streams import rng_stream


def test_json_artifact_carries_meta(tmp_path: Path) -> None:
    path = tmp_path / "nested" / "r.json"
    write_json_artifact(path, {"metrics": {"SR": 0.5}}, config_hash="abc")

    payload = read_json(path)

    assert payload["_meta"] == {"tool": "maskplan", "version": "0.1.0", "config_hash": "abc"}
    assert payload["metrics"] == {"SR": 0.5}
    assert [p.name for p in path.parent.iterdir()] == ["r.json"]


def test_jsonl_header_is_skipped_on_read(tmp_path: Path) -> None:
    path = tmp_path / "d.jsonl"
    count = write_jsonl(path, [{"a": 1}, {"a": 2}])

    assert count == 2
    assert list(read_jsonl(path)) == [{"a": 1}, {"a": 2}]
    assert len(path.read_text().splitlines()) == 3


def test_bad_jsonl_line_names_location(tmp_path: Path) -> None:
    path = tmp_path / "d.jsonl"
    path.write_text('{"a": 1}\n{broken\n')

    with pytest.raises(ValueError, match="d.jsonl:2"):
        list(read_jsonl(path))


def test_csv_comment_line_and_float_format(tmp_path: Path) -> None:
    path = tmp_path / "t.csv"
    write_csv(path, ("name", "value", "missing"), [["x", 1 / 3, None]], config_hash="h")

    lines = path.read_text().splitlines()

    assert lines[0] == "# maskplan 0.1.0 config=h"
    assert lines[2] == "x,0.3333333333,"
    assert read_csv(path) == [{"name": "x", "value": "0.3333333333", "missing": ""}]


def test_streams_are_keyed() -> None:
    first = rng_stream(3, "plan", 7, 0).standard_normal(4)

    np.testing.assert_array_equal(first, rng_stream(3, "plan", 7, 0).standard_normal(4))
    assert not np.allclose(first, rng_stream(3, "plan", 7, 1).standard_normal(4))
    assert not np.allclose(first, rng_stream(4, "plan", 7, 0).standard_normal(4))
