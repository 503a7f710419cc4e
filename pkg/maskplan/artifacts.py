"""Atomic writers for the JSON / JSONL / CSV experiment trail."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence

from . import __version__

logger = logging.getLogger(__name__)

META_KEY = "_meta"


def artifact_meta(config_hash: Optional[str] = None) -> Dict[str, Any]:
    return {"tool": "maskplan", "version": __version__, "config_hash": config_hash}


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json_artifact(path: Path, payload: Mapping[str, Any], config_hash: Optional[str] = None) -> None:
    document = {META_KEY: artifact_meta(config_hash), **payload}
    atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text("utf-8"))


def write_jsonl(path: Path, records: Iterable[Mapping[str, Any]], config_hash: Optional[str] = None) -> int:
    lines = [json.dumps({META_KEY: artifact_meta(config_hash)}, sort_keys=True)]
    lines.extend(json.dumps(record, sort_keys=True) for record in records)
    atomic_write_text(path, "\n".join(lines) + "\n")
    return len(lines) - 1


def read_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{number}: invalid JSON ({exc})") from exc
            if META_KEY in record:
                continue
            yield record


def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence[Any]],
    config_hash: Optional[str] = None,
) -> None:
    buffer = io.StringIO()
    buffer.write(f"# maskplan {__version__} config={config_hash or 'none'}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(cell) for cell in row])
    atomic_write_text(path, buffer.getvalue())


def read_csv(path: Path) -> List[Dict[str, str]]:
    lines = [line for line in Path(path).read_text("utf-8").splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return value
