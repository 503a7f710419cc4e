from pathlib import Path

import numpy as np
import pytest

from maskplan.checkpoint import (
    CLASSIFIER_MAGIC,
    UNET_MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)

PARAMS = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5, -1.25])}


def test_checkpoint_layout_and_reload(tmp_path: Path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, UNET_MAGIC, PARAMS, {"input_dim": 3}, extra={"step": 4}, config_hash="abc")

    payload = path.read_bytes()
    checkpoint = load_checkpoint(path, UNET_MAGIC)

    assert payload[:8] == b"MPUNET01"
    assert payload.endswith(np.array([0.5, -1.25], dtype="<f8").tobytes())
    assert list(checkpoint.params) == ["w", "b"]
    np.testing.assert_array_equal(checkpoint.params["w"], PARAMS["w"])
    assert checkpoint.config == {"input_dim": 3}
    assert checkpoint.extra == {"step": 4}
    assert checkpoint.header["config_hash"] == "abc"


def test_wrong_magic_rejected() -> None:
    payload = encode_checkpoint(CLASSIFIER_MAGIC, PARAMS, {})

    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(payload, UNET_MAGIC)
    with pytest.raises(CheckpointError, match="unknown"):
        decode_checkpoint(b"NOTMAGIC" + payload[8:])


def test_truncated_and_padded_payloads_rejected() -> None:
    payload = encode_checkpoint(UNET_MAGIC, PARAMS, {})

    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(payload[:-4])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(payload + b"\x00")
    with pytest.raises(CheckpointError):
        decode_checkpoint(payload[:10])


def test_unreadable_and_unwritable_paths(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "missing.ckpt")

    blocker = tmp_path / "blocker"
    blocker.write_text("file, not a directory")
    with pytest.raises(CheckpointError, match="failed to write"):
        save_checkpoint(blocker / "model.ckpt", UNET_MAGIC, PARAMS, {})
