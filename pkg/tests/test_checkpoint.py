import json

import numpy as np
import pytest

from unia import checkpoint
from unia.tensor import Tensor


def test_save_load_round_trip(tmp_path):
    params = {
        "a": Tensor(np.arange(6.0).reshape(2, 3)),
        "b.weight": Tensor(np.array(-1.5)),
    }
    wpath, mpath = str(tmp_path / "w.bin"), str(tmp_path / "m.json")
    checkpoint.save_blob(params, wpath, mpath)
    loaded = checkpoint.load_blob(wpath, mpath)
    assert set(loaded) == {"a", "b.weight"}
    np.testing.assert_array_equal(loaded["a"], params["a"].data)
    assert loaded["a"].dtype == np.float64
    assert loaded["b.weight"].shape == ()


def test_offsets_are_byte_positions(tmp_path):
    params = {"x": Tensor(np.zeros((2, 2))), "y": Tensor(np.ones(3))}
    checkpoint.save_blob(params, str(tmp_path / "w.bin"), str(tmp_path / "m.json"))
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["x"]["offset"] == 0
    assert manifest["y"]["offset"] == 16  # four float32 values

    blob = (tmp_path / "w.bin").read_bytes()
    assert len(blob) == 16 + 12


def test_float32_quantization_on_disk(tmp_path):
    val = np.array([1.0 + 1e-12])  # not representable in float32
    checkpoint.save_blob({"v": Tensor(val)}, str(tmp_path / "w"), str(tmp_path / "m"))
    loaded = checkpoint.load_blob(str(tmp_path / "w"), str(tmp_path / "m"))
    assert loaded["v"][0] == np.float64(np.float32(val[0]))


def test_load_into_checks_shapes(tmp_path):
    checkpoint.save_blob({"p": Tensor(np.zeros((2, 2)))}, str(tmp_path / "w"), str(tmp_path / "m"))
    target = {"p": Tensor(np.zeros((3, 3)), requires_grad=True)}
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(target, str(tmp_path / "w"), str(tmp_path / "m"))


def test_corrupt_manifest_rejected(tmp_path):
    (tmp_path / "w").write_bytes(bytes(8))
    (tmp_path / "m").write_text("{not json")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_blob(str(tmp_path / "w"), str(tmp_path / "m"))


def test_out_of_range_entry_rejected(tmp_path):
    (tmp_path / "w").write_bytes(bytes(8))
    (tmp_path / "m").write_text(json.dumps({"p": {"offset": 0, "shape": [100]}}))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_blob(str(tmp_path / "w"), str(tmp_path / "m"))
