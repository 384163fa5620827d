import pytest
import torch

from smsaf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from smsaf.neural import NetShape, init_params


SHAPE = NetShape(16, 10, 8, 257)


def test_round_trip_is_bit_exact(tmp_path):
    params = init_params(SHAPE, 4)
    params["up.bias"][3] = complex(-0.0, 1e-30)
    save_checkpoint(tmp_path / "m.smaf", params, SHAPE, {"task": "aec", "val_metric": 7.5})
    back, shape, meta = load_checkpoint(tmp_path / "m.smaf", expect=SHAPE)
    assert shape == SHAPE and meta == {"task": "aec", "val_metric": 7.5}
    for k, v in params.items():
        assert back[k].dtype == torch.complex64
        assert torch.equal(torch.view_as_real(back[k]), torch.view_as_real(v)), k
    assert torch.view_as_real(back["up.bias"])[3, 0].signbit()


def test_shape_mismatch_is_rejected(tmp_path):
    save_checkpoint(tmp_path / "m.smaf", init_params(SHAPE, 0), SHAPE)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.smaf", expect=NetShape(32, 10, 8, 257))
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.smaf", init_params(NetShape(8, 10, 8, 257), 0), SHAPE)


@pytest.mark.parametrize("damage", ["magic", "truncate", "version"])
def test_corrupt_files_raise_checkpoint_error(tmp_path, damage):
    path = tmp_path / "m.smaf"
    save_checkpoint(path, init_params(SHAPE, 0), SHAPE)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"NOPE"
    elif damage == "version":
        raw[4] = 9
    else:
        raw = raw[: len(raw) // 2]
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
