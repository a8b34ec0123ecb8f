import numpy as np
import pytest

from sublim.checkpoint import Checkpoint, init_checkpoint, load, save
from sublim.errors import DataError, ShapeError
from sublim.nets import MLPModel
from sublim.qsim import QNNModel


@pytest.mark.parametrize("suffix", [".ckpt", ".json"])
def test_round_trip_is_exact(tmp_path, suffix):
    ck = init_checkpoint(QNNModel(depth=1, protocol="task"), seed=7)
    ck = Checkpoint(ck.params, ck.model_config, "teacher", 7, {"loss_history": [1.5, 0.25]})
    back = load(save(ck, tmp_path / f"c{suffix}"))
    np.testing.assert_array_equal(back.params, ck.params)
    assert back.header() == ck.header()


def test_init_is_seeded():
    m = MLPModel([784, 4, 20])
    np.testing.assert_array_equal(init_checkpoint(m, 1).params, init_checkpoint(m, 1).params)
    assert not np.array_equal(init_checkpoint(m, 1).params, init_checkpoint(m, 2).params)


def test_params_are_frozen():
    ck = init_checkpoint(MLPModel([784, 4, 20]), 0)
    with pytest.raises(ValueError):
        ck.params[0] = 1.0


def test_validation():
    cfg = MLPModel([784, 4, 20]).get_config()
    with pytest.raises(ShapeError):
        Checkpoint(np.zeros(3), cfg, "init", 0)
    with pytest.raises(ShapeError):
        Checkpoint(np.zeros(3240), cfg, "warmup", 0)


def test_corrupt_files(tmp_path):
    ck = init_checkpoint(MLPModel([784, 4, 20]), 0)
    path = save(ck, tmp_path / "c.ckpt")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        load(path)
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load(tmp_path / "x.ckpt")
    with pytest.raises(DataError):
        load(tmp_path / "missing.ckpt")


def test_save_leaves_no_temp_files(tmp_path):
    save(init_checkpoint(MLPModel([784, 4, 20]), 0), tmp_path / "sub" / "c.ckpt")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["c.ckpt"]
