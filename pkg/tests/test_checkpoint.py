import numpy as np
import pytest

from instances import random_state
from multispecies_mfc.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from multispecies_mfc.solver import SweepRecord


def test_round_trip(tmp_path):
    state = random_state(np.random.default_rng(0), 2, 3, 2)
    hist = [SweepRecord(1, 0.5, np.inf), SweepRecord(2, 0.1, 0.2)]
    save_checkpoint(tmp_path / "c.npz", "abc", 2, state, hist)
    ck = load_checkpoint(tmp_path / "c.npz", "abc")
    assert ck.sweep == 2 and ck.problem_hash == "abc" and ck.history == hist
    assert np.array_equal(ck.state.U, state.U) and np.array_equal(ck.state.u, state.u) and not ck.state.log
    assert not (tmp_path / "c.npz.tmp").exists()


def test_log_state_and_empty_history(tmp_path):
    state = random_state(np.random.default_rng(1), 1, 2, 1).logarithmic()
    save_checkpoint(tmp_path / "c.npz", "h", 0, state, [])
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.state.log and ck.history == []


def test_errors(tmp_path):
    state = random_state(np.random.default_rng(2), 1, 2, 1)
    save_checkpoint(tmp_path / "c.npz", "abc", 1, state, [])
    with pytest.raises(CheckpointError, match="different scenario"):
        load_checkpoint(tmp_path / "c.npz", "xyz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "bad.npz").write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.npz")
    np.savez(tmp_path / "old.npz", version=np.int64(0))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "old.npz")
