"""Solver checkpoints as numpy ``.npz`` archives.

Layout (all keys required):

``version``        int, currently 1
``problem_hash``   str, sha256 of the rendered scenario
``sweep``          int, sweeps completed when written
``log``            bool, whether ``u``/``U`` hold logarithms
``u``              float64 ``(T + 1, N)``
``U``              float64 ``(T + 1, L, N)``
``history``        float64 ``(k, 3)`` rows of (sweep, residual, log-change)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .propagation import ScalingState
from .solver import SweepRecord

VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    problem_hash: str
    sweep: int
    state: ScalingState
    history: list


def save_checkpoint(path, problem_hash: str, sweep: int, state: ScalingState, history) -> None:
    path = Path(path)
    hist = np.array([(r.sweep, r.residual, r.log_change) for r in history], dtype=float).reshape(-1, 3)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            version=np.int64(VERSION),
            problem_hash=np.array(problem_hash),
            sweep=np.int64(sweep),
            log=np.bool_(state.log),
            u=state.u,
            U=state.U,
            history=hist,
        )
    os.replace(tmp, path)


def load_checkpoint(path, problem_hash: str | None = None) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            stored_hash = str(data["problem_hash"])
            state = ScalingState(data["u"].copy(), data["U"].copy(), bool(data["log"]))
            history = [SweepRecord(int(s), float(r), float(c)) for s, r, c in data["history"]]
            sweep = int(data["sweep"])
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if problem_hash is not None and stored_hash != problem_hash:
        raise CheckpointError("checkpoint was written for a different scenario")
    return Checkpoint(stored_hash, sweep, state, history)
