"""Dynamic weight accumulation for per-module loss weights.

Every ``update_period`` batches the window-mean loss of each module is pushed
into a two-slot history. Once both slots are filled the loss ratios
``R = L(t-1) / L(t-2)`` are z-scored across modules, exponentiated and
normalised to sum to N, then blended into the running weights with decay
``r``: ``W <- r * W + (1 - r) * alpha``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .pipeline import MODULE_IDS

RATIO_FLOOR = 1e-12


@dataclass
class RatioVector:
    R: np.ndarray
    mean: float
    std: float


@dataclass
class DwaaState:
    module_ids: tuple = MODULE_IDS
    W: np.ndarray = None
    history: list = field(default_factory=list)  # [L(t-1), L(t-2)], newest first
    r: float = 0.2
    update_period: int = 100
    sigma_floor: float = 1e-8
    z_clip: float = 10.0
    t: int = 0
    trajectory: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.module_ids)
        if self.W is None:
            self.W = np.ones(n)
        self.W = np.asarray(self.W, dtype=np.float64)
        if not 0.0 <= self.r < 1.0:
            raise ContractError("decay r must lie in [0, 1)")
        if self.update_period < 1:
            raise ContractError("update_period must be positive")
        if not self.trajectory:
            self.trajectory = [self.W.copy()]

    @property
    def n(self) -> int:
        return len(self.module_ids)

    def snapshot(self) -> dict:
        return {"module_ids": list(self.module_ids), "W": self.W.tolist(),
                "history": [h.tolist() for h in self.history], "r": self.r,
                "update_period": self.update_period, "sigma_floor": self.sigma_floor,
                "z_clip": self.z_clip, "t": self.t}

    @classmethod
    def from_snapshot(cls, snap: dict) -> "DwaaState":
        state = cls(tuple(snap["module_ids"]), np.array(snap["W"]),
                    [np.array(h) for h in snap["history"]], snap["r"], snap["update_period"],
                    snap["sigma_floor"], snap["z_clip"], snap["t"])
        return state


def record_window(state: DwaaState, window_means) -> DwaaState:
    """Shift the loss history and store the newest window mean."""
    values = np.asarray(window_means, dtype=np.float64)
    if values.shape != (state.n,):
        raise ContractError(f"expected {state.n} window means")
    if not np.all(np.isfinite(values)):
        raise NumericError("window mean loss is not finite")
    if np.any(values < 0):
        raise ContractError("losses must be non-negative")
    state.history = [values.copy()] + state.history[:1]
    return state


def compute_ratios(state: DwaaState) -> RatioVector | None:
    """Loss ratios over the two recorded windows, or None during warm-up."""
    if len(state.history) < 2:
        return None
    newest, older = state.history
    R = newest / np.maximum(older, RATIO_FLOOR)
    return RatioVector(R, float(R.mean()), float(R.std()))


def compute_alphas(ratios: RatioVector, n: int | None = None, sigma_floor: float = 1e-8,
                   z_clip: float = 10.0) -> np.ndarray:
    n = len(ratios.R) if n is None else n
    if ratios.std < sigma_floor:
        gamma = np.ones(len(ratios.R))
    else:
        gamma = np.exp(np.clip((ratios.R - ratios.mean) / ratios.std, -z_clip, z_clip))
    return n * gamma / gamma.sum()


def update_weights(state: DwaaState, alpha) -> DwaaState:
    state.W = state.r * state.W + (1.0 - state.r) * np.asarray(alpha, dtype=np.float64)
    state.t += 1
    state.trajectory.append(state.W.copy())
    return state


def current_weights(state: DwaaState) -> np.ndarray:
    return state.W.copy()


def step(state: DwaaState, window_means) -> DwaaState:
    """One window boundary: record, and update weights once two windows exist."""
    record_window(state, window_means)
    ratios = compute_ratios(state)
    if ratios is not None:
        update_weights(state, compute_alphas(ratios, state.n, state.sigma_floor, state.z_clip))
    return state


def write_trajectory_csv(path, state: DwaaState) -> None:
    """Columns: update_index, W_<module> for each module."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["update_index"] + [f"W_{m}" for m in state.module_ids])
        for i, w in enumerate(state.trajectory):
            writer.writerow([i] + [repr(float(x)) for x in w])
