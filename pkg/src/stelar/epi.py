"""Discrete-time SIR and SEIR simulators in population-normalized form.

The total population is absorbed into ``beta``, so one step of SIR reads::

    C(t) = beta * S(t-1) * I(t-1)
    S(t) = S(t-1) - C(t)
    I(t) = I(t-1) + C(t) - gamma * I(t-1)
    R(t) = R(t-1) + gamma * I(t-1)

No clamping is applied; parameters that drive compartments negative are the
caller's responsibility.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_nonneg(**values):
    for name, v in values.items():
        if not np.isfinite(v) or v < 0:
            raise ValueError(f"{name} must be a finite nonnegative number, got {v!r}")


@dataclass(frozen=True)
class SirConfig:
    s0: float
    i0: float
    beta: float
    gamma: float
    horizon: int

    def __post_init__(self):
        _check_nonneg(s0=self.s0, i0=self.i0, beta=self.beta, gamma=self.gamma)
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")


@dataclass(frozen=True)
class SeirConfig(SirConfig):
    e0: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        _check_nonneg(e0=self.e0, sigma=self.sigma)


@dataclass
class EpiTrajectory:
    """Compartments at t = 0..L (length L+1) and new infections at t = 1..L.

    ``E`` is ``None`` for SIR runs. ``new_infections[j]`` is C(j+1).
    """

    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    new_infections: np.ndarray
    E: np.ndarray | None = None

    @property
    def total(self) -> np.ndarray:
        tot = self.S + self.I + self.R
        return tot if self.E is None else tot + self.E


def sir_simulate(cfg: SirConfig) -> EpiTrajectory:
    L = int(cfg.horizon)
    S = np.empty(L + 1)
    I = np.empty(L + 1)
    R = np.empty(L + 1)
    C = np.empty(L)
    S[0], I[0], R[0] = cfg.s0, cfg.i0, 0.0
    for t in range(1, L + 1):
        new = cfg.beta * S[t - 1] * I[t - 1]
        rec = cfg.gamma * I[t - 1]
        C[t - 1] = new
        S[t] = S[t - 1] - new
        I[t] = I[t - 1] + new - rec
        R[t] = R[t - 1] + rec
    return EpiTrajectory(S, I, R, C)


def seir_simulate(cfg: SeirConfig) -> EpiTrajectory:
    """SEIR recursion; ``new_infections`` counts S -> E transitions."""
    L = int(cfg.horizon)
    S = np.empty(L + 1)
    E = np.empty(L + 1)
    I = np.empty(L + 1)
    R = np.empty(L + 1)
    C = np.empty(L)
    S[0], E[0], I[0], R[0] = cfg.s0, cfg.e0, cfg.i0, 0.0
    for t in range(1, L + 1):
        new = cfg.beta * S[t - 1] * I[t - 1]
        onset = cfg.sigma * E[t - 1]
        rec = cfg.gamma * I[t - 1]
        C[t - 1] = new
        S[t] = S[t - 1] - new
        E[t] = E[t - 1] + new - onset
        I[t] = I[t - 1] + onset - rec
        R[t] = R[t - 1] + rec
    return EpiTrajectory(S, I, R, C, E=E)


def new_infections_curve(cfg: SirConfig) -> np.ndarray:
    """C(1..L) of the SIR run described by ``cfg``."""
    return sir_simulate(cfg).new_infections
