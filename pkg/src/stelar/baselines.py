"""Forecast baselines and the RMSE/MAE evaluation harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numba
import numpy as np

from .engine import FittedStelar, Hyperparams, fit, predict_slabs
from .sir_fit import (
    ARMIJO_C,
    ARMIJO_SHRINK,
    ARMIJO_START,
    MAX_BACKTRACKS,
    SirParams,
    best_per_column,
    damped_newton_direction,
    extend_template,
    fit_sir_multistart,
    onset_starts,
)
from .tensor import as_tensor

log = logging.getLogger(__name__)

MEAN_WINDOW = 5


@dataclass(frozen=True)
class SplitSpec:
    train_len: int
    val_len: int
    test_len: int

    def __post_init__(self):
        if self.train_len < 1 or self.val_len < 0 or self.test_len < 1:
            raise ValueError("train_len and test_len must be positive, val_len nonnegative")

    @property
    def total(self) -> int:
        return self.train_len + self.val_len + self.test_len

    @property
    def history(self) -> int:
        """Slabs available to a method before the test window."""
        return self.train_len + self.val_len

    @classmethod
    def for_tensor(cls, L: int, test_len: int, val_len: int = 5) -> "SplitSpec":
        return cls(L - test_len - val_len, val_len, test_len)


def rmse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return math.sqrt(float(np.mean((pred - truth) ** 2)))


def mae(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("cannot score empty arrays")
    return pred, truth


def mean_baseline(X, split: SplitSpec) -> np.ndarray:
    """Repeat the average of the last five history slabs over the test window."""
    X = np.asarray(X, dtype=float)
    hist = split.history
    if hist < MEAN_WINDOW:
        raise ValueError(f"need at least {MEAN_WINDOW} history slabs, have {hist}")
    level = X[:, :, hist - MEAN_WINDOW:hist].mean(axis=2)
    return np.repeat(level[:, :, None], split.test_len, axis=2)


# --- per-series SIR / SEIR ------------------------------------------------


def fit_sir_series(series, steps: int = 1500) -> SirParams:
    """Fit one SIR new-infections curve to each column of ``series`` (L x n)."""
    return fit_sir_multistart(np.asarray(series, dtype=float), steps)


def fit_sir_baseline(series, horizon: int, steps: int = 1500) -> np.ndarray:
    """Forecast ``horizon`` steps of a single series by an SIR curve fit."""
    series = np.asarray(series, dtype=float).ravel()
    _check_series(series)
    if not series.any():
        return np.zeros(horizon)
    params = fit_sir_series(series[:, None], steps)
    return extend_template(params, series.size, horizon)[:, 0]


def _check_series(series):
    if series.size < MEAN_WINDOW:
        raise ValueError(f"series needs at least {MEAN_WINDOW} points")
    if np.any(series < 0) or not np.all(np.isfinite(series)):
        raise ValueError("series must be finite and nonnegative")


@numba.njit(cache=True)
def _seir_sensitivities(theta, L):
    """SEIR new infections and their parameter derivatives.

    ``theta`` rows: beta, gamma, sigma, s, e, i. Returns ``(Cn, J)`` with
    ``Cn`` of shape (L, K) and ``J`` of shape (6, L, K).
    """
    K = theta.shape[1]
    Cn = np.empty((L, K))
    J = np.zeros((6, L, K))
    for k in range(K):
        b, g, sg = theta[0, k], theta[1, k], theta[2, k]
        S, E, I = theta[3, k], theta[4, k], theta[5, k]
        dS = np.zeros(6)
        dE = np.zeros(6)
        dI = np.zeros(6)
        dS[3] = 1.0
        dE[4] = 1.0
        dI[5] = 1.0
        for t in range(L):
            new = b * S * I
            Cn[t, k] = new
            dnew = b * (dS * I + S * dI)
            dnew[0] += S * I
            for p in range(6):
                J[p, t, k] = dnew[p]
            donset = sg * dE
            donset[2] += E
            drec = g * dI
            drec[1] += I
            S, E, I = S - new, E + new - sg * E, I + sg * E - g * I
            dS = dS - dnew
            dE = dE + dnew - donset
            dI = dI + donset - drec
    return Cn, J


@numba.njit(cache=True)
def _seir_trial(theta, data):
    """Per-column misfit; +inf where a compartment turns negative or overflows."""
    L, K = data.shape
    out = np.empty(K)
    for k in range(K):
        b, g, sg = theta[0, k], theta[1, k], theta[2, k]
        S, E, I = theta[3, k], theta[4, k], theta[5, k]
        total = 0.0
        ok = True
        for t in range(L):
            new = b * S * I
            d = data[t, k] - new
            total += d * d
            S, E, I = S - new, E + new - sg * E, I + sg * E - g * I
            if not (S >= 0.0 and E >= 0.0 and I >= 0.0 and np.isfinite(S)):
                ok = False
                break
        out[k] = total if ok and np.isfinite(total) else np.inf
    return out


def fit_seir_series(series, steps: int = 1500) -> np.ndarray:
    """SEIR analogue of :func:`fit_sir_series`; returns a 6 x n parameter array.

    Same optimizer as the SIR fit (damped Gauss-Newton directions, box
    projection, Armijo backtracking) with ``sigma`` and an initial exposed
    pool added.
    """
    series = np.asarray(series, dtype=float)
    L, n = series.shape
    sir0, owner = onset_starts(series)
    # start with sigma = 0.5 and an exposed pool equal to the infected pool
    beta, gamma, s, i = sir0.as_tuple()
    theta = np.vstack([beta, gamma, np.full(beta.shape, 0.5), s, i, i])
    data = series[:, owner]
    pop = theta[3] + theta[4] + theta[5]
    pop = np.where(pop > 0, pop, 1.0)
    upper = np.maximum(
        np.vstack([1.0 / pop, np.ones_like(pop), np.ones_like(pop), 2 * pop, 2 * pop, 2 * pop]),
        theta,
    )
    f = _seir_trial(theta, data)
    active = np.ones(theta.shape[1], dtype=bool)
    for _ in range(steps):
        Cn, J = _seir_sensitivities(theta, L)
        resid = data - Cn
        grad = -2.0 * np.sum(resid * J, axis=1)
        direction = damped_newton_direction(J, grad)
        step = np.full(theta.shape[1], ARMIJO_START)
        pending = active & np.any(direction != 0, axis=0)
        if not pending.any():
            break
        new_theta = theta.copy()
        for _ in range(MAX_BACKTRACKS):
            if not pending.any():
                break
            trial = np.clip(theta - step * direction, 0.0, upper)
            f_trial = _seir_trial(trial, data)
            decrease = np.sum(grad * (theta - trial), axis=0)
            good = pending & (decrease > 0) & (f_trial <= f - ARMIJO_C * decrease)
            new_theta[:, good] = trial[:, good]
            f[good] = f_trial[good]
            pending &= ~good
            step = np.where(pending, step * ARMIJO_SHRINK, step)
        active &= ~pending
        theta = new_theta
    best = best_per_column(f, owner, n)
    return theta[:, best]


def seir_forecast(theta: np.ndarray, L: int, horizon: int) -> np.ndarray:
    Cn, _ = _seir_sensitivities(theta, L + horizon)
    return Cn[L:]


def fit_seir_baseline(series, horizon: int, steps: int = 1500) -> np.ndarray:
    series = np.asarray(series, dtype=float).ravel()
    _check_series(series)
    if not series.any():
        return np.zeros(horizon)
    theta = fit_seir_series(series[:, None], steps)
    return seir_forecast(theta, series.size, horizon)[:, 0]


def _per_series(X, split: SplitSpec, kind: str, steps: int) -> np.ndarray:
    """Fit every (location, signal) series of the history window at once."""
    X = np.asarray(X, dtype=float)
    M, N, _ = X.shape
    hist = X[:, :, : split.history].reshape(M * N, -1).T
    out = np.zeros((M * N, split.test_len))
    live = np.flatnonzero(hist.any(axis=0))
    if live.size:
        data = hist[:, live]
        if kind == "sir":
            params = fit_sir_series(data, steps)
            out[live] = extend_template(params, split.history, split.test_len).T
        else:
            theta = fit_seir_series(data, steps)
            out[live] = seir_forecast(theta, split.history, split.test_len).T
    return out.reshape(M, N, split.test_len)


def sir_baseline(X, split: SplitSpec, steps: int = 1500) -> np.ndarray:
    return _per_series(X, split, "sir", steps)


def seir_baseline(X, split: SplitSpec, steps: int = 1500) -> np.ndarray:
    return _per_series(X, split, "seir", steps)


# --- STELAR variants --------------------------------------------------------


def _history_hp(hp: Hyperparams, split: SplitSpec, **changes) -> Hyperparams:
    return replace(hp, L_o=split.test_len, val_window=split.val_len, **changes)


def stelar_forecast(X, split: SplitSpec, hp: Hyperparams) -> np.ndarray:
    """Joint fit on the history window, then forecast the test window."""
    fitted = fit(np.asarray(X)[:, :, : split.history], _history_hp(hp, split))
    return predict_slabs(fitted, split.test_len)


def two_step_fit(X, hp: Hyperparams, sir_steps: int | None = None) -> FittedStelar:
    """Plain nonnegative CPD (nu = 0), then SIR curves fitted to the frozen C.

    ``sir_steps`` defaults to the joint fit's total SIR budget,
    ``iters_grad * iters_outer``; 0 skips the curve fit and keeps the
    initial curves.
    """
    plain = fit(X, replace(hp, nu=0.0))
    C = plain.model.C
    steps = hp.iters_grad * hp.iters_outer if sir_steps is None else sir_steps
    sir = fit_sir_series(C, steps) if steps > 0 and C.any() else plain.sir
    return replace(plain, sir=sir, hp=hp)


def two_step_stelar(X, hp: Hyperparams, L_o: int | None = None,
                    sir_steps: int | None = None) -> np.ndarray:
    """Forecast of the two-step model (factorize first, fit SIR afterwards)."""
    return predict_slabs(two_step_fit(X, hp, sir_steps), L_o)


def two_step_forecast(X, split: SplitSpec, hp: Hyperparams) -> np.ndarray:
    hist = np.asarray(X)[:, :, : split.history]
    return two_step_stelar(hist, _history_hp(hp, split), split.test_len)


# --- evaluation -------------------------------------------------------------

Method = Callable[[np.ndarray, SplitSpec], np.ndarray]

# reserved for externally computed results merged into reports
EXTERNAL_METHODS = ("lstm", "lstm_feat", "stan")


@dataclass
class EvalRow:
    method: str
    signal: str
    horizon_days: int
    rmse: float
    mae: float
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def get(self, method: str, signal: str, horizon: int) -> EvalRow:
        for row in self.rows:
            if (row.method, row.signal, row.horizon_days) == (method, signal, horizon):
                return row
        raise KeyError((method, signal, horizon))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "signal", "horizon_days", "rmse", "mae"])
            for r in self.rows:
                w.writerow([r.method, r.signal, r.horizon_days, repr(r.rmse), repr(r.mae)])

    def table(self) -> str:
        lines = [f"{'method':<16}{'signal':<14}{'horizon':>8}{'RMSE':>12}{'MAE':>12}"]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.method:<16}{r.signal:<14}{r.horizon_days:>8}  failed: {r.error}")
            else:
                lines.append(
                    f"{r.method:<16}{r.signal:<14}{r.horizon_days:>8}{r.rmse:>12.4g}{r.mae:>12.4g}"
                )
        return "\n".join(lines)


def default_methods(hp: Hyperparams, curve_steps: int = 1500) -> dict[str, Method]:
    return {
        "mean": mean_baseline,
        "sir": lambda X, split: sir_baseline(X, split, curve_steps),
        "seir": lambda X, split: seir_baseline(X, split, curve_steps),
        "stelar_nu0": lambda X, split: two_step_forecast(X, split, hp),
        "stelar": lambda X, split: stelar_forecast(X, split, hp),
    }


def evaluate(methods: dict[str, Method], X, split: SplitSpec, signals=None,
             signal_labels=None) -> EvalReport:
    """Score each method's test-window forecast per signal.

    Errors are pooled over locations and horizon steps. A method that
    raises is recorded with NaN scores instead of aborting the run.
    """
    X = as_tensor(X)
    M, N, L = X.shape
    if split.total != L:
        raise ValueError(f"split covers {split.total} slabs but tensor has {L}")
    signals = range(N) if signals is None else signals
    labels = signal_labels or [str(n) for n in range(N)]
    truth = X[:, :, split.history:]
    report = EvalReport()
    for name, method in methods.items():
        try:
            pred = np.asarray(method(X[:, :, : split.history], split), dtype=float)
            if pred.shape != truth.shape:
                raise ValueError(f"forecast shape {pred.shape}, expected {truth.shape}")
            error = None
        except Exception as exc:  # recorded per cell, never fatal
            log.warning("method %s failed: %s", name, exc)
            pred, error = None, f"{type(exc).__name__}: {exc}"
        for n in signals:
            if pred is None:
                report.add(EvalRow(name, labels[n], split.test_len, math.nan, math.nan, error))
            else:
                report.add(EvalRow(name, labels[n], split.test_len,
                                   rmse(pred[:, n], truth[:, n]), mae(pred[:, n], truth[:, n])))
    return report
