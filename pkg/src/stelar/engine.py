"""Joint nonnegative CP factorization with latent SIR regularization.

The outer loop alternates three ADMM factor updates (locations, signals,
time) with a few projected-gradient steps on the per-component SIR
parameters. The temporal update is pulled toward the current SIR template,
which is what lets the model continue each temporal column past the end of
the data and so forecast whole future slabs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .admm import AdmmState, FactorSubproblem, admm_factor_update, penalty_policy
from .sir_fit import (
    SirParams,
    build_template,
    extend_template,
    fit_sir_multistart,
    fit_sir_params,
)
from .sir_fit import _columnwise_objective
from .tensor import FactorModel, as_tensor, mttkrp, reconstruct

log = logging.getLogger(__name__)

# multistart curve fits to the temporal factor: steps per fit, and the
# iteration interval at which they are retried after the warm-up
RESEED_STEPS = 200
RESEED_EVERY = 20


@dataclass
class Hyperparams:
    """Settings for :func:`fit`.

    ``val_window`` trailing slabs of the input are held out to score
    forecasts for early stopping (0 disables it, as does ``nu == 0``).
    ``val_signal`` selects the signal scored on validation; ``None`` scores
    every signal. Training stops once the validation RMSE has failed to
    improve on its best value ``patience`` times in a row.

    The first ``warmup`` iterations ignore the SIR term. From then on, every
    ``RESEED_EVERY`` iterations, a multistart curve fit to the temporal
    factor replaces the SIR parameters of any column it fits better. With
    ``warmup == 0`` no reseeding happens and the curves start from jittered
    defaults. Scoring on the validation slabs begins after the warm-up. With ``refit``
    the held-out slabs are then folded back in: the model is refitted on the
    whole input for the best iteration count, so forecasts start from the
    last observed slab.
    """

    K: int = 5
    mu: float = 0.0
    nu: float = 1.0
    iters_outer: int = 200
    iters_inner: int = 10
    iters_grad: int = 50
    L_o: int = 10
    seed: int = 0
    val_window: int = 5
    val_signal: int | None = 0
    patience: int = 20
    warmup: int = 50
    refit: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be nonnegative")
        if self.iters_outer < 1 or self.iters_inner < 1:
            raise ValueError("iters_outer and iters_inner must be at least 1")
        if self.iters_grad < 0 or self.val_window < 0 or self.warmup < 0:
            raise ValueError("iters_grad, val_window and warmup must be nonnegative")
        if self.L_o < 1 or self.patience < 1:
            raise ValueError("L_o and patience must be at least 1")


def hyperparams_to_dict(hp: Hyperparams) -> dict:
    return asdict(hp)


def hyperparams_from_dict(d: dict) -> Hyperparams:
    """Build from a (possibly string-valued) mapping; unknown keys are rejected."""
    known = {f.name: f for f in fields(Hyperparams)}
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise ValueError(f"unknown hyperparameter {key!r}")
        if isinstance(value, str):
            text = value.strip()
            if key == "val_signal" and text.lower() in ("none", "all", ""):
                value = None
            elif key in ("mu", "nu"):
                value = float(text)
            elif key == "refit":
                if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"refit must be a boolean, got {text!r}")
                value = text.lower() in ("true", "1", "yes")
            else:
                value = int(text)
        kwargs[key] = value
    return Hyperparams(**kwargs)


def weight_reference(X: np.ndarray, K: int) -> float:
    """Typical diagonal of a factor Gram product for a balanced rank-K fit.

    With each component carrying norm ``||X|| / sqrt(K)`` split evenly over
    three unit columns, a Gram product of two factors has diagonal entries
    ``(||X|| / sqrt(K)) ** (4/3)``. Regularization weights are expressed as
    multiples of this so they mean the same thing at any data scale.
    """
    return (np.linalg.norm(X) / math.sqrt(K)) ** (4.0 / 3.0)


def suggest_weights(X: np.ndarray, K: int, nu_scale: float = 1.0, mu_scale: float = 0.0):
    """Default ``(mu, nu)`` for tensor ``X`` at rank ``K``."""
    ref = weight_reference(X, K)
    return mu_scale * ref, nu_scale * ref


@dataclass
class FittedStelar:
    model: FactorModel
    sir: SirParams
    hp: Hyperparams
    objective_trace: list[float] = field(default_factory=list)
    val_rmse_trace: list[float] = field(default_factory=list)
    best_iteration: int = 0
    stopped_reason: str = "max_iters"
    n_total: int | None = None

    def __post_init__(self):
        if self.n_total is None:
            self.n_total = self.n_fit

    @property
    def n_fit(self) -> int:
        """Number of slabs the factors were fitted on."""
        return self.model.C.shape[0]


@dataclass
class ComponentSummary:
    index: int
    weight: float
    temporal_profile: np.ndarray
    top_locations: list[tuple[int, float]]
    top_signals: list[tuple[int, float]]

    def to_dict(self, location_labels=None, signal_labels=None) -> dict:
        def ranked(pairs, labels):
            return [
                {"index": i, "label": labels[i] if labels else str(i), "loading": v}
                for i, v in pairs
            ]

        return {
            "component": self.index,
            "weight": self.weight,
            "temporal_profile": self.temporal_profile.tolist(),
            "top_locations": ranked(self.top_locations, location_labels),
            "top_signals": ranked(self.top_signals, signal_labels),
        }


def objective(X, model: FactorModel, sir: SirParams, hp: Hyperparams) -> float:
    """Data misfit + ridge on all factors + SIR misfit of the temporal factor."""
    X = np.asarray(X, dtype=float)
    resid = X - reconstruct(model)
    val = np.sum(resid * resid)
    val += hp.mu * sum(np.sum(F * F) for F in (model.A, model.B, model.C))
    if hp.nu > 0:
        diff = model.C - build_template(sir, model.C.shape[0])
        val += hp.nu * np.sum(diff * diff)
    return float(val)


def _slabs(A, B, Ct):
    return np.einsum("mk,nk,tk->mnt", A, B, Ct, optimize=True)


def predict_slabs(fitted: FittedStelar, L_o: int | None = None) -> np.ndarray:
    """Forecast the ``L_o`` slabs following the input tensor.

    Each SIR curve is continued from the end of the fitted window; slabs are
    ``A @ diag(c_hat(t)) @ B.T``. Held-out validation slabs lie between the
    fitted window and the forecast, so they are skipped.
    """
    L_o = fitted.hp.L_o if L_o is None else L_o
    if L_o < 1:
        raise ValueError("L_o must be at least 1")
    skip = fitted.n_total - fitted.n_fit
    C_future = extend_template(fitted.sir, fitted.n_fit, skip + L_o)[skip:]
    return _slabs(fitted.model.A, fitted.model.B, C_future)


def _initial_factors(X: np.ndarray, K: int, rng: np.random.Generator):
    M, N, L = X.shape
    A = rng.uniform(size=(M, K))
    B = rng.uniform(size=(N, K))
    C = rng.uniform(size=(L, K))
    approx = np.linalg.norm(_slabs(A, B, C))
    if approx > 0 and np.linalg.norm(X) > 0:
        scale = (np.linalg.norm(X) / approx) ** (1.0 / 3.0)
        A, B, C = A * scale, B * scale, C * scale
    return A, B, C


def _initial_sir(C: np.ndarray, rng: np.random.Generator) -> SirParams:
    """Jittered default curves, each rescaled to its column's amplitude."""
    sir = SirParams.default(C.shape[1], rng=rng)
    template = build_template(sir, C.shape[0])
    amp = np.sum(C * template, axis=0) / np.sum(template * template, axis=0)
    return sir.rescaled(np.where(amp > 0, amp, 1.0))


@dataclass
class _State:
    X: np.ndarray
    hp: Hyperparams
    A: AdmmState
    B: AdmmState
    C: AdmmState
    sir: SirParams

    @property
    def model(self) -> FactorModel:
        return FactorModel(self.A.primal.copy(), self.B.primal.copy(), self.C.primal.copy())


def _retuned(state: AdmmState, gram: np.ndarray) -> AdmmState:
    rho = penalty_policy(gram)
    # scaled dual is u = y / rho; keep y fixed when rho changes
    return AdmmState(state.primal, state.auxiliary, state.dual * (state.rho / rho), rho)


def _outer_iteration(st: _State) -> _State:
    """One sweep: A, B, C by ADMM, then SIR gradient steps."""
    hp, X = st.hp, st.X
    A, B, C = st.A.primal, st.B.primal, st.C.primal

    gram = (C.T @ C) * (B.T @ B)
    sub = FactorSubproblem(mttkrp(X, C, B, 1), gram, hp.mu)
    st.A = admm_factor_update(_retuned(st.A, gram), sub, hp.iters_inner)
    A = st.A.primal

    gram = (C.T @ C) * (A.T @ A)
    sub = FactorSubproblem(mttkrp(X, C, A, 2), gram, hp.mu)
    st.B = admm_factor_update(_retuned(st.B, gram), sub, hp.iters_inner)
    B = st.B.primal

    gram = (B.T @ B) * (A.T @ A)
    target = build_template(st.sir, X.shape[2]) if hp.nu > 0 else None
    sub = FactorSubproblem(mttkrp(X, B, A, 3), gram, hp.mu, hp.nu, target)
    st.C = admm_factor_update(_retuned(st.C, gram), sub, hp.iters_inner)

    if hp.nu > 0 and hp.iters_grad > 0:
        st.sir = fit_sir_params(st.sir, st.C.primal, hp.nu, hp.iters_grad)
    return st


def validation_rmse(model: FactorModel, sir: SirParams, heldout: np.ndarray,
                    signal: int | None) -> float:
    """RMSE of the SIR-continued forecast against the held-out slabs."""
    C_future = extend_template(sir, model.C.shape[0], heldout.shape[2])
    pred = _slabs(model.A, model.B, C_future)
    if signal is not None:
        pred, heldout = pred[:, signal], heldout[:, signal]
    return float(np.sqrt(np.mean((pred - heldout) ** 2)))


class EarlyStopping:
    """Tracks the best validation score and signals when to stop."""

    def __init__(self, patience: int = 1):
        self.patience = patience
        self.best = math.inf
        self.best_iteration = -1
        self.snapshot = None
        self.bad_rounds = 0

    def update(self, iteration: int, score: float, snapshot) -> bool:
        """Record ``score``; returns True when training should stop."""
        if score < self.best:
            self.best = score
            self.best_iteration = iteration
            self.snapshot = snapshot
            self.bad_rounds = 0
            return False
        self.bad_rounds += 1
        return self.bad_rounds >= self.patience


def _start(X: np.ndarray, hp: Hyperparams) -> _State:
    rng = np.random.default_rng(hp.seed)
    A, B, C = _initial_factors(X, hp.K, rng)
    sir = _initial_sir(C, rng)
    return _State(X, hp, AdmmState.start(A), AdmmState.start(B), AdmmState.start(C), sir)


def _reseeded(sir: SirParams, C: np.ndarray) -> SirParams:
    """Swap in multistart fits for the columns they describe better."""
    fresh = fit_sir_multistart(C, RESEED_STEPS)
    better = _columnwise_objective(fresh, C, 1.0) < _columnwise_objective(sir, C, 1.0)
    z = sir.to_array()
    z[:, better] = fresh.to_array()[:, better]
    return SirParams.from_array(z)


def _run(X, hp, iters, callback=None, heldout=None):
    """Outer iterations on ``X``; with ``heldout`` slabs, stop early on them."""
    st = _start(X, hp)
    joint = hp.nu > 0
    warmup = min(hp.warmup, iters) if joint else 0
    if warmup:
        st.hp = replace(hp, nu=0.0)
    trace = [objective(X, st.model, st.sir, hp)]
    val_trace = []
    stopper = EarlyStopping(hp.patience)
    reason = "max_iters"
    for it in range(1, iters + 1):
        st = _outer_iteration(st)
        if warmup and it >= warmup and (it - warmup) % RESEED_EVERY == 0:
            st.hp = hp
            st.sir = _reseeded(st.sir, st.C.primal)
        model = st.model
        if callback is not None:
            callback(it, model, st.sir)
        trace.append(objective(X, model, st.sir, hp))
        if not np.isfinite(trace[-1]):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        if heldout is not None and it > warmup:
            score = validation_rmse(model, st.sir, heldout, hp.val_signal)
            val_trace.append(score)
            if stopper.update(it, score, (model, st.sir.copy())):
                reason = "val_rmse_increase"
                break
    if heldout is not None and stopper.snapshot is not None:
        model, sir = stopper.snapshot
        best = stopper.best_iteration
    else:
        model, sir, best = st.model, st.sir.copy(), len(trace) - 1
    return model, sir, trace, val_trace, best, reason


def fit(X, hp: Hyperparams, callback=None) -> FittedStelar:
    """Fit factors and SIR parameters to the M x N x L tensor ``X``.

    ``callback(iteration, model, sir)`` is called after every outer
    iteration. Without validation the last iterate is returned. With it, the
    snapshot of lowest validation RMSE is returned, or, when ``hp.refit`` is
    set, a refit on all slabs run for that snapshot's iteration count.
    """
    X = as_tensor(X)
    M, N, L = X.shape
    if hp.K > min(M * N, N * L, M * L):
        raise ValueError(f"rank {hp.K} is too large for a {M}x{N}x{L} tensor")
    validate = hp.nu > 0 and hp.val_window > 0
    if validate and L - hp.val_window < 2:
        raise ValueError("too few slabs left for fitting after the validation window")
    if hp.val_signal is not None and not 0 <= hp.val_signal < N:
        raise ValueError(f"val_signal {hp.val_signal} out of range for {N} signals")
    if not validate:
        model, sir, trace, _, best, reason = _run(X, hp, hp.iters_outer, callback)
        return FittedStelar(model, sir, hp, trace, [], best, reason, n_total=L)

    n_fit = L - hp.val_window
    model, sir, trace, val_trace, best, reason = _run(
        X[:, :, :n_fit], hp, hp.iters_outer, callback, X[:, :, n_fit:]
    )
    log.debug("validation run stopped after %d iterations (%s), best %d",
              len(trace) - 1, reason, best)
    if hp.refit:
        model, sir, trace, _, _, _ = _run(X, hp, best)
    return FittedStelar(model, sir, hp, trace, val_trace, best, reason, n_total=L)


def extract_components(fitted: FittedStelar, top_k: int = 3, n_locations: int = 10,
                       n_signals: int = 5) -> list[ComponentSummary]:
    """The ``top_k`` heaviest rank-1 components after unit-normalizing columns."""
    norm = fitted.model.normalized()
    K = norm.rank
    if not 1 <= top_k <= K:
        raise ValueError(f"top_k must be in 1..{K}")
    # stable sort on -w keeps lower indices first among equal weights
    order = np.argsort(-norm.weights, kind="stable")[:top_k]

    def ranked(column, n):
        idx = np.argsort(-column, kind="stable")[:n]
        return [(int(i), float(column[i])) for i in idx]

    return [
        ComponentSummary(
            index=int(k),
            weight=float(norm.weights[k]),
            temporal_profile=norm.C[:, k].copy(),
            top_locations=ranked(norm.A[:, k], n_locations),
            top_signals=ranked(norm.B[:, k], n_signals),
        )
        for k in order
    ]
