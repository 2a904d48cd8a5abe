"""Latent SIR curves for the columns of the temporal factor.

Column ``k`` of the temporal factor is matched to the new-infections curve
``beta_k * S_k(t-1) * I_k(t-1)`` of its own SIR model. Everything here is
vectorized over components: a batch of K curves is simulated, differentiated
and fitted at once, and no component ever reads another one's data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

# upper bounds in population-normalized coordinates (see fit_sir_params)
BETA_MAX = 1.0
GAMMA_MAX = 1.0
POP_MAX = 2.0

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_START = 1.0
MAX_BACKTRACKS = 50
# Levenberg-Marquardt damping relative to the unit-diagonal Gauss-Newton matrix
LM_DAMPING = 1e-4

PARAM_NAMES = ("beta", "gamma", "s", "i")
# initial infected fractions tried by multistart fits; small values give late peaks
ONSET_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


@dataclass
class SirParams:
    """Per-component SIR parameters, each a length-K vector."""

    beta: np.ndarray
    gamma: np.ndarray
    s: np.ndarray
    i: np.ndarray

    def __post_init__(self):
        vals = [np.atleast_1d(np.asarray(v, dtype=float)).copy() for v in self.as_tuple()]
        if len({v.shape for v in vals}) != 1 or vals[0].ndim != 1:
            raise ValueError("beta, gamma, s and i must be vectors of equal length")
        self.beta, self.gamma, self.s, self.i = vals

    def as_tuple(self):
        return self.beta, self.gamma, self.s, self.i

    @property
    def rank(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> "SirParams":
        return SirParams(*self.as_tuple())

    def to_array(self) -> np.ndarray:
        """4 x K array with rows beta, gamma, s, i."""
        return np.vstack(self.as_tuple())

    @classmethod
    def from_array(cls, arr) -> "SirParams":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0], arr[1], arr[2], arr[3])

    @classmethod
    def default(cls, K: int, rng: np.random.Generator | None = None, jitter: float = 0.1):
        """beta=0.4, gamma=0.1, s=0.95, i=0.05 with optional uniform +-jitter."""
        base = np.array([0.4, 0.1, 0.95, 0.05])[:, None] * np.ones((1, K))
        if rng is not None and jitter > 0:
            base = base * rng.uniform(1 - jitter, 1 + jitter, size=base.shape)
        return cls.from_array(base)

    def rescaled(self, scale) -> "SirParams":
        """Same curve shapes with amplitude multiplied by ``scale``.

        Uses the exact symmetry beta -> beta/scale, S -> scale*S, I -> scale*I.
        """
        scale = np.broadcast_to(np.asarray(scale, dtype=float), self.beta.shape)
        return SirParams(self.beta / scale, self.gamma.copy(), self.s * scale, self.i * scale)


@numba.njit(cache=True)
def _simulate(beta, gamma, s, i, L):
    K = beta.shape[0]
    S = np.empty((L + 1, K))
    I = np.empty((L + 1, K))
    for k in range(K):
        Sk, Ik = s[k], i[k]
        S[0, k], I[0, k] = Sk, Ik
        for t in range(1, L + 1):
            new = beta[k] * Sk * Ik
            Sk, Ik = Sk - new, Ik + new - gamma[k] * Ik
            S[t, k], I[t, k] = Sk, Ik
    return S, I


def simulate_latent(params: SirParams, L: int):
    """S_k(t) and I_k(t) for t = 0..L, each of shape (L+1, K)."""
    return _simulate(*params.as_tuple(), int(L))


def latent_trajectories(params: SirParams, L: int):
    """``P(t, k) = S_k(t-1)`` and ``Q(t, k) = I_k(t-1)`` for t = 1..L."""
    S, I = simulate_latent(params, L)
    return S[:L], I[:L]


def build_template(params: SirParams, L: int) -> np.ndarray:
    """L x K matrix of new-infection curves, ``(P * Q) @ diag(beta)``."""
    P, Q = latent_trajectories(params, L)
    return P * Q * params.beta


def extend_template(params: SirParams, L: int, steps: int) -> np.ndarray:
    """Rows L+1..L+steps of the template, i.e. the curves continued past L."""
    return build_template(params, L + steps)[L:]


def _columnwise_objective(params: SirParams, C: np.ndarray, nu: float) -> np.ndarray:
    resid = C - build_template(params, C.shape[0])
    return nu * np.sum(resid * resid, axis=0)


def sir_objective(params: SirParams, C: np.ndarray, nu: float) -> float:
    """``nu * sum_{t,k} (C[t,k] - beta_k S_k(t-1) I_k(t-1))^2``."""
    C = np.asarray(C, dtype=float)
    _check_shapes(params, C)
    return float(np.sum(_columnwise_objective(params, C, nu)))


def _check_shapes(params: SirParams, C: np.ndarray) -> None:
    if C.ndim != 2 or C.shape[1] != params.rank:
        raise ValueError(
            f"C must be L x {params.rank}, got shape {C.shape}"
        )


@numba.njit(cache=True)
def _sensitivities(beta, gamma, s, i, L):
    K = beta.shape[0]
    S = np.empty((L, K))
    I = np.empty((L, K))
    dS = np.zeros((4, L, K))
    dI = np.zeros((4, L, K))
    for k in range(K):
        b, g = beta[k], gamma[k]
        S[0, k], I[0, k] = s[k], i[k]
        dS[2, 0, k] = 1.0
        dI[3, 0, k] = 1.0
        for t in range(1, L):
            Sp, Ip = S[t - 1, k], I[t - 1, k]
            SI = Sp * Ip
            S[t, k] = Sp - b * SI
            I[t, k] = Ip + b * SI - g * Ip
            for p in range(4):
                # d(beta * S * I) through the state
                through = b * (dS[p, t - 1, k] * Ip + Sp * dI[p, t - 1, k])
                dS[p, t, k] = dS[p, t - 1, k] - through
                dI[p, t, k] = dI[p, t - 1, k] + through - g * dI[p, t - 1, k]
            # explicit dependence on beta and gamma
            dS[0, t, k] -= SI
            dI[0, t, k] += SI
            dI[1, t, k] -= Ip
    return S, I, dS, dI


def sensitivities(params: SirParams, L: int):
    """Forward sensitivities of S and I for t = 0..L-1.

    Returns ``(S, I, dS, dI)`` where ``S, I`` have shape (L, K) and
    ``dS[p], dI[p]`` (shape (4, L, K)) are the derivatives with respect to
    parameter ``p`` in the order beta, gamma, s, i.
    """
    return _sensitivities(*params.as_tuple(), int(L))


def _columnwise_gradients(params: SirParams, C: np.ndarray, nu: float):
    L = C.shape[0]
    S, I, dS, dI = sensitivities(params, L)
    beta = params.beta
    SI = S * I
    resid = C - beta * SI
    dtemplate = beta * (dS * I + S * dI)
    dtemplate[0] += SI
    grads = -2.0 * nu * np.sum(resid * dtemplate, axis=1)
    obj = nu * np.sum(resid * resid, axis=0)
    return obj, grads


def sir_gradients(params: SirParams, C: np.ndarray, nu: float) -> dict[str, np.ndarray]:
    """Partials of :func:`sir_objective` with respect to beta, gamma, s and i.

    Returns a dict of length-K vectors keyed by parameter name.
    """
    C = np.asarray(C, dtype=float)
    _check_shapes(params, C)
    _, grads = _columnwise_gradients(params, C, nu)
    return dict(zip(PARAM_NAMES, grads))


@numba.njit(cache=True)
def _trial_kernel(z, C, nu):
    """Per-column objective, +inf once S or I turns negative or non-finite."""
    L, K = C.shape
    out = np.empty(K)
    for k in range(K):
        beta, gamma, Sk, Ik = z[0, k], z[1, k], z[2, k], z[3, k]
        total = 0.0
        ok = Sk >= 0.0 and Ik >= 0.0
        for t in range(L):
            if not ok:
                break
            new = beta * Sk * Ik
            d = C[t, k] - new
            total += d * d
            Sk, Ik = Sk - new, Ik + new - gamma * Ik
            ok = Sk >= 0.0 and Ik >= 0.0 and np.isfinite(Sk) and np.isfinite(Ik)
        out[k] = nu * total if ok and np.isfinite(total) else np.inf
    return out


def _trial_objective(z: np.ndarray, C: np.ndarray, nu: float):
    """Objective per column, +inf where the trajectory leaves the nonnegative orthant."""
    return _trial_kernel(np.ascontiguousarray(z, dtype=float), np.ascontiguousarray(C), float(nu))


def damped_newton_direction(jac: np.ndarray, grad: np.ndarray, nu: float = 1.0) -> np.ndarray:
    """Solve the damped Gauss-Newton system for every column.

    ``jac`` is (P, L, K) and ``grad`` is (P, K); returns a (P, K) direction.
    """
    H = 2.0 * nu * np.einsum("plk,qlk->kpq", jac, jac)
    diag = np.einsum("kpp->kp", H)
    scale = np.sqrt(np.where(diag > 0, diag, 1.0))
    Hn = H / scale[:, :, None] / scale[:, None, :] + LM_DAMPING * np.eye(jac.shape[0])
    # a parameter with a zero diagonal has a zero gradient; damping keeps Hn regular
    d = np.linalg.solve(Hn, (grad.T / scale)[:, :, None])[:, :, 0] / scale
    return d.T


DIRECTIONS = ("gauss_newton", "gradient")


def fit_sir_params(
    params: SirParams, C: np.ndarray, nu: float = 1.0, steps: int = 50,
    direction: str = "gauss_newton",
) -> SirParams:
    """Projected descent with Armijo backtracking, one column at a time.

    With ``direction="gradient"`` the search runs along the plain negative
    gradient. The default solves the damped Gauss-Newton system
    ``(H + LM_DAMPING * diag(H)) d = g`` per column, with ``g`` the exact
    gradient and ``H`` the 4 x 4 Gauss-Newton matrix. The damping keeps the
    system solvable along the beta/population scaling direction, where the
    curve does not change. Steps are projected onto the box
    ``beta <= 1/n``, ``gamma <= 1``, ``s, i <= 2n`` where ``n = s + i`` at
    entry; bounds are widened where the entry point already exceeds them.
    Candidates whose S or I trajectories turn negative are rejected by the
    line search. A component whose line search fails keeps its parameters
    and is dropped from later steps, since an unchanged point would fail
    the same way again.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    C = np.asarray(C, dtype=float)
    _check_shapes(params, C)
    if nu == 0:
        return params.copy()
    L, K = C.shape

    z = params.to_array()
    pop = z[2] + z[3]
    pop = np.where(pop > 0, pop, 1.0)
    upper = np.maximum(
        np.vstack([BETA_MAX / pop, np.full(K, GAMMA_MAX), POP_MAX * pop, POP_MAX * pop]), z
    )
    f = _trial_objective(z, C, nu)
    active = np.arange(K)
    for _ in range(steps):
        if active.size == 0:
            break
        za, Ca = z[:, active], C[:, active]
        S, I, dS, dI = sensitivities(SirParams.from_array(za), L)
        SI = S * I
        resid = Ca - za[0] * SI
        jac = za[0] * (dS * I + S * dI)
        jac[0] += SI
        grad = -2.0 * nu * np.sum(resid * jac, axis=1)
        if direction == "gradient":
            d = grad
        else:
            d = damped_newton_direction(jac, grad, nu)
        pending = np.flatnonzero(np.any(d != 0, axis=0))
        step = ARMIJO_START
        failed = np.ones(active.size, dtype=bool)
        for _ in range(MAX_BACKTRACKS):
            if pending.size == 0:
                break
            zp = za[:, pending]
            trial = np.clip(zp - step * d[:, pending], 0.0, upper[:, active[pending]])
            f_trial = _trial_objective(trial, Ca[:, pending], nu)
            decrease = np.sum(grad[:, pending] * (zp - trial), axis=0)
            good = (decrease > 0) & (f_trial <= f[active[pending]] - ARMIJO_C * decrease)
            cols = active[pending[good]]
            z[:, cols] = trial[:, good]
            f[cols] = f_trial[good]
            failed[pending[good]] = False
            pending = pending[~good]
            step *= ARMIJO_SHRINK
        active = active[~failed]
    return SirParams.from_array(z)


def onset_starts(C: np.ndarray, onsets=ONSET_GRID) -> tuple[SirParams, np.ndarray]:
    """One starting curve per (onset, column), scaled to the column's amplitude.

    Returns params for ``len(onsets) * K`` columns and, for each, the index
    of the column of ``C`` it belongs to.
    """
    C = np.asarray(C, dtype=float)
    L, K = C.shape
    starts = []
    for i0 in onsets:
        p = SirParams(np.full(K, 0.4), np.full(K, 0.1), np.full(K, 1.0 - i0), np.full(K, i0))
        tmpl = build_template(p, L)
        amp = np.sum(C * tmpl, axis=0) / np.sum(tmpl * tmpl, axis=0)
        starts.append(p.rescaled(np.where(amp > 0, amp, 1.0)).to_array())
    owner = np.tile(np.arange(K), len(onsets))
    return SirParams.from_array(np.hstack(starts)), owner


def best_per_column(objs: np.ndarray, owner: np.ndarray, K: int) -> np.ndarray:
    """Index of the lowest objective among the candidates of each column."""
    best = np.empty(K, dtype=int)
    for k in range(K):
        cand = np.flatnonzero(owner == k)
        best[k] = cand[np.argmin(objs[cand])]
    return best


def fit_sir_multistart(C: np.ndarray, steps: int = 1500, onsets=ONSET_GRID) -> SirParams:
    """Fit every column of ``C`` from each onset in ``onsets``; keep the best fit."""
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("C must be an L x K matrix")
    starts, owner = onset_starts(C, onsets)
    data = C[:, owner]
    fitted = fit_sir_params(starts, data, 1.0, steps)
    objs = _columnwise_objective(fitted, data, 1.0)
    best = best_per_column(objs, owner, C.shape[1])
    return SirParams.from_array(fitted.to_array()[:, best])
