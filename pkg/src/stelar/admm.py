"""ADMM for the nonnegative, ridge-regularized factor subproblems.

Each factor update solves::

    min_{F >= 0}  ||X_(i) - Phi F^T||_F^2 + mu ||F||_F^2 + nu ||F - Cbar||_F^2

by splitting ``F`` into a nonnegative primal copy and an unconstrained
auxiliary copy. Only ``rhs = X_(i)^T Phi`` and ``gram = Phi^T Phi`` are
needed, so the data tensor never enters the inner loop.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

RHO_FLOOR = 1e-12


@dataclass
class AdmmState:
    """Primal factor, auxiliary (split) copy and scaled dual, all rows x K.

    The auxiliary copy is stored in the primal's orientation, i.e. it holds
    the transpose of the ``K x rows`` least-squares variable.
    """

    primal: np.ndarray
    auxiliary: np.ndarray
    dual: np.ndarray
    rho: float

    def __post_init__(self):
        if not (self.primal.shape == self.auxiliary.shape == self.dual.shape):
            raise ValueError("primal, auxiliary and dual must share a shape")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @classmethod
    def start(cls, primal: np.ndarray, rho: float = 1.0) -> "AdmmState":
        """Cold state: auxiliary equal to primal, zero dual."""
        primal = np.maximum(np.asarray(primal, dtype=float), 0.0)
        return cls(primal, primal.copy(), np.zeros_like(primal), rho)


@dataclass
class FactorSubproblem:
    rhs: np.ndarray
    gram: np.ndarray
    mu: float = 0.0
    nu: float = 0.0
    target: np.ndarray | None = None

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be nonnegative")
        if self.nu > 0 and self.target is None:
            raise ValueError("nu > 0 requires a target matrix")
        if self.target is not None and self.target.shape != self.rhs.shape:
            raise ValueError("target must have the same shape as rhs")
        K = self.rhs.shape[1]
        if self.gram.shape != (K, K):
            raise ValueError(f"gram must be {K}x{K}, got {self.gram.shape}")

    def objective(self, F: np.ndarray, data_norm_sq: float = 0.0) -> float:
        """Subproblem cost at ``F``; ``data_norm_sq`` is ``||X_(i)||_F^2``."""
        val = data_norm_sq - 2.0 * np.sum(F * self.rhs) + np.sum((F @ self.gram) * F)
        val += self.mu * np.sum(F * F)
        if self.nu > 0:
            val += self.nu * np.sum((F - self.target) ** 2)
        return float(val)


def penalty_policy(gram: np.ndarray) -> float:
    """ADMM penalty ``trace(gram) / K``, floored at 1e-12."""
    gram = np.asarray(gram, dtype=float)
    return max(float(np.trace(gram)) / gram.shape[0], RHO_FLOOR)


def admm_factor_update(
    state: AdmmState, sub: FactorSubproblem, inner_iters: int = 10
) -> AdmmState:
    """Run ``inner_iters`` ADMM rounds on one factor subproblem.

    The ``K x K`` normal matrix is Cholesky-factored once and reused for every
    round. Returns a new state; the input is not modified.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be at least 1")
    if state.primal.shape != sub.rhs.shape:
        raise ValueError(
            f"state shape {state.primal.shape} does not match rhs {sub.rhs.shape}"
        )
    K = sub.gram.shape[0]
    rho = state.rho
    shift = sub.mu + sub.nu + rho
    assert shift > 0, "normal matrix is singular without mu + nu + rho > 0"
    normal = sub.gram + shift * np.eye(K)
    factor = scipy.linalg.cho_factor(normal)

    fixed = sub.rhs if sub.nu == 0 else sub.rhs + sub.nu * sub.target
    primal, dual = state.primal.copy(), state.dual.copy()
    aux = state.auxiliary
    for _ in range(inner_iters):
        # normal is symmetric, so solving on the transposed system gives rows directly
        aux = scipy.linalg.cho_solve(factor, (fixed + rho * (primal + dual)).T).T
        primal = np.maximum(0.0, aux - dual)
        dual += primal - aux
    return replace(state, primal=primal, auxiliary=aux, dual=dual)
