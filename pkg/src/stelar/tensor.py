"""Dense 3-way tensors, unfoldings and CP products.

Tensors are plain ``numpy`` arrays of shape ``(M, N, L)`` indexed
``X[m, n, t]`` (location, signal, time). Factor matrices are arrays of shape
``(dim, K)``.

Unfolding conventions, with ``khatri_rao(P, Q)[i + j*I, k] = P[j, k] * Q[i, k]``::

    unfold(X, 1) == khatri_rao(C, B) @ A.T     # (N*L) x M
    unfold(X, 2) == khatri_rao(C, A) @ B.T     # (M*L) x N
    unfold(X, 3) == khatri_rao(B, A) @ C.T     # (M*N) x L
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# axis permutation applied before reshaping, per mode
_UNFOLD_AXES = {1: (2, 1, 0), 2: (2, 0, 1), 3: (1, 0, 2)}


def as_tensor(X, nonnegative: bool = True) -> np.ndarray:
    """Validate and return ``X`` as a float64 array of shape (M, N, L)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or min(X.shape) < 1:
        raise ValueError(f"expected a non-empty 3-way tensor, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("tensor contains non-finite values")
    if nonnegative and np.any(X < 0):
        raise ValueError("tensor contains negative values")
    return X


def _check_mode(mode: int) -> None:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")


def unfold(X: np.ndarray, mode: int) -> np.ndarray:
    """Matricize ``X`` along ``mode``; columns are indexed by that mode."""
    _check_mode(mode)
    X = np.asarray(X)
    perm = _UNFOLD_AXES[mode]
    rows = X.shape[perm[0]] * X.shape[perm[1]]
    return X.transpose(perm).reshape(rows, X.shape[perm[2]])


def refold(Xm: np.ndarray, mode: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    _check_mode(mode)
    perm = _UNFOLD_AXES[mode]
    permuted = tuple(shape[p] for p in perm)
    return np.asarray(Xm).reshape(permuted).transpose(np.argsort(perm))


def khatri_rao(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column k is ``kron(P[:, k], Q[:, k])``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if P.shape[1] != Q.shape[1]:
        raise ValueError(
            f"column counts differ: {P.shape[1]} vs {Q.shape[1]}"
        )
    K = P.shape[1]
    return (P[:, None, :] * Q[None, :, :]).reshape(-1, K)


# mttkrp(X, f1, f2, mode) contracts X with f1 and f2 over the two remaining modes
_MTTKRP_SUBSCRIPTS = {
    1: "mnt,tk,nk->mk",  # f1 = C, f2 = B
    2: "mnt,tk,mk->nk",  # f1 = C, f2 = A
    3: "mnt,nk,mk->tk",  # f1 = B, f2 = A
}


def mttkrp(X: np.ndarray, f1: np.ndarray, f2: np.ndarray, mode: int) -> np.ndarray:
    """Compute ``unfold(X, mode).T @ khatri_rao(f1, f2)`` without forming either.

    The factor order follows the unfolding identities: ``(C, B)`` for mode 1,
    ``(C, A)`` for mode 2 and ``(B, A)`` for mode 3.
    """
    _check_mode(mode)
    X = np.asarray(X, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    perm = _UNFOLD_AXES[mode]
    if f1.ndim != 2 or f2.ndim != 2 or f1.shape[1] != f2.shape[1]:
        raise ValueError("factors must be 2-D with a shared column count")
    if f1.shape[0] != X.shape[perm[0]] or f2.shape[0] != X.shape[perm[1]]:
        raise ValueError(
            f"factor rows {f1.shape[0]}, {f2.shape[0]} do not match tensor "
            f"dims {X.shape[perm[0]]}, {X.shape[perm[1]]} for mode {mode}"
        )
    return np.einsum(_MTTKRP_SUBSCRIPTS[mode], X, f1, f2, optimize=True)


@dataclass
class FactorModel:
    """CP factors ``A`` (M x K), ``B`` (N x K), ``C`` (L x K).

    ``weights`` is ``None`` for a raw model; after :meth:`normalized` it holds
    the per-component scale absorbed from unit-norm columns.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        K = self.A.shape[1] if self.A.ndim == 2 else -1
        if any(F.ndim != 2 or F.shape[1] != K for F in (self.B, self.C)) or K < 1:
            raise ValueError(
                "factor matrices must be 2-D with equal column counts, got "
                f"{self.A.shape}, {self.B.shape}, {self.C.shape}"
            )
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (K,):
                raise ValueError("weights must have one entry per component")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.A.shape[0], self.B.shape[0], self.C.shape[0]

    def normalized(self) -> "FactorModel":
        """Unit-norm columns with the scale moved into ``weights``.

        Zero columns are left at zero with weight 0.
        """
        w = np.ones(self.rank) if self.weights is None else self.weights.copy()
        factors = []
        for F in (self.A, self.B, self.C):
            norms = np.linalg.norm(F, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            factors.append(F / safe)
            w = w * norms
        return FactorModel(*factors, weights=w)

    def absorbed(self) -> "FactorModel":
        """Fold ``weights`` back into ``A``."""
        if self.weights is None:
            return FactorModel(self.A.copy(), self.B.copy(), self.C.copy())
        return FactorModel(self.A * self.weights, self.B.copy(), self.C.copy())


def reconstruct(model: FactorModel) -> np.ndarray:
    """Full tensor ``sum_k w_k a_k o b_k o c_k``."""
    A = model.A if model.weights is None else model.A * model.weights
    return np.einsum("mk,nk,tk->mnt", A, model.B, model.C, optimize=True)
