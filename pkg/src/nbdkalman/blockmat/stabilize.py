"""Stabilizing transformations and the implicit ``L D^-1 L^T`` factorization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

from . import counts
from .eigen import assemble_spectral, perturb_eigen
from .structure import (
    BlockStructure,
    NbdError,
    NbdMatrix,
    NotPositiveDefiniteError,
    check_symmetric,
    lower_block_part,
)

PIVOT_RTOL = 1e-12


def cholesky_blocks(blocks: Sequence[np.ndarray], step: int | None = None) -> tuple[np.ndarray, ...]:
    """Per-block Cholesky factors; any pivot below ``1e-12 * ||block||`` fails."""
    out = []
    for k, b in enumerate(blocks):
        scale = np.linalg.norm(b, 2)
        try:
            c = np.linalg.cholesky(b)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(k, step) from None
        pivots = np.diag(c) ** 2
        if scale == 0 or pivots.min() <= PIVOT_RTOL * scale:
            raise NotPositiveDefiniteError(k, step, f"smallest pivot {pivots.min():.3g}")
        out.append(c)
    return tuple(out)


def inverse_blocks(blocks: Sequence[np.ndarray], step: int | None = None,
                   chol: Sequence[np.ndarray] | None = None) -> tuple[np.ndarray, ...]:
    chol = cholesky_blocks(blocks, step) if chol is None else chol
    out = []
    for c in chol:
        inv = cho_solve((c, True), np.eye(c.shape[0]))
        out.append(0.5 * (inv + inv.T))
    return tuple(out)


def _solve_blocks(structure: BlockStructure, chol, x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x, dtype=float)
    for s, c in zip(structure.slices, chol):
        y[s] = cho_solve((c, True), x[s])
    return y


def _times_blocks(structure: BlockStructure, blocks, x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x, dtype=float)
    for s, b in zip(structure.slices, blocks):
        y[s] = b @ x[s]
    return y


@dataclass(frozen=True, eq=False)
class StabilizedFactor:
    """``L D^-1 L^T`` with ``D = P0`` and ``L = D + eps*l1 [+ eps**2*l2]``.

    ``l1`` and ``l2`` are block-lower-triangular (half block diagonal).
    """

    structure: BlockStructure
    eps: float
    d: tuple[np.ndarray, ...]
    d_inv: tuple[np.ndarray, ...]
    chol: tuple[np.ndarray, ...]
    l1: np.ndarray
    l2: np.ndarray | None = None
    mults: float = 0

    @property
    def order(self) -> int:
        return 1 if self.l2 is None else 2

    @property
    def l(self) -> np.ndarray:
        out = self.structure.block_diag(self.d) + self.eps * self.l1
        if self.l2 is not None:
            out = out + self.eps**2 * self.l2
        return out

    def d_inv_dense(self) -> np.ndarray:
        return self.structure.block_diag(self.d_inv)

    def value(self) -> np.ndarray:
        L = self.l
        out = L @ self.d_inv_dense() @ L.T
        return 0.5 * (out + out.T)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``L D^-1 L^T x`` via block solves with ``D``."""
        L = self.l
        return L @ _solve_blocks(self.structure, self.chol, L.T @ x)


@dataclass(frozen=True, eq=False)
class InverseFactor:
    """``D^-1 L' D^-1 L'^T D^-1`` with ``L' = D - eps*l1``."""

    structure: BlockStructure
    eps: float
    d: tuple[np.ndarray, ...]
    d_inv: tuple[np.ndarray, ...]
    chol: tuple[np.ndarray, ...]
    l1: np.ndarray
    mults: float = 0

    @property
    def order(self) -> int:
        return 1

    @property
    def l(self) -> np.ndarray:
        return self.structure.block_diag(self.d) - self.eps * self.l1

    def value(self) -> np.ndarray:
        Di = self.structure.block_diag(self.d_inv)
        M = Di @ self.l
        out = M @ Di @ M.T
        return 0.5 * (out + out.T)

    def apply(self, x: np.ndarray) -> np.ndarray:
        s = self.structure
        Lp = self.l
        y = _solve_blocks(s, self.chol, x)
        y = _solve_blocks(s, self.chol, Lp.T @ y)
        return _solve_blocks(s, self.chol, Lp @ y)


class DenseCovariance:
    """A stabilized covariance held as an explicit dense matrix."""

    def __init__(self, value: np.ndarray, mults: float = 0):
        self._value = np.asarray(value, dtype=float)
        self.mults = mults

    def value(self) -> np.ndarray:
        return self._value

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._value @ x


def _factor_parts(P: NbdMatrix, step: int | None):
    chol = cholesky_blocks(P.p0, step)
    d_inv = inverse_blocks(P.p0, step, chol)
    return chol, d_inv


def t1_stabilize(P: NbdMatrix, step: int | None = None) -> StabilizedFactor:
    """``[P0 + eps P1_L] P0^-1 [P0 + eps P1_L]^T``."""
    check_symmetric(P)
    chol, d_inv = _factor_parts(P, step)
    l1 = lower_block_part(P.p1, P.structure)
    return StabilizedFactor(P.structure, P.eps, P.p0, d_inv, chol, l1, None,
                            counts.ldl_count(P.structure))


def _require_p2(P: NbdMatrix) -> np.ndarray:
    if P.p2 is None:
        raise NbdError("second-order stabilization needs p2 (pass zeros explicitly if intended)")
    return P.p2


def cross_term(P: NbdMatrix, d_inv: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """``G2 = P1_L P0^-1 P1_L^T``."""
    s = P.structure
    d_inv = inverse_blocks(P.p0) if d_inv is None else d_inv
    A = lower_block_part(P.p1, s)
    return A @ s.block_diag(d_inv) @ A.T


def t2_stabilize(P: NbdMatrix, step: int | None = None) -> StabilizedFactor:
    """Second-order transformation; ``L = P0 + eps P1_L + eps^2 (P2_L - G2_L)``."""
    check_symmetric(P)
    p2 = _require_p2(P)
    chol, d_inv = _factor_parts(P, step)
    s = P.structure
    l1 = lower_block_part(P.p1, s)
    g2 = l1 @ s.block_diag(d_inv) @ l1.T
    l2 = lower_block_part(p2, s) - lower_block_part(0.5 * (g2 + g2.T), s)
    return StabilizedFactor(s, P.eps, P.p0, d_inv, chol, l1, l2, counts.ldl_count(s))


def tb_stabilize(P: NbdMatrix, step: int | None = None) -> StabilizedFactor:
    """Second-order upper bound; ``L = P0 + eps P1_L + eps^2 P2_L``."""
    check_symmetric(P)
    p2 = _require_p2(P)
    chol, d_inv = _factor_parts(P, step)
    s = P.structure
    return StabilizedFactor(s, P.eps, P.p0, d_inv, chol, lower_block_part(P.p1, s),
                            lower_block_part(p2, s), counts.ldl_count(s))


def screening_threshold(P: NbdMatrix) -> float:
    return 4.0 * P.eps * np.linalg.norm(P.p1, 2)


def spectral_stabilize(P: NbdMatrix, mode: str = "exact") -> np.ndarray:
    """Clip negative eigenvalues of the truncation to zero.

    ``mode="exact"`` uses a dense eigensolver (nearest PSD matrix in the
    Frobenius norm).  ``mode="first-order"`` uses the perturbative spectrum
    of ``P0 + eps*P1`` and only clips eigenpairs with small ``lambda0``.
    """
    check_symmetric(P)
    if mode == "exact":
        w, v = np.linalg.eigh(P.dense())
        out = (v * np.clip(w, 0.0, None)) @ v.T
        return 0.5 * (out + out.T)
    if mode == "first-order":
        ep = perturb_eigen(P.p0_dense(), P.p1, P.eps, P.structure)
        lam = ep.eigenvalues()
        screened = ep.lambda0 <= screening_threshold(P)
        lam = np.where(screened, np.clip(lam, 0.0, None), lam)
        return assemble_spectral(ep, lam)
    raise ValueError(f"unknown spectral mode {mode!r}")


def redecompose(f: StabilizedFactor) -> NbdMatrix:
    """Re-expand ``L D^-1 L^T`` order by order around the same ``P0``.

    The first-order part is ``l1 + l1^T``, the second-order part is the exact
    ``eps^2`` coefficient, and everything of higher order goes into ``tail``.
    """
    s = f.structure
    Di = f.d_inv_dense()
    p1 = f.l1 + f.l1.T
    p2 = f.l1 @ Di @ f.l1.T
    if f.l2 is not None:
        p2 = p2 + f.l2 + f.l2.T
    p2 = 0.5 * (p2 + p2.T)
    value = f.value()
    partial = s.block_diag(f.d) + f.eps * p1 + f.eps**2 * p2
    return NbdMatrix(s, f.eps, f.d, p1, p2, True, tail=value - partial)


def first_order_inverse(P: NbdMatrix, step: int | None = None) -> NbdMatrix:
    """``P0^-1 - eps P0^-1 P1 P0^-1`` as an N.B.D. matrix."""
    s = P.structure
    d_inv = inverse_blocks(P.p0, step)
    Di = s.block_diag(d_inv)
    pattern = s.nonzero_blocks(P.p1)
    mults = (counts.block_inverse_count(s) + counts.left_diag_cost(s, pattern)
             + (counts.symmetric_right_diag_cost(s, pattern) if P.symmetric
                else counts.right_diag_cost(s, pattern)))
    return NbdMatrix(s, P.eps, d_inv, -(Di @ P.p1 @ Di), None, P.symmetric, mults=mults)


def inv_first_order(P: NbdMatrix, step: int | None = None) -> InverseFactor:
    """Stabilized factored approximate inverse ``D^-1 L' D^-1 L'^T D^-1``."""
    check_symmetric(P)
    chol, d_inv = _factor_parts(P, step)
    return InverseFactor(P.structure, P.eps, P.p0, d_inv, chol,
                         lower_block_part(P.p1, P.structure), counts.ldl_count(P.structure))


def invert_factor(f: StabilizedFactor | InverseFactor):
    """Switch between ``T[P]`` and ``Inv[T[P]]``; no multiplications needed."""
    if isinstance(f, InverseFactor):
        return StabilizedFactor(f.structure, f.eps, f.d, f.d_inv, f.chol, f.l1, None, 0)
    if f.order != 1:
        raise NbdError("the factored inverse is only defined for first-order factors")
    return InverseFactor(f.structure, f.eps, f.d, f.d_inv, f.chol, f.l1, 0)


STABILIZERS = ("t1", "t2", "tb", "spectral", "spectral-first-order", "none")


def stabilize(P: NbdMatrix, method: str = "t1", step: int | None = None):
    """Dispatch to a stabilizer; returns an object with ``value()`` and ``apply()``.

    ``t2``/``tb`` on a first-order matrix use ``P2 = 0``.
    """
    if method == "t1":
        return t1_stabilize(P, step)
    if method in ("t2", "tb"):
        if P.p2 is None:
            P = P.with_p2(np.zeros((P.N, P.N)))
        return t2_stabilize(P, step) if method == "t2" else tb_stabilize(P, step)
    if method == "spectral":
        return DenseCovariance(spectral_stabilize(P, "exact"))
    if method == "spectral-first-order":
        return DenseCovariance(spectral_stabilize(P, "first-order"))
    if method == "none":
        return DenseCovariance(P.dense())
    raise ValueError(f"unknown stabilizer {method!r}; choose from {STABILIZERS}")
