"""First-order N.B.D. products and inverse updates with multiplication counts."""
from __future__ import annotations

import numpy as np

from . import counts
from .stabilize import inverse_blocks
from .structure import AsymmetricError, NbdMatrix

A2_RATIO = 0.1


def mul_first_order(P: NbdMatrix, Q: NbdMatrix) -> NbdMatrix:
    """``R = P Q`` to first order: ``R0 = P0 Q0``, ``R1 = P0 Q1 + P1 Q0``."""
    P.check_compatible(Q)
    s = P.structure
    r0 = tuple(a @ b for a, b in zip(P.p0, Q.p0))
    r1 = s.block_diag(P.p0) @ Q.p1 + P.p1 @ s.block_diag(Q.p0)
    mults = (counts.diag_cube_cost(s)
             + counts.left_diag_cost(s, s.nonzero_blocks(Q.p1))
             + counts.right_diag_cost(s, s.nonzero_blocks(P.p1)))
    return NbdMatrix(s, P.eps, r0, r1, None, False, mults=mults)


def sym_product_first_order(R: NbdMatrix, Q: NbdMatrix) -> NbdMatrix:
    """``S = R Q R^T`` to first order for symmetric ``Q``.

    ``S0 = R0 Q0 R0^T`` and ``S1 = R0 Q1 R0^T + R1 Q0 R0^T + R0 Q0 R1^T``.
    """
    R.check_compatible(Q)
    if not Q.symmetric:
        raise AsymmetricError("the middle factor of a symmetric product must be symmetric")
    s = R.structure
    w = tuple(a @ b for a, b in zip(R.p0, Q.p0))
    s0 = tuple(wk @ rk.T for wk, rk in zip(w, R.p0))
    R0 = s.block_diag(R.p0)
    X = s.block_diag(w) @ R.p1.T
    Z = R0 @ Q.p1 @ R0.T
    s1 = Z + X + X.T
    q1_pattern = s.nonzero_blocks(Q.p1)
    mults = (counts.diag_cube_cost(s) + counts.diag_sym_cost(s)
             + counts.left_diag_cost(s, s.nonzero_blocks(R.p1.T))
             + counts.left_diag_cost(s, q1_pattern)
             + counts.symmetric_right_diag_cost(s, q1_pattern))
    return NbdMatrix(s, R.eps, s0, s1, None, True, mults=mults)


def _blockdiag_norm(blocks) -> float:
    return max(np.linalg.norm(b, 2) for b in blocks)


def select_update_form(M: NbdMatrix, J: NbdMatrix, m0_inv=None) -> str:
    """``"A2"`` when the information is small next to ``M0^-1``, else ``"A1"``."""
    m0_inv = inverse_blocks(M.p0) if m0_inv is None else m0_inv
    return "A2" if _blockdiag_norm(J.p0) < A2_RATIO * _blockdiag_norm(m0_inv) else "A1"


def inverse_update(M: NbdMatrix, J: NbdMatrix, form: str = "auto",
                   step: int | None = None) -> NbdMatrix:
    """First-order ``P`` with ``P^-1 = M^-1 + J``.

    ``P0 = (M0^-1 + J0)^-1`` blockwise.  The first-order part is
    ``A M1 A^T - P0 J1 P0`` where ``A = P0 M0^-1`` (form ``"A1"``) or the
    equal ``A = I - P0 J0`` (form ``"A2"``, preferred for small ``J0``).
    ``mults`` counts the first-order part only; ``P0`` costs
    :func:`counts.zeroth_inverse_update_count` on top.
    """
    M.check_compatible(J)
    if not (M.symmetric and J.symmetric):
        raise AsymmetricError("inverse_update needs symmetric M and J")
    s = M.structure
    m0_inv = inverse_blocks(M.p0, step)
    p0 = inverse_blocks(tuple(a + b for a, b in zip(m0_inv, J.p0)), step)
    if form == "auto":
        form = select_update_form(M, J, m0_inv)
    if form == "A1":
        a = tuple(p @ mi for p, mi in zip(p0, m0_inv))
    elif form == "A2":
        a = tuple(np.eye(p.shape[0]) - p @ j for p, j in zip(p0, J.p0))
    else:
        raise ValueError(f"unknown update form {form!r}")
    A = s.block_diag(a)
    P0 = s.block_diag(p0)
    p1 = A @ M.p1 @ A.T - P0 @ J.p1 @ P0
    m1, j1 = s.nonzero_blocks(M.p1), s.nonzero_blocks(J.p1)
    mults = (counts.diag_cube_cost(s)
             + counts.left_diag_cost(s, m1) + counts.symmetric_right_diag_cost(s, m1)
             + counts.left_diag_cost(s, j1) + counts.symmetric_right_diag_cost(s, j1))
    return NbdMatrix(s, M.eps, p0, p1, None, True, mults=mults)
