"""Closed-form storage and scalar-multiplication counts, plus the block-level
cost rules used by the instrumented operations.

Closed forms assume the storage convention in which first-order diagonal
blocks are folded into the zeroth order, so first-order parts have empty
diagonal blocks.  The instrumented counters charge whatever blocks are
actually nonzero, so they reproduce the closed forms exactly when the
inputs follow that convention.

Symmetric products only form one triangle.  A diagonal block of a
symmetric result is charged ``n^2 (n+1)/2``; an off-diagonal pair of blocks
``(k, l)``/``(l, k)`` is charged the mean of the two orientations,
``n_k n_l (n_k + n_l) / 2``.
"""
from __future__ import annotations

import numpy as np

from .structure import BandProfile, BlockStructure


def _sizes(s: BlockStructure) -> np.ndarray:
    return np.asarray(s.sizes, dtype=float)


def _neighbor_sum(s: BlockStructure) -> np.ndarray:
    n = _sizes(s)
    padded = np.concatenate(([0.0], n, [0.0]))
    return padded[:-2] + padded[2:]


def storage_count(s: BlockStructure, profile: BandProfile | str = BandProfile.GENERAL,
                  symmetric: bool = False, convention: str = "folded") -> int:
    """Number of stored reals for a first-order N.B.D. matrix.

    ``convention="folded"`` folds the first-order diagonal blocks into the
    zeroth order; ``"separate"`` stores them a second time as part of ``P1``.
    """
    profile = BandProfile(profile)
    n = np.asarray(s.sizes)
    N = s.N
    if profile is BandProfile.GENERAL:
        base = N * (N + 1) // 2 if symmetric else N * N
    else:
        nxt = np.concatenate((n[1:], [0]))
        if symmetric:
            base = int(np.sum(n * (n + 1) // 2 + n * nxt))
        else:
            base = int(np.sum(n * n + 2 * n * nxt))
    if convention == "folded":
        return int(base)
    if convention == "separate":
        extra = np.sum(n * (n + 1) // 2) if symmetric else np.sum(n * n)
        return int(base + extra)
    raise ValueError(f"unknown storage convention {convention!r}")


def equal_block_storage(n_blocks: int, n1: int, symmetric: bool = False) -> float:
    """Nearest-neighbor storage for equal blocks."""
    if symmetric:
        return (1.5 * n_blocks - 1) * n1**2 + n_blocks * n1 / 2
    return (3 * n_blocks - 2) * n1**2


def mul_count(s: BlockStructure, profile: BandProfile | str = BandProfile.GENERAL) -> float:
    """First-order product ``R = P Q``: ``R0`` plus ``R1``."""
    n = _sizes(s)
    r0 = np.sum(n**3)
    if BandProfile(profile) is BandProfile.GENERAL:
        r1 = 2 * np.sum(n**2 * (s.N - n))
    else:
        r1 = 2 * np.sum(n**2 * _neighbor_sum(s))
    return float(r0 + r1)


def mul_count_moments(s: BlockStructure) -> float:
    """The general product count written with the moments ``N2`` and ``N3``."""
    nb = s.n_blocks
    return 2 * s.N * s.N2**2 / nb - s.N3**3 / nb**2


def mul_count_equal_nn(n_blocks: int, n1: int) -> float:
    N = n_blocks * n1
    return 5 * N**3 / n_blocks**2 - 4 * N**3 / n_blocks**3


def sym_product_count(s: BlockStructure, profile: BandProfile | str = BandProfile.GENERAL) -> float:
    """First-order symmetric product ``S = R Q R^T``."""
    n = _sizes(s)
    if BandProfile(profile) is BandProfile.GENERAL:
        return float(np.sum((5 * s.N + 1) / 2 * n**2 - n**3))
    return float(0.5 * np.sum(n**2 * (3 * n + 1 + 5 * _neighbor_sum(s))))


def sym_product_count_moments(s: BlockStructure) -> float:
    nb = s.n_blocks
    return (5 * s.N + 1) * s.N2**2 / (2 * nb) - s.N3**3 / nb**2


def inverse_update_count(s: BlockStructure) -> float:
    """First-order part of ``P`` with ``P^-1 = M^-1 + J``."""
    n = _sizes(s)
    return float(np.sum(n**2 * (3 * s.N - 2 * n)))


def zeroth_inverse_update_count(s: BlockStructure) -> float:
    """Block inversion producing ``P0`` from ``M0^-1 + J0``."""
    n = _sizes(s)
    return float(0.5 * np.sum(n**3 + n**2))


def block_inverse_count(s: BlockStructure) -> float:
    """Inverting a symmetric positive definite block diagonal matrix."""
    return float(0.5 * np.sum(_sizes(s) ** 3))


ldl_count = block_inverse_count


def dense_mul_count(N: int) -> float:
    return float(N**3)


def dense_sym_product_count(N: int) -> float:
    return 1.5 * N**3 + 0.5 * N**2


def dense_inverse_count(N: int) -> float:
    # LU factorization plus N triangular solve pairs
    return float(N**3)


# -- block-level charging rules used by the instrumented operations ---------

def left_diag_cost(s: BlockStructure, pattern: np.ndarray) -> float:
    """``D @ X`` with ``D`` block diagonal; ``pattern`` marks nonzero blocks of ``X``."""
    n = _sizes(s)
    return float(np.sum(pattern * (n[:, None] ** 2) * n[None, :]))


def right_diag_cost(s: BlockStructure, pattern: np.ndarray) -> float:
    """``X @ D`` with ``D`` block diagonal."""
    n = _sizes(s)
    return float(np.sum(pattern * n[:, None] * (n[None, :] ** 2)))


def symmetric_right_diag_cost(s: BlockStructure, pattern: np.ndarray) -> float:
    """``Y @ D^T`` when only one triangle of the symmetric result is formed."""
    n = _sizes(s)
    total = 0.0
    nb = s.n_blocks
    for k in range(nb):
        if pattern[k, k]:
            total += n[k] ** 2 * (n[k] + 1) / 2
        for l in range(k + 1, nb):
            if pattern[k, l] or pattern[l, k]:
                total += n[k] * n[l] * (n[k] + n[l]) / 2
    return float(total)


def diag_cube_cost(s: BlockStructure) -> float:
    return float(np.sum(_sizes(s) ** 3))


def diag_sym_cost(s: BlockStructure) -> float:
    n = _sizes(s)
    return float(np.sum(n**2 * (n + 1) / 2))
