"""Closed-form vs instrumented operation and storage counts."""
from __future__ import annotations

import numpy as np

from ..blockmat import (
    BandProfile,
    BlockStructure,
    NbdMatrix,
    inverse_update,
    mul_first_order,
    sym_product_first_order,
    t1_stabilize,
)
from ..blockmat import counts

DEFAULT_STRUCTURES = ((2, 2, 2), (1, 2, 3), (3, 1, 4, 2), (5,), (2, 3, 2, 3, 1), (4,) * 8)


def random_nbd(s: BlockStructure, rng, symmetric: bool = True,
               profile: BandProfile | str = BandProfile.GENERAL, eps: float = 0.1) -> NbdMatrix:
    """Random matrix with PD blocks and a first-order part of the given band profile
    (diagonal blocks of the first-order part are empty)."""
    p0 = []
    for n in s.sizes:
        a = rng.standard_normal((n, n))
        p0.append(a @ a.T + n * np.eye(n))
    p1 = rng.standard_normal((s.N, s.N))
    if symmetric:
        p1 = p1 + p1.T
    p1 = s.off_diagonal_part(p1)
    if BandProfile(profile) is not BandProfile.GENERAL:
        bi = s.block_index
        p1 = np.where(np.abs(bi[:, None] - bi[None, :]) <= 1, p1, 0.0)
    return NbdMatrix(s, eps, p0, p1, None, symmetric)


def count_table(structures=DEFAULT_STRUCTURES, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for sizes in structures:
        s = BlockStructure(sizes)
        for profile in (BandProfile.GENERAL, BandProfile.NEAREST_NEIGHBOR):
            P = random_nbd(s, rng, True, profile)
            Q = random_nbd(s, rng, True, profile)
            R = random_nbd(s, rng, False, profile)
            ops = [("multiply", mul_first_order(R, P).mults, counts.mul_count(s, profile)),
                   ("sym_product", sym_product_first_order(R, P).mults,
                    counts.sym_product_count(s, profile))]
            if profile is BandProfile.GENERAL:
                ops += [("inverse_update", inverse_update(P, Q).mults, counts.inverse_update_count(s)),
                        ("ldl", t1_stabilize(P).mults, counts.ldl_count(s))]
            for name, measured, closed in ops:
                rows.append({"sizes": "-".join(map(str, sizes)), "profile": profile.value,
                             "operation": name, "closed_form": float(closed),
                             "instrumented": float(measured), "dense": _dense(name, s.N),
                             "storage": counts.storage_count(s, profile, symmetric=True)})
    return rows


def _dense(op: str, N: int) -> float:
    return {"multiply": counts.dense_mul_count(N),
            "sym_product": counts.dense_sym_product_count(N),
            "inverse_update": 2 * counts.dense_inverse_count(N),
            "ldl": counts.dense_inverse_count(N)}[op]
