"""Suboptimal N.B.D. fixed-interval and fixed-lag smoothers.

Covariance recursions run in first-order block algebra on the unstabilized
filter output; stabilized factors are used for the exact state arithmetic
and for every emitted covariance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blockmat import (
    NbdMatrix,
    first_order_inverse,
    inv_first_order,
    inverse_update,
    mul_first_order,
    stabilize,
    sym_product_first_order,
)
from .blockmat import counts
from .blockmat.structure import NbdError
from .kalman_ref import SINGULAR_RTOL, SmootherTrajectory
from .nbd_filter import NbdModel, NbdTrajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NbdSmootherTrajectory(SmootherTrajectory):
    """Emitted (stabilized) ``x``/``P`` plus the propagated first-order matrices."""

    raw: tuple[NbdMatrix, ...] = ()
    mults: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # info-rts only: min eigenvalue of T[P^-1(i|N)] - T[P^-1(i|i)]
    info_gap: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class BfAdjointState:
    lambda_vec: np.ndarray
    lambda_mat: NbdMatrix  # never stabilized


@dataclass(frozen=True, eq=False)
class FixedLagWork:
    e_vectors: tuple[np.ndarray, ...]
    p_ell: tuple[NbdMatrix, ...]


def _info(model: NbdModel, i: int) -> NbdMatrix:
    return model.info if i > 0 else NbdMatrix.zeros(model.structure, model.eps)


def _info_vector(model: NbdModel, traj: NbdTrajectory, i: int) -> np.ndarray:
    if i == 0:
        return np.zeros(model.structure.N)
    return model.h.T @ np.linalg.solve(model.rcov, traj.innovations[i])


def _j_dense(model: NbdModel, i: int) -> np.ndarray:
    return _info(model, i).dense()


def _emit(raw, stabilizer, formulation, x, lag=None, fallback=(), mults=None, info_gap=None):
    stab = [stabilize(P, stabilizer, step=i) for i, P in enumerate(raw)]
    P = np.array([s.value() for s in stab])
    mults = np.zeros(len(raw)) if mults is None else np.asarray(mults, dtype=float)
    return NbdSmootherTrajectory(x, P, formulation, lag, tuple(sorted(fallback)),
                                 tuple(raw), mults, info_gap)


def _check_ys(traj: NbdTrajectory, ys) -> None:
    """Measurements passed alongside a trajectory must be the ones it filtered."""
    if ys is None:
        return
    ys = np.asarray(ys, dtype=float)
    if ys.size != traj.ys.size or not np.array_equal(ys.reshape(traj.ys.shape), traj.ys):
        raise NbdError("measurements do not match the filter trajectory")


def _rts_covariance(traj: NbdTrajectory, model: NbdModel, i: int, P_next: NbdMatrix):
    """First-order ``P(i|i) + C (P(i+1|N) - P(i+1|i)) C^T``."""
    Pf, Pp = traj.filt[i].P, traj.pred[i + 1].P
    a = mul_first_order(Pf, model.phi.T)
    b = first_order_inverse(Pp, step=i + 1)
    C = mul_first_order(a, b)
    corr = sym_product_first_order(C, P_next - Pp)
    P = Pf + corr
    mults = a.mults + b.mults + C.mults + corr.mults
    return NbdMatrix(P.structure, P.eps, P.p0, P.p1, None, True, mults=mults)


def _rts_state(traj: NbdTrajectory, model: NbdModel, i: int, x_next: np.ndarray) -> np.ndarray:
    """Exact arithmetic on ``P+(i|i) Phi^T Inv[P(i+1|i)]``."""
    inv = inv_first_order(traj.pred[i + 1].P, step=i + 1)
    v = model.phi_dense().T @ inv.apply(x_next - traj.pred[i + 1].x)
    return traj.filt[i].x + traj.filt[i].P_stab.apply(v)


def nbd_rts(traj: NbdTrajectory, model: NbdModel, stabilizer: str | None = None):
    stabilizer = stabilizer or traj.stabilizer
    nf = traj.n_steps
    x = traj.x_filt.copy()
    raw = [s.P for s in traj.filt]
    mults = np.zeros(nf + 1)
    for i in range(nf - 1, -1, -1):
        x[i] = _rts_state(traj, model, i, x[i + 1])
        raw[i] = _rts_covariance(traj, model, i, raw[i + 1])
        mults[i] = raw[i].mults
    return _emit(raw, stabilizer, "rts", x, mults=mults)


def nbd_info_rts(traj: NbdTrajectory, model: NbdModel, stabilizer: str | None = None):
    """Information-form covariance recursion.

    ``P^-1(i|N) = P^-1(i|i) + X_i`` with
    ``X_i = Phi^T [(P^-1(i+1|N) - P^-1(i+1|i))^-1 + Q]^-1 Phi``, all in
    first-order algebra.  The stabilized information is ``T[P^-1(i|i)] +
    T[X_i]``: stabilizing the two terms separately keeps it above the
    stabilized filtered information by construction (stabilizing the sum
    does not, because the second-order cross terms of ``T`` do not add).
    Steps whose inner difference is singular use the covariance form.
    """
    stabilizer = stabilizer or traj.stabilizer
    nf = traj.n_steps
    s = model.structure
    x = traj.x_filt.copy()
    filt_inv = [first_order_inverse(st.P, step=i) for i, st in enumerate(traj.filt)]
    filt_stab = [stabilize(P, stabilizer, step=i).value() for i, P in enumerate(filt_inv)]
    info = list(filt_inv)
    info_stab = list(filt_stab)
    raw = [st.P for st in traj.filt]
    mults = np.zeros(nf + 1)
    fallback = []
    for i in range(nf - 1, -1, -1):
        x[i] = _rts_state(traj, model, i, x[i + 1])
        pred_inv = first_order_inverse(traj.pred[i + 1].P, step=i + 1)
        D = info[i + 1] - pred_inv
        floor = SINGULAR_RTOL * max(np.linalg.norm(b, 2) for b in pred_inv.p0)
        if min(np.linalg.eigvalsh(b).min() for b in D.p0) <= floor:
            logger.debug("nbd info-rts step %d: singular inner difference, covariance form", i)
            fallback.append(i)
            raw[i] = _rts_covariance(traj, model, i, raw[i + 1])
            info[i] = first_order_inverse(raw[i], step=i)
            info_stab[i] = stabilize(info[i], stabilizer, step=i).value()
            mults[i] = raw[i].mults + info[i].mults
            continue
        inner = inverse_update(D, model.qgamma, step=i)
        term = sym_product_first_order(model.phi.T, inner)
        info[i] = filt_inv[i] + term
        raw[i] = first_order_inverse(info[i], step=i)
        info_stab[i] = filt_stab[i] + stabilize(term, stabilizer, step=i).value()
        mults[i] = (pred_inv.mults + inner.mults + term.mults
                    + 2 * counts.zeroth_inverse_update_count(s) + raw[i].mults)
    P = np.array([_spd_inverse(a) for a in info_stab])
    gap = np.array([np.linalg.eigvalsh(a - b).min() for a, b in zip(info_stab, filt_stab)])
    return NbdSmootherTrajectory(x, P, "info-rts", None, tuple(sorted(fallback)),
                                 tuple(raw), mults, gap)


def _spd_inverse(a: np.ndarray) -> np.ndarray:
    out = np.linalg.inv(0.5 * (a + a.T))
    return 0.5 * (out + out.T)


def _bf_back(traj: NbdTrajectory, model: NbdModel, i: int, adj: BfAdjointState,
             nf: int) -> BfAdjointState:
    """``lambda(i-1), Lambda(i-1)`` from step ``i``."""
    s = model.structure
    J = _info(model, i)
    Pf = traj.filt[i].P
    g = _info_vector(model, traj, i)
    phi = model.phi_dense()
    back = phi.T @ adj.lambda_vec if i < nf else np.zeros(s.N)
    v = back - g
    lam = v - J.dense() @ traj.filt[i].P_stab.apply(v)
    Bt = NbdMatrix.identity(s, model.eps) - mul_first_order(J, Pf)
    JPJ = sym_product_first_order(J, Pf)
    Lam = J - JPJ
    if i < nf:
        Lam_back = sym_product_first_order(model.phi.T, adj.lambda_mat)
        Lam = sym_product_first_order(Bt, Lam_back) + Lam
    return BfAdjointState(lam, NbdMatrix(s, model.eps, Lam.p0, Lam.p1, None, True))


def nbd_bf(traj: NbdTrajectory, model: NbdModel, ys=None, stabilizer: str | None = None):
    """Bryson-Frazier smoother; the adjoint ``Lambda`` is never stabilized.

    ``ys`` defaults to the measurements stored on the trajectory.
    """
    stabilizer = stabilizer or traj.stabilizer
    _check_ys(traj, ys)
    nf = traj.n_steps
    s = model.structure
    x = traj.x_filt.copy()
    raw = [st.P for st in traj.filt]
    mults = np.zeros(nf + 1)
    adj = BfAdjointState(np.zeros(s.N), NbdMatrix.zeros(s, model.eps))
    phi = model.phi_dense()
    for i in range(nf, -1, -1):
        if i < nf:
            st = traj.filt[i]
            x[i] = st.x - st.P_stab.apply(phi.T @ adj.lambda_vec)
            a = mul_first_order(st.P, model.phi.T)
            corr = sym_product_first_order(a, adj.lambda_mat)
            P = st.P - corr
            raw[i] = NbdMatrix(s, model.eps, P.p0, P.p1, None, True)
            mults[i] = a.mults + corr.mults
        if i == 0:
            break
        adj = _bf_back(traj, model, i, adj, nf)
    return _emit(raw, stabilizer, "bryson-frazier", x, mults=mults)


def fixed_lag_work(traj: NbdTrajectory, model: NbdModel, i: int, lag: int) -> FixedLagWork:
    """e-vectors ``e_{i+l}`` carried back to ``i`` and the factors ``P^(l)``."""
    nf = traj.n_steps
    s = model.structure
    phi = model.phi_dense()
    depth = min(lag, nf - i)
    es, pl = [], []
    left = traj.pred[i].P
    for ell in range(1, depth + 1):
        k = i + ell
        g = _info_vector(model, traj, k)
        e = g - _j_dense(model, k) @ traj.filt[k].P_stab.apply(g)
        for t in range(k - 1, i - 1, -1):
            v = phi.T @ e
            e = v - _j_dense(model, t) @ traj.filt[t].P_stab.apply(v)
        es.append(e)
        j = k - 1
        step = NbdMatrix.identity(s, model.eps) - mul_first_order(_info(model, j), traj.filt[j].P)
        left = mul_first_order(left, mul_first_order(step, model.phi.T))
        pl.append(left)
    return FixedLagWork(tuple(es), tuple(pl))


def nbd_fixed_lag(traj: NbdTrajectory, model: NbdModel, ys=None, lag: int = 1,
                  stabilizer: str | None = None):
    """Estimates ``x(i|min(i+lag, N_f))`` with the stabilized gain factors."""
    stabilizer = stabilizer or traj.stabilizer
    _check_ys(traj, ys)
    nf = traj.n_steps
    if not 0 <= lag <= nf:
        raise NbdError(f"lag {lag} outside [0, {nf}]")
    s = model.structure
    x = traj.x_filt.copy()
    raw = [st.P for st in traj.filt]
    mults = np.zeros(nf + 1)
    for i in range(nf + 1):
        work = fixed_lag_work(traj, model, i, lag)
        if not work.e_vectors:
            continue
        x[i] = x[i] + traj.pred[i].P_stab.apply(np.sum(work.e_vectors, axis=0))
        P = traj.filt[i].P
        for ell, left in enumerate(work.p_ell, start=1):
            k = i + ell
            J = _info(model, k)
            W = J - sym_product_first_order(J, traj.filt[k].P)
            corr = sym_product_first_order(left, W)
            P = P - corr
            mults[i] += left.mults + corr.mults
        raw[i] = NbdMatrix(s, model.eps, P.p0, P.p1, None, True)
    return _emit(raw, stabilizer, "fixed-lag", x, lag=lag, mults=mults)


SMOOTHERS = {"rts": nbd_rts, "info": nbd_info_rts, "bf": nbd_bf, "fixedlag": nbd_fixed_lag}
