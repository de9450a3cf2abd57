"""Suboptimal nearly-block-diagonal Kalman filter, first order in ``eps``.

The covariance is propagated as an unstabilized :class:`NbdMatrix`; a fresh
stabilized factor is built at every step and used for the state update and
for anything emitted, but it is never fed back into the recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockmat import (
    BlockStructure,
    NbdMatrix,
    inverse_update,
    stabilize,
    sym_product_first_order,
)
from .blockmat import counts
from .blockmat.structure import NbdError, StructureMismatchError
from .kalman_ref import StateSpaceModel, _check_measurements

NORMAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class NbdModel:
    """Time-invariant N.B.D. state space model.

    ``phi0`` holds the diagonal blocks of the leading-order transition, the
    rest of ``Phi`` is ``eps * phi1``; likewise for the system noise
    ``Gamma Q Gamma^T`` and the information matrix ``J = H^T R^-1 H``.
    ``h``/``rcov`` are kept dense for the exact state update.
    """

    structure: BlockStructure
    eps: float
    phi0: tuple[np.ndarray, ...]
    phi1: np.ndarray
    qg0: tuple[np.ndarray, ...]
    qg1: np.ndarray
    j0: tuple[np.ndarray, ...]
    j1: np.ndarray
    p_init: NbdMatrix
    x0: np.ndarray
    h: np.ndarray
    rcov: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.structure
        if self.p_init.structure != s or self.p_init.eps != self.eps:
            raise StructureMismatchError("initial covariance does not share the model structure/eps")
        for k, b in enumerate(self.phi0):
            if np.linalg.matrix_rank(b) < b.shape[0]:
                raise NbdError(f"leading-order transition block {k} is singular")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "h", np.atleast_2d(np.asarray(self.h, dtype=float)))
        object.__setattr__(self, "rcov", np.atleast_2d(np.asarray(self.rcov, dtype=float)))
        if self.h.shape[1] != s.N:
            raise StructureMismatchError(f"h has {self.h.shape[1]} columns, expected {s.N}")
        J = self.h.T @ np.linalg.solve(self.rcov, self.h)
        if not np.allclose(J, self.info.dense(), rtol=1e-8, atol=1e-10 * max(1.0, np.abs(J).max())):
            raise NbdError("h and r are inconsistent with the N.B.D. information matrix j0/j1")

    @property
    def phi(self) -> NbdMatrix:
        return NbdMatrix(self.structure, self.eps, self.phi0, self.phi1)

    @property
    def qgamma(self) -> NbdMatrix:
        return NbdMatrix(self.structure, self.eps, self.qg0, self.qg1, symmetric=True)

    @property
    def info(self) -> NbdMatrix:
        return NbdMatrix(self.structure, self.eps, self.j0, self.j1, symmetric=True)

    def phi_dense(self) -> np.ndarray:
        return self.phi.dense()

    def is_normal(self, tol: float = NORMAL_TOL) -> bool:
        """Leading-order transition blocks commute with their transposes."""
        return all(np.abs(b.T @ b - b @ b.T).max() <= tol * max(1.0, np.abs(b).max() ** 2)
                   for b in self.phi0)

    def to_state_space(self) -> StateSpaceModel:
        N = self.structure.N
        return StateSpaceModel.time_invariant(
            self.phi_dense(), np.eye(N), self.qgamma.dense(), self.h, self.rcov,
            self.x0, self.p_init.dense())

    def with_eps(self, eps: float) -> "NbdModel":
        """Same first-order parts at another coupling strength (``h`` is rebuilt)."""
        j = NbdMatrix(self.structure, eps, self.j0, self.j1, symmetric=True).dense()
        h, r = information_factor(j)
        p = self.p_init
        return NbdModel(self.structure, eps, self.phi0, self.phi1, self.qg0, self.qg1,
                        self.j0, self.j1, NbdMatrix(p.structure, eps, p.p0, p.p1, None, True),
                        self.x0, h, r, dict(self.meta))

    def to_json(self) -> dict:
        out = self.to_state_space().to_json()
        out.update({
            "sizes": list(self.structure.sizes),
            "eps": self.eps,
            "phi1": self.phi1.tolist(),
            "qg0": [b.tolist() for b in self.qg0],
            "qg1": self.qg1.tolist(),
            "j0": [b.tolist() for b in self.j0],
            "j1": self.j1.tolist(),
            "p0_blocks": [b.tolist() for b in self.p_init.p0],
            "p0_1": self.p_init.p1.tolist(),
            "meta": self.meta,
        })
        return out

    @classmethod
    def from_json(cls, data: dict) -> "NbdModel":
        s = BlockStructure(data["sizes"])
        eps = float(data["eps"])
        phi1 = np.asarray(data["phi1"], dtype=float)
        phi = np.asarray(data["phi"], dtype=float)
        lead = phi - eps * phi1
        if np.abs(s.off_diagonal_part(lead)).max(initial=0) > 1e-10 * max(1.0, np.abs(phi).max()):
            raise NbdError("phi - eps*phi1 is not block diagonal")
        blocks = lambda key: tuple(np.asarray(b, dtype=float) for b in data[key])  # noqa: E731
        if "p0_blocks" in data:
            p_init = NbdMatrix(s, eps, blocks("p0_blocks"), np.asarray(data["p0_1"], dtype=float),
                               symmetric=True)
        else:
            p_init = NbdMatrix.split(np.asarray(data["p0"], dtype=float), s, eps, symmetric=True)
        return cls(s, eps, s.blocks_of(lead), phi1, blocks("qg0"),
                   np.asarray(data["qg1"], dtype=float), blocks("j0"),
                   np.asarray(data["j1"], dtype=float), p_init,
                   np.asarray(data["x0"], dtype=float), np.asarray(data["h"], dtype=float),
                   np.asarray(data["r"], dtype=float), dict(data.get("meta", {})))


def information_factor(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A measurement pair ``(H, R = I)`` with ``H^T H = J`` for PSD ``J``."""
    w, v = np.linalg.eigh(0.5 * (J + J.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise NbdError("information matrix is not positive semidefinite")
    H = (v * np.sqrt(np.clip(w, 0.0, None))).T
    return H, np.eye(H.shape[0])


@dataclass(frozen=True, eq=False)
class NbdFilterState:
    x: np.ndarray
    P: NbdMatrix
    P_stab: object  # StabilizedFactor or DenseCovariance; rebuilt, never propagated

    def covariance(self) -> np.ndarray:
        return self.P_stab.value()


def nbd_predict(state: NbdFilterState, model: NbdModel, i: int,
                stabilizer: str = "t1") -> NbdFilterState:
    """``i|i -> i+1|i``: blockwise zeroth order, four-term first order."""
    if state.P.structure != model.structure:
        raise StructureMismatchError("state and model block structures differ")
    S = sym_product_first_order(model.phi, state.P)
    P = S + model.qgamma
    P = NbdMatrix(P.structure, P.eps, P.p0, P.p1, None, True, mults=S.mults)
    x = model.phi_dense() @ state.x
    return NbdFilterState(x, P, stabilize(P, stabilizer, step=i + 1))


def nbd_update(state: NbdFilterState, model: NbdModel, i: int, y: np.ndarray,
               stabilizer: str = "t1") -> NbdFilterState:
    """Measurement update at step ``i``.

    Zeroth order exactly per block, first order by the inverse-update
    sandwich, stabilize, then assimilate ``y`` exactly with the stabilized
    factor.
    """
    P = inverse_update(state.P, model.info, step=i)
    s = model.structure
    mults = (P.mults + counts.zeroth_inverse_update_count(s) + counts.block_inverse_count(s))
    stab = stabilize(P, stabilizer, step=i)
    mults += stab.mults
    innovation = np.asarray(y, dtype=float).reshape(-1) - model.h @ state.x
    g = model.h.T @ np.linalg.solve(model.rcov, innovation)
    x = state.x + stab.apply(g)
    P = NbdMatrix(P.structure, P.eps, P.p0, P.p1, None, True, mults=mults)
    return NbdFilterState(x, P, stab)


def dense_step_count(N: int) -> float:
    """Covariance path of one exact step: ``Phi P Phi^T`` and two inversions."""
    return counts.dense_sym_product_count(N) + 2 * counts.dense_inverse_count(N)


@dataclass(frozen=True, eq=False)
class NbdTrajectory:
    """``pred[0]`` and ``filt[0]`` are the initial condition."""

    pred: tuple[NbdFilterState, ...]
    filt: tuple[NbdFilterState, ...]
    mults: np.ndarray
    innovations: np.ndarray
    ys: np.ndarray
    stabilizer: str

    @property
    def n_steps(self) -> int:
        return len(self.filt) - 1

    @property
    def x_filt(self) -> np.ndarray:
        return np.array([s.x for s in self.filt])

    @property
    def x_pred(self) -> np.ndarray:
        return np.array([s.x for s in self.pred])

    def covariances(self, kind: str = "filt") -> np.ndarray:
        states = self.filt if kind == "filt" else self.pred
        return np.array([s.covariance() for s in states])

    def to_json(self) -> dict:
        return {
            "stabilizer": self.stabilizer,
            "steps": [{"step": i, "x": st.x.tolist(), "P": st.covariance().tolist(),
                       "mults": float(self.mults[i])} for i, st in enumerate(self.filt)],
        }


def initial_state(model: NbdModel, stabilizer: str = "t1") -> NbdFilterState:
    return NbdFilterState(model.x0.copy(), model.p_init, stabilize(model.p_init, stabilizer, step=0))


def run_nbd_filter(model: NbdModel, ys, stabilizer: str = "t1") -> NbdTrajectory:
    ys = _check_measurements(model.to_state_space(), ys)
    state = initial_state(model, stabilizer)
    pred, filt = [state], [state]
    mults = [0.0]
    nus = np.zeros((len(ys) + 1, model.h.shape[0]))
    for i in range(1, len(ys) + 1):
        p = nbd_predict(state, model, i - 1, stabilizer)
        state = nbd_update(p, model, i, ys[i - 1], stabilizer)
        nus[i] = ys[i - 1] - model.h @ p.x
        pred.append(p)
        filt.append(state)
        mults.append(p.P.mults + state.P.mults)
    return NbdTrajectory(tuple(pred), tuple(filt), np.array(mults), nus, ys, stabilizer)
