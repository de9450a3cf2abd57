"""Exact dense Kalman filter and fixed-interval / fixed-lag smoothers.

These are the correctness oracle for the N.B.D. approximations.  Time
indexing: ``phi[i]`` maps step ``i`` to ``i+1`` (``i = 0 .. N_f-1``) and
measurement ``y_i`` (``i = 1 .. N_f``) uses ``h[i-1]``, ``r[i-1]``.
Length-one sequences are broadcast over all steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SINGULAR_RTOL = 1e-9


class ModelError(ValueError):
    pass


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _as_seq(x, ndim: int) -> tuple[np.ndarray, ...]:
    a = np.asarray(x, dtype=float)
    if a.ndim == ndim:
        return (a,)
    return tuple(np.asarray(m, dtype=float) for m in x)


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    phi: tuple[np.ndarray, ...]
    gamma: tuple[np.ndarray, ...]
    q: tuple[np.ndarray, ...]
    h: tuple[np.ndarray, ...]
    rcov: tuple[np.ndarray, ...]
    x0: np.ndarray
    p0: np.ndarray

    def __post_init__(self):
        for name, nd in (("phi", 2), ("gamma", 2), ("q", 2), ("h", 2), ("rcov", 2)):
            object.__setattr__(self, name, _as_seq(getattr(self, name), nd))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        self.validate()

    @classmethod
    def time_invariant(cls, phi, gamma, q, h, r, x0, p0) -> "StateSpaceModel":
        return cls((phi,), (gamma,), (q,), (h,), (r,), x0, p0)

    @property
    def N(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.h[0].shape[0]

    @property
    def r(self) -> int:
        return self.gamma[0].shape[1]

    @property
    def n_steps(self) -> int | None:
        lengths = {len(s) for s in (self.phi, self.gamma, self.q, self.h, self.rcov)} - {1}
        return lengths.pop() if lengths else None

    def validate(self) -> None:
        lengths = {len(s) for s in (self.phi, self.gamma, self.q, self.h, self.rcov)} - {1}
        if len(lengths) > 1:
            raise ModelError(f"model sequences have inconsistent lengths {sorted(lengths)}")
        N = self.N
        if self.p0.shape != (N, N):
            raise ModelError(f"p0 has shape {self.p0.shape}, expected {(N, N)}")
        for f in self.phi:
            if f.shape != (N, N):
                raise ModelError(f"phi has shape {f.shape}, expected {(N, N)}")
            if np.linalg.matrix_rank(f) < N:
                raise ModelError("transition matrix is singular")
        for t in range(max(len(self.gamma), len(self.q))):
            G, Q = self._pick(self.gamma, t), self._pick(self.q, t)
            if G.shape[0] != N or Q.shape != (G.shape[1], G.shape[1]):
                raise ModelError(f"gamma {G.shape} and q {Q.shape} are not conformable")
            if np.linalg.eigvalsh(_sym(Q)).min() < -1e-10 * max(1.0, np.abs(Q).max()):
                raise ModelError("system noise covariance is not positive semidefinite")
        for t in range(max(len(self.h), len(self.rcov))):
            H, R = self._pick(self.h, t), self._pick(self.rcov, t)
            if H.shape[1] != N or R.shape != (H.shape[0], H.shape[0]):
                raise ModelError(f"h {H.shape} and r {R.shape} are not conformable")
            # R = 0 is allowed for noise-free simulation; filtering needs R > 0
            if np.linalg.eigvalsh(_sym(R)).min() < -1e-10 * max(1.0, np.abs(R).max()):
                raise ModelError("measurement noise covariance is not positive semidefinite")
        if np.linalg.eigvalsh(_sym(self.p0)).min() < -1e-10 * max(1.0, np.abs(self.p0).max()):
            raise ModelError("p0 is not positive semidefinite")

    @staticmethod
    def _pick(seq, i):
        return seq[0] if len(seq) == 1 else seq[i]

    def phi_at(self, i: int) -> np.ndarray:
        """``Phi(i+1, i)``."""
        return self._pick(self.phi, i)

    def qgamma_at(self, i: int) -> np.ndarray:
        G = self._pick(self.gamma, i)
        return _sym(G @ self._pick(self.q, i) @ G.T)

    def h_at(self, i: int) -> np.ndarray:
        """Measurement matrix for ``y_i``, ``i >= 1``."""
        return self._pick(self.h, i - 1)

    def r_at(self, i: int) -> np.ndarray:
        return self._pick(self.rcov, i - 1)

    def j_at(self, i: int) -> np.ndarray:
        """``H^T R^-1 H`` at step ``i``; zero at ``i = 0`` (no measurement)."""
        if i == 0:
            return np.zeros((self.N, self.N))
        H = self.h_at(i)
        return _sym(H.T @ _inv(self.r_at(i), f"R at step {i}") @ H)

    def info_vector(self, i: int, innovation: np.ndarray) -> np.ndarray:
        """``H^T R^-1 nu``."""
        return self.h_at(i).T @ _inv(self.r_at(i), f"R at step {i}") @ innovation

    def to_json(self) -> dict:
        seqs = {"phi": self.phi, "gamma": self.gamma, "q": self.q, "h": self.h, "r": self.rcov}
        broadcast = all(len(v) == 1 for v in seqs.values())
        out = {k: (v[0].tolist() if broadcast else [m.tolist() for m in v]) for k, v in seqs.items()}
        out["x0"] = self.x0.tolist()
        out["p0"] = self.p0.tolist()
        out["broadcast"] = broadcast
        return out

    @classmethod
    def from_json(cls, data: dict) -> "StateSpaceModel":
        if data.get("broadcast", False):
            def get(k):
                return (np.asarray(data[k], dtype=float),)
        else:
            def get(k):
                return tuple(np.asarray(m, dtype=float) for m in data[k])
        return cls(get("phi"), get("gamma"), get("q"), get("h"), get("r"),
                   np.asarray(data["x0"], dtype=float), np.asarray(data["p0"], dtype=float))


class Estimate(NamedTuple):
    x: np.ndarray
    P: np.ndarray


def kf_predict(est: Estimate, model: StateSpaceModel, i: int) -> Estimate:
    """Time update from ``i|i`` to ``i+1|i``."""
    Phi = model.phi_at(i)
    if est.P.shape != Phi.shape:
        raise ModelError(f"covariance {est.P.shape} does not match transition {Phi.shape}")
    return Estimate(Phi @ est.x, _sym(Phi @ est.P @ Phi.T + model.qgamma_at(i)))


def _inv(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise ModelError(f"{what} is singular") from None


def kf_update(est: Estimate, model: StateSpaceModel, i: int, y: np.ndarray) -> Estimate:
    """Information-form measurement update at step ``i``."""
    P = _sym(_inv(_sym(_inv(est.P, "P(i|i-1)")) + model.j_at(i), "P(i|i)^-1"))
    innovation = y - model.h_at(i) @ est.x
    return Estimate(est.x + P @ model.info_vector(i, innovation), P)


def gain_forms(P_pred: np.ndarray, P_filt: np.ndarray, model: StateSpaceModel, i: int):
    """Kalman gain as ``P(i|i) H^T R^-1`` and as ``P(i|i-1) H^T (H P H^T + R)^-1``."""
    H, R = model.h_at(i), model.r_at(i)
    k_info = P_filt @ H.T @ np.linalg.inv(R)
    k_cov = P_pred @ H.T @ np.linalg.inv(H @ P_pred @ H.T + R)
    return k_info, k_cov


@dataclass(frozen=True, eq=False)
class FilterTrajectory:
    """Index 0 holds the initial condition in both predicted and filtered slots."""

    x_pred: np.ndarray
    P_pred: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    innovations: np.ndarray
    ys: np.ndarray
    gain_mismatch: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.x_filt.shape[0] - 1


def _check_measurements(model: StateSpaceModel, ys) -> np.ndarray:
    ys = np.asarray(ys, dtype=float)
    if ys.size == 0:
        return ys.reshape(0, model.m)
    ys = ys.reshape(len(ys), -1)
    if model.n_steps is not None and len(ys) > model.n_steps:
        raise ModelError(f"{len(ys)} measurements but the model only covers {model.n_steps} steps")
    return ys


def run_kalman_filter(model: StateSpaceModel, ys) -> FilterTrajectory:
    ys = _check_measurements(model, ys)
    nf, N = len(ys), model.N
    x_pred = np.zeros((nf + 1, N))
    x_filt = np.zeros((nf + 1, N))
    P_pred = np.zeros((nf + 1, N, N))
    P_filt = np.zeros((nf + 1, N, N))
    nus = np.zeros((nf + 1, model.m))
    mismatch = np.zeros(nf + 1)
    x_pred[0] = x_filt[0] = model.x0
    P_pred[0] = P_filt[0] = _sym(model.p0)
    est = Estimate(model.x0, P_filt[0])
    for i in range(1, nf + 1):
        pred = kf_predict(est, model, i - 1)
        est = kf_update(pred, model, i, ys[i - 1])
        x_pred[i], P_pred[i] = pred
        x_filt[i], P_filt[i] = est
        nus[i] = ys[i - 1] - model.h_at(i) @ pred.x
        k_info, k_cov = gain_forms(pred.P, est.P, model, i)
        mismatch[i] = np.abs(k_info - k_cov).max() / max(np.abs(k_cov).max(), 1e-300)
    return FilterTrajectory(x_pred, P_pred, x_filt, P_filt, nus,
                            ys if len(ys) else np.zeros((0, model.m)), mismatch)


@dataclass(frozen=True, eq=False)
class SmootherTrajectory:
    x: np.ndarray
    P: np.ndarray
    formulation: str
    lag: int | None = None
    fallback_steps: tuple[int, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "formulation": self.formulation,
            "lag": self.lag,
            "fallback_steps": list(self.fallback_steps),
            "steps": [{"step": i, "x": self.x[i].tolist(), "P": self.P[i].tolist()}
                      for i in range(len(self.x))],
        }


def _rts_step(ft: FilterTrajectory, model: StateSpaceModel, i: int, x_next, P_next):
    Pf = ft.P_filt[i]
    C = Pf @ model.phi_at(i).T @ _inv(ft.P_pred[i + 1], "P(i+1|i)")
    x = ft.x_filt[i] + C @ (x_next - ft.x_pred[i + 1])
    P = _sym(Pf + C @ (P_next - ft.P_pred[i + 1]) @ C.T)
    return x, P


def rts_smooth(ft: FilterTrajectory, model: StateSpaceModel) -> SmootherTrajectory:
    """Rauch-Tung-Striebel backward correction."""
    x = ft.x_filt.copy()
    P = ft.P_filt.copy()
    for i in range(ft.n_steps - 1, -1, -1):
        x[i], P[i] = _rts_step(ft, model, i, x[i + 1], P[i + 1])
    return SmootherTrajectory(x, P, "rts")


def info_rts_smooth(ft: FilterTrajectory, model: StateSpaceModel) -> SmootherTrajectory:
    """R.T.S. smoother with the covariance recursion in information form.

    Steps whose inner difference ``P^-1(i+1|N) - P^-1(i+1|i)`` is singular
    carry no smoothing information; they fall back to the covariance form.
    """
    x = ft.x_filt.copy()
    P = ft.P_filt.copy()
    fallback = []
    for i in range(ft.n_steps - 1, -1, -1):
        x[i], P_rts = _rts_step(ft, model, i, x[i + 1], P[i + 1])
        pred_inv = _sym(_inv(ft.P_pred[i + 1], "P(i+1|i)"))
        diff = _sym(_inv(P[i + 1], "P(i+1|N)")) - pred_inv
        w = np.linalg.eigvalsh(diff)
        if w.min() <= SINGULAR_RTOL * np.linalg.norm(pred_inv, 2):
            logger.debug("info-rts step %d: singular inner difference, using covariance form", i)
            fallback.append(i)
            P[i] = P_rts
            continue
        Phi = model.phi_at(i)
        inner = _inv(_sym(_inv(diff, "inner difference")) + model.qgamma_at(i), "inner sum")
        info = _sym(_inv(ft.P_filt[i], "P(i|i)")) + Phi.T @ _sym(inner) @ Phi
        P[i] = _sym(_inv(_sym(info), "P^-1(i|N)"))
    return SmootherTrajectory(x, P, "info-rts", fallback_steps=tuple(sorted(fallback)))


def bf_smooth(ft: FilterTrajectory, model: StateSpaceModel) -> SmootherTrajectory:
    """Bryson-Frazier smoother: adjoint recursion, no inversion of ``Phi`` or ``P(i+1|i)``."""
    nf, N = ft.n_steps, model.N
    x = ft.x_filt.copy()
    P = ft.P_filt.copy()
    lam = np.zeros(N)
    Lam = np.zeros((N, N))
    for i in range(nf, -1, -1):
        Pf = ft.P_filt[i]
        if i < nf:
            Phi = model.phi_at(i)
            x[i] = ft.x_filt[i] - Pf @ Phi.T @ lam
            P[i] = _sym(Pf - Pf @ Phi.T @ Lam @ Phi @ Pf)
        if i == 0:
            break
        # lambda(i-1), Lambda(i-1) from step i; both vanish at i = N_f
        J = model.j_at(i)
        B = np.eye(N) - Pf @ J
        g = model.info_vector(i, ft.innovations[i])
        back = model.phi_at(i).T @ lam if i < nf else np.zeros(N)
        Lam_back = model.phi_at(i).T @ Lam @ model.phi_at(i) if i < nf else np.zeros((N, N))
        lam = B.T @ (back - g)
        Lam = _sym(B.T @ Lam_back @ B + J - J @ Pf @ J)
    return SmootherTrajectory(x, P, "bryson-frazier")


def fixed_lag_smooth(ft: FilterTrajectory, model: StateSpaceModel, lag: int) -> SmootherTrajectory:
    """Fixed-lag estimates ``x(i|min(i+lag, N_f))`` and their covariances."""
    nf, N = ft.n_steps, model.N
    if not 0 <= lag <= nf:
        raise ModelError(f"lag {lag} outside [0, {nf}]")
    x = ft.x_filt.copy()
    P = ft.P_filt.copy()
    eye = np.eye(N)
    # e_k^(1) for every measurement time
    e1 = np.zeros((nf + 1, N))
    for k in range(1, nf + 1):
        g = model.info_vector(k, ft.innovations[k])
        e1[k] = g - model.j_at(k) @ ft.P_filt[k] @ g
    for i in range(nf + 1):
        # left factor P(i|i-1) prod_j [I - J P(j|j)] Phi(j)^T, grown one step at a time
        left = ft.P_pred[i].copy()
        for ell in range(1, min(lag, nf - i) + 1):
            j = i + ell - 1
            left = left @ (eye - model.j_at(j) @ ft.P_filt[j]) @ model.phi_at(j).T
            k = i + ell
            Jk = model.j_at(k)
            x[i] = x[i] + left @ e1[k]
            P[i] = P[i] - left @ (Jk - Jk @ ft.P_filt[k] @ Jk) @ left.T
        P[i] = _sym(P[i])
    return SmootherTrajectory(x, P, "fixed-lag", lag=lag)


def fixed_lag_e_vectors(ft: FilterTrajectory, model: StateSpaceModel, i: int, depth: int):
    """``e_i^(1) .. e_i^(depth)`` by the backward recursion over earlier steps."""
    N = model.N
    g = model.info_vector(i, ft.innovations[i])
    e = [g - model.j_at(i) @ ft.P_filt[i] @ g]
    for j in range(1, depth):
        t = i - j
        e.append((np.eye(N) - model.j_at(t) @ ft.P_filt[t]) @ model.phi_at(t).T @ e[-1])
    return e


def joseph_update(P_pred: np.ndarray, model: StateSpaceModel, i: int) -> np.ndarray:
    """Joseph-form covariance update (test oracle only)."""
    H, R = model.h_at(i), model.r_at(i)
    K = P_pred @ H.T @ np.linalg.inv(H @ P_pred @ H.T + R)
    A = np.eye(P_pred.shape[0]) - K @ H
    return _sym(A @ P_pred @ A.T + K @ R @ K.T)


def simulate(model: StateSpaceModel, n_steps: int, rng: np.random.Generator):
    """Sample a state trajectory and measurements ``y_1 .. y_n``."""
    N = model.N

    def draw(cov):
        w, v = np.linalg.eigh(_sym(cov))
        return v @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(len(w)))

    xs = np.zeros((n_steps + 1, N))
    ys = np.zeros((n_steps, model.m))
    xs[0] = model.x0 + draw(model.p0)
    for i in range(n_steps):
        G = model._pick(model.gamma, i)
        xs[i + 1] = model.phi_at(i) @ xs[i] + G @ draw(model._pick(model.q, i))
        ys[i] = model.h_at(i + 1) @ xs[i + 1] + draw(model.r_at(i + 1))
    return xs, ys
