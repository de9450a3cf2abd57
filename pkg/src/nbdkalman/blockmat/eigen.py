"""First-order eigenvalue/eigenvector perturbation of ``S0 + eps*S1``."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .structure import BlockStructure, NbdError

PINV_RTOL = 1e-8


class DegenerateSpectrumWarning(UserWarning):
    """Zeroth-order eigenvalues coincide; first-order corrections are unreliable."""


@dataclass(frozen=True, eq=False)
class EigenPerturbation:
    lambda0: np.ndarray
    vectors0: np.ndarray  # columns
    lambda1: np.ndarray
    vectors1: np.ndarray  # columns, each orthogonal to its zeroth-order vector
    eps: float
    pinv_rtol: float
    degenerate: tuple[tuple[int, ...], ...] = ()

    def eigenvalues(self) -> np.ndarray:
        return self.lambda0 + self.eps * self.lambda1

    def eigenvectors(self) -> np.ndarray:
        return self.vectors0 + self.eps * self.vectors1


def _zeroth_order(S0: np.ndarray, structure: BlockStructure | None):
    if structure is None:
        return np.linalg.eigh(S0)
    N = structure.N
    lam = np.empty(N)
    vec = np.zeros((N, N))
    for s in structure.slices:
        w, v = np.linalg.eigh(S0[s, s])
        lam[s] = w
        vec[s, s] = v
    order = np.argsort(lam, kind="stable")
    return lam[order], vec[:, order]


def _clusters(gaps_zero: np.ndarray) -> tuple[tuple[int, ...], ...]:
    seen = set()
    out = []
    for k in range(gaps_zero.shape[0]):
        if k in seen:
            continue
        members = tuple(int(j) for j in np.nonzero(gaps_zero[k])[0])
        if len(members) > 1:
            out.append(members)
            seen.update(members)
    return tuple(out)


def perturb_eigen(S0: np.ndarray, S1: np.ndarray, eps: float,
                  structure: BlockStructure | None = None,
                  pinv_rtol: float = PINV_RTOL) -> EigenPerturbation:
    """Nondegenerate first-order perturbation theory.

    Eigenvalues move by ``eps * e_k^T S1 e_k``; eigenvectors by
    ``-eps * (S0 - lambda_k I)^+ (S1 - lambda1_k I) e_k`` with the
    Moore-Penrose inverse truncated at ``pinv_rtol`` times the largest
    singular value.  Clusters of coinciding zeroth-order eigenvalues are
    reported in ``degenerate`` and warned about.
    """
    S0 = np.asarray(S0, dtype=float)
    S1 = np.asarray(S1, dtype=float)
    if S0.shape != S1.shape or S0.shape[0] != S0.shape[1]:
        raise NbdError(f"S0 {S0.shape} and S1 {S1.shape} must be equal square shapes")
    if not (np.allclose(S0, S0.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S0).max(initial=0)))
            and np.allclose(S1, S1.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S1).max(initial=0)))):
        raise NbdError("perturb_eigen needs symmetric S0 and S1")
    if structure is not None and np.any(structure.off_diagonal_part(S0) != 0):
        raise NbdError("S0 is not block diagonal for the given structure")

    lam0, vec0 = _zeroth_order(S0, structure)
    coupling = vec0.T @ S1 @ vec0
    lam1 = np.diag(coupling).copy()

    gaps = lam0[:, None] - lam0[None, :]  # gaps[j, k] = lambda_j - lambda_k
    cutoff = pinv_rtol * np.abs(gaps).max(axis=0, keepdims=True)
    zero = np.abs(gaps) <= cutoff
    weights = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, gaps))
    vec1 = -vec0 @ (weights * coupling)

    degenerate = _clusters(zero)
    if degenerate:
        warnings.warn(f"degenerate zeroth-order eigenvalue clusters {degenerate}; "
                      "first-order corrections assume simple eigenvalues",
                      DegenerateSpectrumWarning, stacklevel=2)
    return EigenPerturbation(lam0, vec0, lam1, vec1, float(eps), pinv_rtol, degenerate)


def assemble_spectral(ep: EigenPerturbation, eigenvalues: np.ndarray | None = None) -> np.ndarray:
    lam = ep.eigenvalues() if eigenvalues is None else eigenvalues
    v = ep.eigenvectors()
    out = (v * lam) @ v.T
    return 0.5 * (out + out.T)


def spectral_first_order(S0: np.ndarray, S1: np.ndarray, eps: float,
                         structure: BlockStructure | None = None) -> np.ndarray:
    """``sum_k (lam0 + eps lam1)(e0 + eps e1)(e0 + eps e1)^T``."""
    return assemble_spectral(perturb_eigen(S0, S1, eps, structure))
