"""Synthetic weakly coupled models and pixel-style measurements."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..blockmat import BlockStructure, NbdMatrix
from ..blockmat.structure import NbdError
from ..kalman_ref import StateSpaceModel, simulate
from ..nbd_filter import NbdModel, information_factor

DEFAULT_DECAY = (0.5, 0.95)
RADIUS_EPS = 0.5
MAX_REDRAWS = 50


def sine_basis(k_max: int) -> Callable[[np.ndarray], np.ndarray]:
    """``Psi_k(z) = sqrt(2) sin(k pi z)``, k = 1..k_max, orthonormal on [0, 1]."""
    k = np.arange(1, k_max + 1)

    def basis(z):
        return np.sqrt(2.0) * np.sin(np.pi * np.outer(np.asarray(z, dtype=float), k))

    basis.size = k_max
    return basis


def uniform_locations(m: int, offset: float = 0.25) -> np.ndarray:
    """``z_l = (l + offset) / m``.

    ``offset=0.5`` (cell midpoints) makes the sine basis exactly discretely
    orthogonal; the default keeps a small, m-dependent off-diagonal residue.
    """
    return (np.arange(m) + offset) / m


def clustered_locations(m: int, center: float = 0.5, width: float = 0.15,
                        seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(np.clip(rng.normal(center, width, m), 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class PixelObservation:
    h: np.ndarray
    rcov: np.ndarray
    j: np.ndarray
    j0: tuple[np.ndarray, ...]
    j1: np.ndarray
    eps: float  # inferred: ||off-block|| / ||block part||

    def info(self, structure: BlockStructure) -> NbdMatrix:
        return NbdMatrix(structure, self.eps, self.j0, self.j1, symmetric=True)


def generate_pixel_observation(basis, locations, sigma2: float,
                               structure: BlockStructure | None = None) -> PixelObservation:
    """``H[l, k] = Psi_k(z_l)``, ``R = sigma2 I`` and the split of ``J = H^T R^-1 H``."""
    z = np.asarray(locations, dtype=float).reshape(-1)
    H = np.atleast_2d(basis(z))
    n_basis = H.shape[1]
    structure = BlockStructure([1] * n_basis) if structure is None else structure
    if structure.N != n_basis:
        raise NbdError(f"structure has N={structure.N} but the basis has {n_basis} functions")
    if len(z) < structure.n_blocks:
        raise NbdError(f"{len(z)} measurement locations for {structure.n_blocks} blocks: "
                       "the blocks would be coupled by spatial aliasing; use more pixels")
    if sigma2 <= 0:
        raise NbdError("sigma2 must be positive")
    R = sigma2 * np.eye(len(z))
    J = H.T @ H / sigma2
    J = 0.5 * (J + J.T)
    block = structure.diagonal_part(J)
    off = structure.off_diagonal_part(J)
    scale = np.linalg.norm(block, 2)
    eps = float(np.linalg.norm(off, 2) / scale) if scale > 0 else 0.0
    j1 = off / eps if eps > 0 else np.zeros_like(off)
    return PixelObservation(H, R, J, structure.blocks_of(J), j1, eps)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _spd_blocks(rng, s: BlockStructure, lo: float, hi: float):
    out = []
    for n in s.sizes:
        u = _orthogonal(rng, n)
        out.append((u * rng.uniform(lo, hi, n)) @ u.T)
    return tuple(0.5 * (b + b.T) for b in out)


def _off_block(rng, s: BlockStructure, nearest_neighbor: bool) -> np.ndarray:
    a = rng.standard_normal((s.N, s.N))
    a = 0.5 * (a + a.T)
    a = s.off_diagonal_part(a)
    if nearest_neighbor:
        bi = s.block_index
        a = np.where(np.abs(bi[:, None] - bi[None, :]) <= 1, a, 0.0)
    return a


def _normalized(a: np.ndarray, norm: float) -> np.ndarray:
    n = np.linalg.norm(a, 2)
    return a * (norm / n) if n > 0 else a


def _min_eig(blocks) -> float:
    return min(np.linalg.eigvalsh(b).min() for b in blocks)


def _assemble(s, eps, phi0, phi1, q0, q1, j0, j1, p0, p1, rng, meta) -> NbdModel:
    J = NbdMatrix(s, eps, j0, j1, symmetric=True).dense()
    h, r = information_factor(J)
    x0 = rng.standard_normal(s.N)
    return NbdModel(s, eps, phi0, phi1, q0, q1, j0, j1,
                    NbdMatrix(s, eps, p0, p1, symmetric=True), x0, h, r, meta)


def generate_diffusion_model(s: BlockStructure, eps: float,
                             decay: Sequence[float] = DEFAULT_DECAY, seed: int = 0,
                             coupling: float = 0.1, noise_coupling: float = 0.5,
                             pixels_per_mode: int = 8, sigma2: float = 1.0) -> NbdModel:
    """Linear surrogate for a dissipative flow expanded in eigenmodes.

    Modes decay by factors spread over ``decay`` (slower for low modes),
    rotated within each block so the blocks are full but normal.  Off-block
    couplings are nearest-neighbor for ``Phi``/``Q``/``P(0|0)``; the
    measurement coupling comes from sine-basis pixels at offset locations.
    ``coupling`` is ``||Phi1||_2``; ``noise_coupling`` bounds the first-order
    parts of ``Q``, ``P(0|0)`` and ``J`` relative to their smallest
    zeroth-order eigenvalue, so all three stay PD for ``eps <= 1``.
    """
    lo, hi = sorted(float(d) for d in decay)
    if not (0 < lo and hi < 1):
        raise NbdError(f"decay factors must lie in (0, 1), got {tuple(decay)}")
    if eps < 0:
        raise NbdError("eps must be nonnegative")
    rng = np.random.default_rng(seed)
    rates = np.linspace(hi, lo, s.N)
    pix = generate_pixel_observation(sine_basis(s.N), uniform_locations(pixels_per_mode * s.N),
                                     sigma2, s)
    for _ in range(MAX_REDRAWS):
        phi0 = tuple((u * d) @ u.T for u, d in
                     ((_orthogonal(rng, n), rates[sl]) for n, sl in zip(s.sizes, s.slices)))
        phi0 = tuple(0.5 * (b + b.T) for b in phi0)
        phi1 = _normalized(_off_block(rng, s, True), coupling)
        dense = s.block_diag(phi0) + RADIUS_EPS * phi1
        if np.abs(np.linalg.eigvals(dense)).max() < 1.0:
            break
    else:
        raise NbdError("could not draw a stable transition; lower the coupling")
    q0 = _spd_blocks(rng, s, 0.05, 0.2)
    q1 = _normalized(_off_block(rng, s, True), noise_coupling * _min_eig(q0))
    p0 = _spd_blocks(rng, s, 0.5, 2.0)
    p1 = _normalized(_off_block(rng, s, True), noise_coupling * _min_eig(p0))
    j1 = _normalized(pix.j1, noise_coupling * _min_eig(pix.j0))
    meta = {"family": "diffusion-modes", "seed": seed, "pixels": int(pix.h.shape[0]),
            "sigma2": sigma2, "inferred_eps": pix.eps}
    return _assemble(s, eps, phi0, phi1, q0, q1, pix.j0, j1, p0, p1, rng, meta)


def generate_random_stable_model(s: BlockStructure, eps: float, seed: int = 0,
                                 radius: float = 0.9, coupling: float = 0.2,
                                 noise_coupling: float = 0.5) -> NbdModel:
    """Nonsymmetric random blocks with dense coupling (Phi^(0) need not be normal)."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        phi0 = []
        for n in s.sizes:
            b = rng.standard_normal((n, n))
            phi0.append(b * (radius * rng.uniform(0.5, 1.0) / np.abs(np.linalg.eigvals(b)).max()))
        phi1 = _normalized(s.off_diagonal_part(rng.standard_normal((s.N, s.N))), coupling)
        dense = s.block_diag(phi0) + RADIUS_EPS * phi1
        if np.abs(np.linalg.eigvals(dense)).max() < 1.0 and _min_sv(phi0) > 1e-3:
            break
    else:
        raise NbdError("could not draw a stable transition; lower radius or coupling")
    q0 = _spd_blocks(rng, s, 0.05, 0.2)
    q1 = _normalized(_off_block(rng, s, False), noise_coupling * _min_eig(q0))
    p0 = _spd_blocks(rng, s, 0.5, 2.0)
    p1 = _normalized(_off_block(rng, s, False), noise_coupling * _min_eig(p0))
    j0 = _spd_blocks(rng, s, 0.5, 2.0)
    j1 = _normalized(_off_block(rng, s, False), noise_coupling * _min_eig(j0))
    meta = {"family": "random-stable", "seed": seed}
    return _assemble(s, eps, tuple(phi0), phi1, q0, q1, j0, j1, p0, p1, rng, meta)


def _min_sv(blocks) -> float:
    return min(np.linalg.svd(b, compute_uv=False).min() for b in blocks)


FAMILIES = {"diffusion-modes": generate_diffusion_model,
            "random-stable": generate_random_stable_model}


def generate_model(family: str, s: BlockStructure, eps: float, seed: int = 0, **kw) -> NbdModel:
    try:
        gen = FAMILIES[family]
    except KeyError:
        raise NbdError(f"unknown model family {family!r}; choose from {sorted(FAMILIES)}") from None
    return gen(s, eps, seed=seed, **kw)


def simulate_truth(model: NbdModel | StateSpaceModel, seed: int, n_steps: int = 20):
    """States ``x_0..x_n`` and measurements ``y_1..y_n``, reproducible by seed."""
    ss = model.to_state_space() if isinstance(model, NbdModel) else model
    return simulate(ss, n_steps, np.random.default_rng(seed))
