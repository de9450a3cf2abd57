"""Block partitions and nearly-block-diagonal matrices.

An :class:`NbdMatrix` stores ``P0 + eps*P1 [+ eps**2*P2]`` where ``P0`` is
block diagonal over a fixed :class:`BlockStructure`.  ``eps`` is kept
explicitly and ``P1``/``P2`` are stored unscaled.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class NbdError(ValueError):
    """Base class for invalid nearly-block-diagonal inputs."""


class StructureMismatchError(NbdError):
    pass


class AsymmetricError(NbdError):
    pass


class NotPositiveDefiniteError(NbdError):
    """A diagonal block failed the per-block positive-definiteness test."""

    def __init__(self, block: int, step: int | None = None, detail: str = ""):
        self.block = block
        self.step = step
        where = f"block {block}" if step is None else f"block {block} at step {step}"
        msg = f"diagonal {where} is not positive definite"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BandProfile(str, enum.Enum):
    GENERAL = "general"
    NEAREST_NEIGHBOR = "nearest-neighbor"
    STRONGLY_NEAREST_NEIGHBOR = "strongly-nearest-neighbor"


@dataclass(frozen=True)
class BlockStructure:
    """Partition ``n_1 ... n_Nb`` of an ``N``-dimensional space."""

    sizes: tuple[int, ...]

    def __init__(self, sizes: Sequence[int]):
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) < 1:
            raise NbdError("a block structure needs at least one block")
        if any(n < 1 for n in sizes):
            raise NbdError(f"block sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def equal(cls, n_blocks: int, size: int) -> "BlockStructure":
        return cls([size] * n_blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate(([0], np.cumsum(self.sizes)[:-1])))

    @cached_property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + n) for o, n in zip(self.offsets, self.sizes))

    @property
    def N2(self) -> float:
        """``(Nb * sum n_k^2) ** (1/2)``."""
        return float(np.sqrt(self.n_blocks * sum(n * n for n in self.sizes)))

    @property
    def N3(self) -> float:
        """``(Nb^2 * sum n_k^3) ** (1/3)``."""
        return float(np.cbrt(self.n_blocks**2 * sum(n**3 for n in self.sizes)))

    @cached_property
    def block_index(self) -> np.ndarray:
        """Block number of every row/column."""
        return np.repeat(np.arange(self.n_blocks), self.sizes)

    @cached_property
    def diagonal_mask(self) -> np.ndarray:
        idx = self.block_index
        return idx[:, None] == idx[None, :]

    def check_square(self, a: np.ndarray, name: str = "matrix") -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape != (self.N, self.N):
            raise StructureMismatchError(
                f"{name} has shape {a.shape}, expected {(self.N, self.N)} for sizes {self.sizes}"
            )
        return a

    def blocks_of(self, a: np.ndarray) -> tuple[np.ndarray, ...]:
        """Diagonal blocks of a dense matrix (copies)."""
        a = self.check_square(a)
        return tuple(a[s, s].copy() for s in self.slices)

    def block(self, a: np.ndarray, k: int, l: int) -> np.ndarray:
        return a[self.slices[k], self.slices[l]]

    def block_diag(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros((self.N, self.N))
        for s, b in zip(self.slices, blocks):
            out[s, s] = b
        return out

    def diagonal_part(self, a: np.ndarray) -> np.ndarray:
        return np.where(self.diagonal_mask, a, 0.0)

    def off_diagonal_part(self, a: np.ndarray) -> np.ndarray:
        return np.where(self.diagonal_mask, 0.0, a)

    def nonzero_blocks(self, a: np.ndarray) -> np.ndarray:
        """Boolean ``Nb x Nb`` pattern of blocks holding any nonzero entry."""
        nb = self.n_blocks
        out = np.zeros((nb, nb), dtype=bool)
        for k, sk in enumerate(self.slices):
            for l, sl in enumerate(self.slices):
                out[k, l] = np.any(a[sk, sl] != 0.0)
        return out

    def band_profile(self, p1: np.ndarray, p2: np.ndarray | None = None) -> BandProfile:
        pattern = self.nonzero_blocks(p1)
        k, l = np.nonzero(pattern)
        if np.any(np.abs(k - l) > 1):
            return BandProfile.GENERAL
        if p2 is not None:
            k2, l2 = np.nonzero(self.nonzero_blocks(p2))
            if np.all(np.abs(k2 - l2) <= 2):
                return BandProfile.STRONGLY_NEAREST_NEIGHBOR
        return BandProfile.NEAREST_NEIGHBOR


def lower_block_part(P: np.ndarray, s: BlockStructure) -> np.ndarray:
    """Strict block-lower part of ``P`` plus half of its block diagonal.

    For symmetric ``P`` the result ``P_L`` satisfies ``P_L + P_L.T == P``.
    """
    P = s.check_square(P)
    idx = s.block_index
    strict = idx[:, None] > idx[None, :]
    return np.where(strict, P, 0.0) + 0.5 * np.where(s.diagonal_mask, P, 0.0)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NbdMatrix:
    """``P0 + eps*P1 [+ eps**2*P2] [+ tail]`` over a block structure.

    ``tail`` is an optional dense remainder of order three and higher,
    already scaled; it only appears when a stabilized value is re-expanded
    order by order (see :func:`nbdkalman.blockmat.stabilize.redecompose`).
    ``mults`` is the scalar-multiplication count of the operation that
    produced the matrix.
    """

    structure: BlockStructure
    eps: float
    p0: tuple[np.ndarray, ...]
    p1: np.ndarray
    p2: np.ndarray | None = None
    symmetric: bool = False
    tail: np.ndarray | None = None
    mults: float = field(default=0, compare=False)

    def __post_init__(self):
        s = self.structure
        if self.eps < 0 or not np.isfinite(self.eps):
            raise NbdError(f"eps must be finite and >= 0, got {self.eps}")
        if len(self.p0) != s.n_blocks:
            raise StructureMismatchError(
                f"expected {s.n_blocks} diagonal blocks, got {len(self.p0)}"
            )
        p0 = []
        for k, (b, n) in enumerate(zip(self.p0, s.sizes)):
            b = np.asarray(b, dtype=float)
            if b.ndim < 2 and b.size == n * n:
                b = b.reshape(n, n)
            if b.shape != (n, n):
                raise StructureMismatchError(f"block {k} has shape {b.shape}, expected {(n, n)}")
            p0.append(b)
        p1 = s.check_square(self.p1, "p1")
        p2 = None if self.p2 is None else s.check_square(self.p2, "p2")
        tail = None if self.tail is None else s.check_square(self.tail, "tail")
        if self.symmetric:
            p0 = [_sym(b) for b in p0]
            p1 = _sym(p1)
            p2 = None if p2 is None else _sym(p2)
            tail = None if tail is None else _sym(tail)
        object.__setattr__(self, "eps", float(self.eps))
        object.__setattr__(self, "p0", tuple(_frozen(b) for b in p0))
        object.__setattr__(self, "p1", _frozen(p1))
        object.__setattr__(self, "p2", None if p2 is None else _frozen(p2))
        object.__setattr__(self, "tail", None if tail is None else _frozen(tail))

    @classmethod
    def from_dense(cls, P0: np.ndarray, P1: np.ndarray, structure: BlockStructure,
                   eps: float, P2: np.ndarray | None = None, symmetric: bool = False,
                   ) -> "NbdMatrix":
        """Build from a dense ``P0`` (only its diagonal blocks are kept)."""
        return cls(structure, eps, structure.blocks_of(P0), P1, P2, symmetric)

    @classmethod
    def split(cls, P: np.ndarray, structure: BlockStructure, eps: float,
              symmetric: bool = False) -> "NbdMatrix":
        """Split a dense matrix into its block diagonal and ``eps``-scaled remainder."""
        P = structure.check_square(P)
        off = structure.off_diagonal_part(P)
        if eps == 0:
            if np.any(off != 0):
                raise NbdError("eps=0 cannot represent a matrix with off-block entries")
            p1 = np.zeros_like(P)
        else:
            p1 = off / eps
        return cls(structure, eps, structure.blocks_of(P), p1, None, symmetric)

    @classmethod
    def identity(cls, structure: BlockStructure, eps: float = 0.0) -> "NbdMatrix":
        return cls(structure, eps, tuple(np.eye(n) for n in structure.sizes),
                   np.zeros((structure.N, structure.N)), None, True)

    @classmethod
    def zeros(cls, structure: BlockStructure, eps: float = 0.0) -> "NbdMatrix":
        return cls(structure, eps, tuple(np.zeros((n, n)) for n in structure.sizes),
                   np.zeros((structure.N, structure.N)), None, True)

    @property
    def N(self) -> int:
        return self.structure.N

    @property
    def order(self) -> int:
        return 2 if self.p2 is not None else 1

    def p0_dense(self) -> np.ndarray:
        return self.structure.block_diag(self.p0)

    def dense(self) -> np.ndarray:
        out = self.p0_dense() + self.eps * self.p1
        if self.p2 is not None:
            out = out + self.eps**2 * self.p2
        if self.tail is not None:
            out = out + self.tail
        return out

    def truncated(self, order: int = 1) -> "NbdMatrix":
        """Drop terms above the given order in ``eps``."""
        p2 = self.p2 if order >= 2 else None
        return NbdMatrix(self.structure, self.eps, self.p0, self.p1, p2, self.symmetric)

    def with_p2(self, p2: np.ndarray | None) -> "NbdMatrix":
        return NbdMatrix(self.structure, self.eps, self.p0, self.p1, p2, self.symmetric)

    @property
    def T(self) -> "NbdMatrix":
        p2 = None if self.p2 is None else self.p2.T
        tail = None if self.tail is None else self.tail.T
        return NbdMatrix(self.structure, self.eps, tuple(b.T for b in self.p0),
                         self.p1.T, p2, self.symmetric, tail)

    def check_compatible(self, other: "NbdMatrix") -> None:
        if self.structure != other.structure:
            raise StructureMismatchError(
                f"block structures differ: {self.structure.sizes} vs {other.structure.sizes}"
            )
        if self.eps != other.eps:
            raise StructureMismatchError(f"eps differs: {self.eps} vs {other.eps}")

    def _combine(self, other: "NbdMatrix", sign: float) -> "NbdMatrix":
        self.check_compatible(other)
        p0 = tuple(a + sign * b for a, b in zip(self.p0, other.p0))
        p1 = self.p1 + sign * other.p1
        if self.p2 is None and other.p2 is None:
            p2 = None
        else:
            z = np.zeros((self.N, self.N))
            p2 = (self.p2 if self.p2 is not None else z) + sign * (
                other.p2 if other.p2 is not None else z)
        return NbdMatrix(self.structure, self.eps, p0, p1, p2,
                         self.symmetric and other.symmetric)

    def __add__(self, other: "NbdMatrix") -> "NbdMatrix":
        return self._combine(other, 1.0)

    def __sub__(self, other: "NbdMatrix") -> "NbdMatrix":
        return self._combine(other, -1.0)

    def __neg__(self) -> "NbdMatrix":
        p2 = None if self.p2 is None else -self.p2
        return NbdMatrix(self.structure, self.eps, tuple(-b for b in self.p0),
                         -self.p1, p2, self.symmetric)

    def scaled(self, c: float) -> "NbdMatrix":
        p2 = None if self.p2 is None else c * self.p2
        return NbdMatrix(self.structure, self.eps, tuple(c * b for b in self.p0),
                         c * self.p1, p2, self.symmetric)

    def band_profile(self) -> BandProfile:
        return self.structure.band_profile(self.p1, self.p2)

    def to_json(self) -> dict:
        out = {
            "sizes": list(self.structure.sizes),
            "eps": self.eps,
            "p0": [b.tolist() for b in self.p0],
            "p1": self.p1.tolist(),
            "symmetric": bool(self.symmetric),
        }
        if self.p2 is not None:
            out["p2"] = self.p2.tolist()
        return out

    @classmethod
    def from_json(cls, data: dict) -> "NbdMatrix":
        s = BlockStructure(data["sizes"])
        p2 = data.get("p2")
        return cls(s, float(data["eps"]), tuple(np.asarray(b, dtype=float) for b in data["p0"]),
                   np.asarray(data["p1"], dtype=float),
                   None if p2 is None else np.asarray(p2, dtype=float),
                   bool(data.get("symmetric", False)))


def check_symmetric(P: NbdMatrix, name: str = "matrix") -> None:
    if not P.symmetric:
        raise AsymmetricError(f"{name} must be flagged symmetric")
