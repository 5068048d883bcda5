"""Dense voxel grid containers and resolution mapping.

Storage is row-major with ``k`` (the z axis) varying fastest, so a grid's
``labels.ravel()`` is exactly the on-disk voxel order used by :mod:`hassc.dataio`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BoundsError, ShapeError

EMPTY_ID = 0
INVALID_ID = 255
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class GridDims:
    x: int
    y: int
    z: int
    voxel_size: float = 0.2

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"grid axis {name} must be a positive integer, got {v!r}")
        if not self.voxel_size > 0:
            raise ShapeError(f"voxel_size must be positive, got {self.voxel_size!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.x, self.y, self.z)

    def volume(self) -> int:
        return self.x * self.y * self.z

    def scale_factors(self, other: "GridDims") -> tuple[int, int, int]:
        """Per-axis integer ratio ``self / other``; raises if not integral."""
        out = []
        for a, b in zip(self.shape, other.shape):
            if a % b:
                raise ShapeError(f"{self.shape} is not an integer multiple of {other.shape}")
            out.append(a // b)
        return tuple(out)

    def coarsened(self, factor: int = 2) -> "GridDims":
        if any(s % factor for s in self.shape):
            raise ShapeError(f"{self.shape} not divisible by {factor}")
        return GridDims(self.x // factor, self.y // factor, self.z // factor,
                        self.voxel_size * factor)


class VoxelCoord(NamedTuple):
    i: int
    j: int
    k: int


def _check_in_bounds(c, d: GridDims):
    if not all(0 <= int(a) < n for a, n in zip(c, d.shape)):
        raise BoundsError(f"coordinate {tuple(c)} outside grid {d.shape}")


def linear_index(c, d: GridDims) -> int:
    _check_in_bounds(c, d)
    i, j, k = (int(a) for a in c)
    return (i * d.y + j) * d.z + k


def coord_of(index: int, d: GridDims) -> VoxelCoord:
    if not 0 <= index < d.volume():
        raise BoundsError(f"linear index {index} outside grid {d.shape}")
    i, rem = divmod(int(index), d.y * d.z)
    j, k = divmod(rem, d.z)
    return VoxelCoord(i, j, k)


@dataclass(frozen=True, eq=False)
class SemanticGrid:
    dims: GridDims
    labels: np.ndarray
    num_classes: int
    invalid_id: int = INVALID_ID
    empty_id: int = EMPTY_ID

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.dims.volume():
            raise ShapeError(f"label storage has {labels.size} entries, grid needs {self.dims.volume()}")
        labels = labels.reshape(self.dims.shape).astype(np.int64, copy=True)
        if 0 <= self.invalid_id < self.num_classes:
            raise ShapeError("invalid_id must lie outside [0, num_classes)")
        bad = (labels != self.invalid_id) & ((labels < 0) | (labels >= self.num_classes))
        if bad.any():
            raise ShapeError(f"labels outside [0, {self.num_classes}) at {int(bad.sum())} voxels")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def valid(self) -> np.ndarray:
        return self.labels != self.invalid_id

    def with_labels(self, labels, dims: GridDims | None = None) -> "SemanticGrid":
        return SemanticGrid(dims or self.dims, labels, self.num_classes,
                            self.invalid_id, self.empty_id)

    def __eq__(self, other):
        if not isinstance(other, SemanticGrid):
            return NotImplemented
        return (self.dims == other.dims and self.num_classes == other.num_classes
                and self.invalid_id == other.invalid_id
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    dims: GridDims
    probs: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 4 or probs.shape[:3] != self.dims.shape:
            raise ShapeError(f"probability array {probs.shape} does not match grid {self.dims.shape}")
        if self.check:
            if (probs < 0).any():
                raise ShapeError("negative probability")
            if np.abs(probs.sum(-1) - 1.0).max(initial=0.0) > SIMPLEX_TOL:
                raise ShapeError("per-voxel probabilities do not sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(-1)


def interp_matrix(n_src: int, factor: int) -> np.ndarray:
    """Linear interpolation weights from ``n_src`` cells to ``n_src * factor`` cells.

    Cell centers are aligned (the ``align_corners=False`` convention) and
    positions beyond the outermost source centers are clamped.
    """
    n_dst = n_src * factor
    pos = (np.arange(n_dst) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    m = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _apply_axes(arr: np.ndarray, mats) -> np.ndarray:
    out = arr
    for axis, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def upsample_array(arr: np.ndarray, factors) -> np.ndarray:
    """Trilinear upsampling of the three leading axes of ``arr``."""
    mats = [interp_matrix(n, f) for n, f in zip(arr.shape[:3], factors)]
    return _apply_axes(arr, mats)


def upsample_array_transpose(grad: np.ndarray, factors) -> np.ndarray:
    """Adjoint of :func:`upsample_array`; maps a full-grid gradient to the source grid."""
    src = [n // f for n, f in zip(grad.shape[:3], factors)]
    mats = [interp_matrix(n, f).T for n, f in zip(src, factors)]
    return _apply_axes(grad, mats)


def upsample_trilinear(p: ProbabilityVolume, target: GridDims) -> ProbabilityVolume:
    factors = target.scale_factors(p.dims)
    if factors == (1, 1, 1):
        return ProbabilityVolume(target, p.probs.copy(), check=False)
    out = upsample_array(p.probs, factors)
    out = np.clip(out, 0.0, None)
    out /= out.sum(-1, keepdims=True)
    return ProbabilityVolume(target, out, check=False)


def _blocks(labels: np.ndarray, factors) -> np.ndarray:
    """Reshape to ``(X', Y', Z', fx*fy*fz)`` blocks of children."""
    X, Y, Z = labels.shape
    fx, fy, fz = factors
    b = labels.reshape(X // fx, fx, Y // fy, fy, Z // fz, fz)
    return b.transpose(0, 2, 4, 1, 3, 5).reshape(X // fx, Y // fy, Z // fz, fx * fy * fz)


def downsample_labels(g: SemanticGrid, target: GridDims) -> SemanticGrid:
    """Majority pooling; invalid children are ignored unless the whole block is invalid."""
    factors = g.dims.scale_factors(target)
    blocks = _blocks(g.labels, factors)
    counts = np.zeros(target.shape + (g.num_classes,), dtype=np.int64)
    for c in range(g.num_classes):
        counts[..., c] = (blocks == c).sum(-1)
    # argmax returns the first maximum, i.e. the smallest class id on ties
    out = counts.argmax(-1)
    out[counts.sum(-1) == 0] = g.invalid_id
    return g.with_labels(out, dims=target)


def center_target(coarse, coarse_dims: GridDims, full_dims: GridDims) -> VoxelCoord:
    """Full-resolution voxel containing the geometric center of a coarse voxel."""
    _check_in_bounds(coarse, coarse_dims)
    f = full_dims.scale_factors(coarse_dims)
    return VoxelCoord(*(int(c) * s + s // 2 for c, s in zip(coarse, f)))


def center_targets(coords: np.ndarray, coarse_dims: GridDims, full_dims: GridDims) -> np.ndarray:
    """Vectorized :func:`center_target` over an ``(N, 3)`` coordinate array."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    f = np.array(full_dims.scale_factors(coarse_dims))
    if ((coords < 0) | (coords >= np.array(coarse_dims.shape))).any():
        raise BoundsError("coarse coordinate outside grid")
    return coords * f + f // 2


def sample_label_at_center(g: SemanticGrid, coarse, coarse_dims: GridDims) -> int:
    t = center_target(coarse, coarse_dims, g.dims)
    return int(g.labels[t])
