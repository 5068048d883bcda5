"""Voxel ground-truth codec and a procedural synthetic scene generator.

File set layout, one voxel per entry in row-major order with z fastest:

* ``<stem>.bin``     occupancy, 1 bit per voxel, packed 8 voxels per byte
* ``<stem>.label``   raw label id, little-endian uint16 per voxel
* ``<stem>.invalid`` unknown-space mask, packed like ``.bin``

Packed bits are MSB-first by default (``bit_order="msb"``): the first voxel
of each group of eight lives in bit 7.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .grid import EMPTY_ID, INVALID_ID, GridDims, SemanticGrid, _blocks
from .hardness import LgaConfig, lga
from .toymodel import FeatureVolume

_BITORDER = {"msb": "big", "lsb": "little"}


@dataclass(frozen=True)
class VoxelFileSet:
    occupancy: bytes
    labels: bytes
    invalid: bytes

    @staticmethod
    def expected_sizes(dims: GridDims) -> tuple[int, int, int]:
        v = dims.volume()
        return v // 8, 2 * v, v // 8


def parse_label_map(text: str) -> dict[int, int]:
    """``raw_id train_id`` pairs, one per line; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"label map line {lineno}: expected 'raw_id train_id', got {line!r}")
        try:
            raw, train = int(parts[0]), int(parts[1])
        except ValueError as e:
            raise FormatError(f"label map line {lineno}: {e}") from None
        if raw in out and out[raw] != train:
            raise FormatError(f"label map line {lineno}: raw id {raw} mapped twice")
        out[raw] = train
    return out


def load_label_map(path) -> dict[int, int]:
    return parse_label_map(Path(path).read_text())


def invert_label_map(label_map: dict[int, int]) -> dict[int, int]:
    """Train id -> smallest raw id mapping to it."""
    inv = {}
    for raw in sorted(label_map):
        inv.setdefault(label_map[raw], raw)
    return inv


def _unpack(buf: bytes, count: int, bit_order: str) -> np.ndarray:
    return np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=count,
                         bitorder=_BITORDER[bit_order]).astype(bool)


def _pack(bits: np.ndarray, bit_order: str) -> bytes:
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder=_BITORDER[bit_order]).tobytes()


def _check_bit_order(bit_order):
    if bit_order not in _BITORDER:
        raise ConfigError(f"bit_order must be 'msb' or 'lsb', got {bit_order!r}")


def _check_dims(dims: GridDims):
    if dims.volume() % 8:
        raise FormatError(f"grid volume {dims.volume()} is not a multiple of 8 voxels")


def decode(files: VoxelFileSet, dims: GridDims, label_map: dict[int, int], num_classes: int,
           bit_order: str = "msb", invalid_id: int = INVALID_ID, empty_id: int = EMPTY_ID) -> SemanticGrid:
    _check_bit_order(bit_order)
    _check_dims(dims)
    expected = VoxelFileSet.expected_sizes(dims)
    for name, buf, n in zip(("occupancy", "labels", "invalid"),
                            (files.occupancy, files.labels, files.invalid), expected):
        if len(buf) != n:
            raise FormatError(f"{name}: expected {n} bytes for grid {dims.shape}, got {len(buf)}")
    v = dims.volume()
    occ = _unpack(files.occupancy, v, bit_order)
    inv = _unpack(files.invalid, v, bit_order)
    raw = np.frombuffer(files.labels, dtype="<u2").astype(np.int64)

    out = np.full(v, empty_id, dtype=np.int64)
    live = occ & ~inv
    used = np.unique(raw[live])
    lut = {}
    for r in used.tolist():
        if r not in label_map:
            raise FormatError(f"raw label id {r} has no entry in the label map")
        t = label_map[r]
        if not 0 <= t < num_classes:
            raise FormatError(f"raw label id {r} maps to {t}, outside [0, {num_classes})")
        lut[r] = t
    if used.size:
        keys = np.array(list(lut), dtype=np.int64)
        vals = np.array([lut[k] for k in lut], dtype=np.int64)
        out[live] = vals[np.searchsorted(keys, raw[live])]
    out[inv] = invalid_id
    return SemanticGrid(dims, out, num_classes, invalid_id, empty_id)


def encode(g: SemanticGrid, inverse_map: dict[int, int], bit_order: str = "msb") -> VoxelFileSet:
    """Inverse of :func:`decode`. Empty and invalid voxels store raw label 0."""
    _check_bit_order(bit_order)
    _check_dims(g.dims)
    labels = g.labels.ravel()
    inv = labels == g.invalid_id
    occ = ~inv & (labels != g.empty_id)
    raw = np.zeros(labels.size, dtype="<u2")
    for c in np.unique(labels[occ]).tolist():
        if c not in inverse_map:
            raise FormatError(f"class {c} has no raw label id in the inverse map")
        r = inverse_map[c]
        if not 0 <= r < 1 << 16:
            raise FormatError(f"raw id {r} for class {c} does not fit in 16 bits")
        raw[labels == c] = r
    return VoxelFileSet(_pack(occ, bit_order), raw.tobytes(), _pack(inv, bit_order))


def read_file_set(stem) -> VoxelFileSet:
    stem = os.fspath(stem)
    parts = []
    for ext in (".bin", ".label", ".invalid"):
        try:
            parts.append(Path(stem + ext).read_bytes())
        except OSError as e:
            raise FormatError(f"{stem + ext}: {e.strerror}") from e
    return VoxelFileSet(*parts)


def write_file_set(stem, files: VoxelFileSet):
    stem = os.fspath(stem)
    Path(stem + ".bin").write_bytes(files.occupancy)
    Path(stem + ".label").write_bytes(files.labels)
    Path(stem + ".invalid").write_bytes(files.invalid)


# -- synthetic scenes -----------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """Axis-aligned block ``[lo, hi)`` in full-resolution voxels.

    ``kind`` is informational (``ground_plane``, ``box``, ``pole``,
    ``invalid``); an ``invalid`` primitive marks unknown space.
    """
    kind: str
    class_id: int
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]


def ground_plane(class_id: int, dims: GridDims, thickness: int = 1, x=None, y=None) -> Primitive:
    x = x or (0, dims.x)
    y = y or (0, dims.y)
    return Primitive("ground_plane", class_id, (x[0], y[0], 0), (x[1], y[1], thickness))


def box(class_id: int, lo, size) -> Primitive:
    return Primitive("box", class_id, tuple(lo), tuple(a + s for a, s in zip(lo, size)))


def pole(class_id: int, x: int, y: int, z0: int, height: int) -> Primitive:
    return Primitive("pole", class_id, (x, y, z0), (x + 1, y + 1, z0 + height))


@dataclass(frozen=True)
class SceneSpec:
    dims: GridDims
    primitives: tuple = ()
    num_classes: int = 5
    feature_dim: int = 8
    coarse_factor: int = 2
    seed: int = 0
    feature_noise: float = 0.6
    boundary_noise: float = 0.6
    invalid_id: int = INVALID_ID
    empty_id: int = EMPTY_ID

    def __post_init__(self):
        for p in self.primitives:
            if p.kind != "invalid" and not 0 <= p.class_id < self.num_classes:
                raise ConfigError(f"primitive class {p.class_id} outside [0, {self.num_classes})")
            if any(a < 0 or b > n or a >= b for a, b, n in zip(p.lo, p.hi, self.dims.shape)):
                raise ConfigError(f"primitive {p} does not lie within grid {self.dims.shape}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        self.dims.coarsened(self.coarse_factor)


def rasterize(spec: SceneSpec) -> SemanticGrid:
    labels = np.full(spec.dims.shape, spec.empty_id, dtype=np.int64)
    for p in spec.primitives:
        sl = tuple(slice(a, b) for a, b in zip(p.lo, p.hi))
        labels[sl] = spec.invalid_id if p.kind == "invalid" else p.class_id
    return SemanticGrid(spec.dims, labels, spec.num_classes, spec.invalid_id, spec.empty_id)


def generate_scene(spec: SceneSpec) -> tuple[SemanticGrid, FeatureVolume]:
    """Rasterize ``spec`` and synthesize coarse-grid features for it."""
    gt = rasterize(spec)
    feats = synthesize_features(gt, spec.feature_dim, spec.coarse_factor, spec.seed,
                                spec.feature_noise, spec.boundary_noise)
    return gt, feats


def synthesize_features(gt: SemanticGrid, feature_dim: int, coarse_factor: int = 2, seed: int = 0,
                        feature_noise: float = 0.6, boundary_noise: float = 0.6) -> FeatureVolume:
    """Noisy coarse-grid features that carry the labels of each block.

    Each coarse voxel's feature is the class-composition-weighted mix of
    per-class Gaussian prototypes, plus a coordinate encoding and Gaussian
    noise. Blocks containing a label boundary get ``boundary_noise`` extra.
    """
    rng = np.random.default_rng(seed)
    c, d, f = gt.num_classes, feature_dim, coarse_factor
    coarse = gt.dims.coarsened(f)
    prototypes = rng.standard_normal((c, d))

    blocks = _blocks(gt.labels, (f, f, f))
    comp = np.stack([(blocks == k).sum(-1) for k in range(c)], axis=-1).astype(np.float64)
    n_valid = comp.sum(-1, keepdims=True)
    comp = np.divide(comp, n_valid, out=np.zeros_like(comp), where=n_valid > 0)
    feats = comp @ prototypes

    grids = np.meshgrid(*(np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in coarse.shape),
                        indexing="ij")
    for axis in range(min(3, d)):
        feats[..., d - 1 - axis] += 0.5 * grids[axis]

    boundary = _blocks(lga(gt, LgaConfig()).values > 0, (f, f, f)).any(-1)
    sigma = feature_noise + boundary_noise * boundary
    feats += sigma[..., None] * rng.standard_normal(feats.shape)
    return FeatureVolume(coarse, feats)


def plane_boxes_scene(dims: GridDims, seed: int = 0, num_boxes: int = 6, num_poles: int = 4,
                      coarse_factor: int = 2, **kw) -> SceneSpec:
    """Road plane with a sidewalk strip, car-sized boxes and poles.

    Class ids: 0 empty, 1 road, 2 sidewalk, 3 car, 4 pole (poles are dropped
    when ``num_classes`` < 5). The ground is ``coarse_factor`` voxels thick so
    that it survives majority pooling to the coarse grid; boxes and poles are
    placed at arbitrary offsets, so their faces cut through coarse blocks.
    """
    rng = np.random.default_rng(seed)
    X, Y, Z = dims.shape
    g = min(coarse_factor, Z - 1)
    strip = max(1, Y // 4)
    prims = [ground_plane(1, dims, thickness=g), ground_plane(2, dims, thickness=g, y=(Y - strip, Y))]
    for _ in range(num_boxes):
        sx = int(rng.integers(3, max(4, X // 6)))
        sy = int(rng.integers(2, max(3, Y // 8)))
        sz = int(rng.integers(2, max(3, Z // 2)))
        sx, sy, sz = min(sx, X), min(sy, Y - strip), min(sz, Z - g)
        x0 = int(rng.integers(0, X - sx + 1))
        y0 = int(rng.integers(0, Y - strip - sy + 1))
        prims.append(box(3, (x0, y0, g), (sx, sy, sz)))
    if kw.get("num_classes", 5) >= 5:
        for _ in range(num_poles):
            x0 = int(rng.integers(0, X - 1))
            y0 = int(rng.integers(Y - strip, Y - 1))
            prims.append(Primitive("pole", 4, (x0, y0, g), (x0 + 2, y0 + 2, Z)))
    return SceneSpec(dims, tuple(prims), seed=seed, coarse_factor=coarse_factor, **kw)
