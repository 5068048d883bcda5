"""Per-voxel hardness: prediction-based global hardness and label-based local hardness."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, KindError
from .grid import GridDims, ProbabilityVolume, SemanticGrid

H_MAX = 1e12

AXIS_DIRECTIONS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class LgaConfig:
    directions: tuple = AXIS_DIRECTIONS
    alpha: float = 0.2
    beta: float = 1.0
    oob_policy: str = "skip"

    def __post_init__(self):
        if self.oob_policy not in ("skip", "mismatch"):
            raise ConfigError(f"oob_policy must be 'skip' or 'mismatch', got {self.oob_policy!r}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        object.__setattr__(self, "directions", tuple(tuple(int(v) for v in d) for d in self.directions))

    @property
    def m(self) -> int:
        return len(self.directions)


@dataclass(frozen=True, eq=False)
class HardnessField:
    dims: GridDims
    values: np.ndarray
    kind: str
    excluded: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("global", "lga", "local"):
            raise KindError(f"unknown hardness kind {self.kind!r}")
        values = np.asarray(self.values).reshape(self.dims.shape)
        object.__setattr__(self, "values", values)


def global_hardness(p: ProbabilityVolume, mask=None) -> HardnessField:
    """Reciprocal gap between the two largest class probabilities, capped at ``H_MAX``.

    ``mask`` marks selectable voxels; everything else is flagged excluded.
    """
    if p.num_classes < 2:
        raise ConfigError("global hardness needs at least two classes")
    top2 = np.partition(p.probs, p.num_classes - 2, axis=-1)[..., -2:]
    gap = top2[..., 1] - top2[..., 0]
    with np.errstate(divide="ignore"):
        h = np.where(gap < 1.0 / H_MAX, H_MAX, 1.0 / np.maximum(gap, 1.0 / H_MAX))
    excluded = None if mask is None else ~np.asarray(mask, dtype=bool).reshape(p.dims.shape)
    return HardnessField(p.dims, h, "global", excluded)


def _shifted(labels: np.ndarray, d, fill: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour labels at offset ``d`` and an in-bounds mask."""
    out = np.full_like(labels, fill)
    inside = np.zeros(labels.shape, dtype=bool)
    src, dst = [], []
    for off, n in zip(d, labels.shape):
        if abs(off) >= n:
            return out, inside
        src.append(slice(max(off, 0), n + min(off, 0)))
        dst.append(slice(max(-off, 0), n + min(-off, 0)))
    out[tuple(dst)] = labels[tuple(src)]
    inside[tuple(dst)] = True
    return out, inside


def lga(g: SemanticGrid, cfg: LgaConfig = LgaConfig()) -> HardnessField:
    """Count of neighbours whose label differs, over ``cfg.directions``.

    Invalid voxels get 0 and are flagged excluded; invalid neighbours never
    count. Out-of-bounds neighbours count as a mismatch only under
    ``oob_policy="mismatch"``.
    """
    labels = g.labels
    valid = g.valid
    a = np.zeros(labels.shape, dtype=np.int64)
    oob_hit = cfg.oob_policy == "mismatch"
    for d in cfg.directions:
        nb, inside = _shifted(labels, d, g.invalid_id)
        diff = inside & (nb != g.invalid_id) & (nb != labels)
        if oob_hit:
            diff |= ~inside
        a += diff
    a[~valid] = 0
    return HardnessField(g.dims, a, "lga", ~valid)


def local_hardness(a: HardnessField, cfg: LgaConfig = LgaConfig()) -> HardnessField:
    if a.kind != "lga":
        raise KindError(f"local hardness needs an lga field, got {a.kind!r}")
    return HardnessField(a.dims, cfg.alpha + cfg.beta * a.values, "local", a.excluded)


@dataclass
class LgaHistogram:
    empty_counts: np.ndarray
    nonempty_counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.empty_counts.sum() + self.nonempty_counts.sum())

    def fractions(self) -> np.ndarray:
        """Per-bin share of all counted voxels, columns (empty, non-empty)."""
        t = max(self.total, 1)
        return np.stack([self.empty_counts, self.nonempty_counts], axis=1) / t

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lga_value", "empty_count", "nonempty_count"])
        for v, (e, n) in enumerate(zip(self.empty_counts, self.nonempty_counts)):
            w.writerow([v, int(e), int(n)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LgaHistogram":
        rows = list(csv.DictReader(io.StringIO(text)))
        rows.sort(key=lambda r: int(r["lga_value"]))
        return cls(np.array([int(r["empty_count"]) for r in rows]),
                   np.array([int(r["nonempty_count"]) for r in rows]))


def lga_histogram(g: SemanticGrid, cfg: LgaConfig = LgaConfig()) -> LgaHistogram:
    a = lga(g, cfg).values
    valid = g.valid
    empty = valid & (g.labels == g.empty_id)
    nonempty = valid & ~empty
    n_bins = cfg.m + 1
    return LgaHistogram(np.bincount(a[empty], minlength=n_bins),
                        np.bincount(a[nonempty], minlength=n_bins))
