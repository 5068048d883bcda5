"""Three-stage hard voxel selection.

Stage 1 over-generates ``ceil(t*N)`` uniform proposals, stage 2 keeps the
``floor(omega*N)`` proposals with the largest global hardness, stage 3 tops up
with uniform draws from every selectable voxel not already kept. All draws are
without replacement, so the result never repeats a voxel.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, KindError, ShapeError
from .grid import GridDims, SemanticGrid, center_targets
from .hardness import HardnessField, LgaConfig, lga

_EPS = 1e-9


@dataclass(frozen=True)
class SelectionConfig:
    n: int = 4096
    t: float = 3.0
    omega: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 0:
            raise ConfigError(f"n must be a non-negative integer, got {self.n!r}")
        if self.t < 1:
            raise ConfigError(f"over-generation factor t must be >= 1, got {self.t!r}")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega!r}")

    @property
    def hard_count(self) -> int:
        return int(math.floor(self.omega * self.n + _EPS))

    @property
    def random_count(self) -> int:
        return self.n - self.hard_count

    @property
    def proposal_count(self) -> int:
        return int(math.ceil(self.t * self.n - _EPS))


@dataclass(frozen=True, eq=False)
class SelectionSet:
    coords: np.ndarray              # (N, 3) coarse-grid coordinates
    hard_count: int
    global_hardness: np.ndarray     # (N,) hardness at each selected voxel
    weights: np.ndarray | None = None
    lga: np.ndarray | None = None
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None  # (N, 3) full-resolution voxels

    def __len__(self):
        return len(self.coords)

    @property
    def blocks(self) -> list[str]:
        return ["hard"] * self.hard_count + ["random"] * (len(self) - self.hard_count)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "j", "k", "global_hardness", "lga", "weight", "block"])
        n = len(self)
        lg = self.lga if self.lga is not None else [""] * n
        wt = self.weights if self.weights is not None else [""] * n
        for c, h, a, wv, b in zip(self.coords, self.global_hardness, lg, wt, self.blocks):
            w.writerow([int(c[0]), int(c[1]), int(c[2]), repr(float(h)),
                        "" if a == "" else int(a), "" if wv == "" else repr(float(wv)), b])
        return buf.getvalue()


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def select_hard_voxels(h: HardnessField, cfg: SelectionConfig, rng=None) -> SelectionSet:
    """Select ``cfg.n`` voxels of ``h`` (a global hardness field).

    ``rng`` defaults to a generator seeded from ``cfg.seed``. The output lists
    the hardness-ranked block first, then the random block.
    """
    if h.kind != "global":
        raise KindError(f"selection ranks global hardness, got {h.kind!r}")
    rng = _as_rng(cfg.seed if rng is None else rng)
    flat_h = h.values.ravel()
    if h.excluded is None:
        population = np.arange(flat_h.size)
    else:
        population = np.flatnonzero(~h.excluded.ravel())
    n_prop, n_hard, n_rand = cfg.proposal_count, cfg.hard_count, cfg.random_count
    if population.size < cfg.n:
        raise ConfigError(f"only {population.size} selectable voxels for N={cfg.n}")
    if population.size < n_prop:
        raise ConfigError(f"only {population.size} selectable voxels for tN={n_prop} proposals")

    proposals = rng.choice(population, size=n_prop, replace=False)
    # largest hardness first, smaller linear index on ties
    order = np.lexsort((proposals, -flat_h[proposals]))
    hard = proposals[order[:n_hard]]

    rest = np.setdiff1d(population, hard, assume_unique=True)
    extra = rng.choice(rest, size=n_rand, replace=False)
    chosen = np.concatenate([hard, extra]).astype(np.int64)
    coords = np.stack(np.unravel_index(chosen, h.dims.shape), axis=1).astype(np.int64)
    return SelectionSet(coords=coords.reshape(-1, 3), hard_count=n_hard,
                        global_hardness=flat_h[chosen].astype(np.float64))


def attach_local_weights(s: SelectionSet, gt: SemanticGrid, cfg: LgaConfig,
                         coarse_dims: GridDims, lga_values: np.ndarray | None = None) -> SelectionSet:
    """Weight each selected voxel by the local hardness of its full-resolution target.

    ``lga_values`` may carry a precomputed LGA array for ``gt`` (it depends
    only on the labels, so training loops compute it once).
    """
    try:
        gt.dims.scale_factors(coarse_dims)
    except ShapeError as e:
        raise ShapeError(f"ground truth {gt.dims.shape} does not refine coarse grid {coarse_dims.shape}") from e
    if lga_values is None:
        lga_values = lga(gt, cfg).values
    elif lga_values.shape != gt.dims.shape:
        raise ShapeError("precomputed LGA does not match ground truth grid")
    targets = center_targets(s.coords, coarse_dims, gt.dims)
    idx = tuple(targets.T)
    a = np.asarray(lga_values)[idx].astype(np.int64)
    return replace(s, weights=cfg.alpha + cfg.beta * a.astype(np.float64), lga=a,
                   labels=gt.labels[idx].astype(np.int64), targets=targets)
