"""Experiment configuration: an INI file with one section per sub-config.

Every hyper-parameter defaults to the value used for the full-scale model;
the desk-scale grid and optimiser settings are this package's own choices.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError
from .grid import GridDims
from .hardness import LgaConfig
from .selection import SelectionConfig

TOGGLES = ("global_hardness", "local_hardness", "t_hvm", "distill")


@dataclass(frozen=True)
class SceneConfig:
    source: str = "synthetic"          # "synthetic" or "files"
    stem: str = ""
    label_map: str = ""
    bit_order: str = "msb"
    dims: tuple[int, int, int] = (64, 64, 8)
    voxel_size: float = 0.8
    num_classes: int = 5
    feature_dim: int = 16
    coarse_factor: int = 2
    num_boxes: int = 8
    num_poles: int = 6
    feature_noise: float = 0.6
    boundary_noise: float = 0.6

    @property
    def grid_dims(self) -> GridDims:
        return GridDims(*self.dims, voxel_size=self.voxel_size)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    lga: LgaConfig = LgaConfig()
    selection: SelectionConfig = SelectionConfig()
    distill: DistillConfig = DistillConfig()
    auto_scale_n: bool = True
    class_weights: tuple | None = None
    lr: float = 0.05
    steps: int = 500
    seed: int = 0
    out: str = "runs/default"
    global_hardness: bool = True
    local_hardness: bool = True
    t_hvm: bool = True
    distill_on: bool = True
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.class_weights is not None:
            if len(self.class_weights) != self.scene.num_classes:
                raise ConfigError("class_weights needs one entry per class")
            if min(self.class_weights) <= 0:
                raise ConfigError("class weights must be positive")

    @property
    def hvm_on(self) -> bool:
        return self.global_hardness or self.local_hardness

    def effective_n(self, coarse_volume: int) -> int:
        n = self.selection.n
        if self.auto_scale_n:
            n = min(n, coarse_volume // 64)
        return n

    def with_toggles(self, **kw) -> "ExperimentConfig":
        kw = {("distill_on" if k == "distill" else k): v for k, v in kw.items()}
        return replace(self, **kw)

    def override(self, key: str, value) -> "ExperimentConfig":
        """Apply one sweep key such as ``n``, ``lambda``, ``t``, ``omega``, ``alpha``."""
        key = key.lower()
        if key in ("n", "t", "omega"):
            cast = int if key == "n" else float
            return replace(self, selection=replace(self.selection, **{key: cast(value)}))
        if key in ("lambda", "lam"):
            return replace(self, distill=replace(self.distill, lam=float(value)))
        if key == "delta":
            return replace(self, distill=replace(self.distill, delta=float(value)))
        if key in ("alpha", "beta"):
            return replace(self, lga=replace(self.lga, **{key: float(value)}))
        if key in ("lr", "steps", "seed"):
            return replace(self, **{key: (float if key == "lr" else int)(value)})
        if key in TOGGLES:
            return self.with_toggles(**{key: _bool(value)})
        raise ConfigError(f"unknown sweep key {key!r}")


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _sweep_values(s: str) -> list:
    out = []
    for tok in s.replace(",", " ").split():
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                out.append(tok)
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    known = {"experiment", "scene", "lga", "selection", "distill", "toggles", "loss", "sweep"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return _build(cp)
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def _build(cp) -> ExperimentConfig:
    base = ExperimentConfig()
    kw = {}
    if cp.has_section("experiment"):
        s = cp["experiment"]
        for k in s:
            if k not in ("seed", "steps", "lr", "out", "auto_scale_n"):
                raise ConfigError(f"unknown key experiment.{k}")
        kw.update(seed=s.getint("seed", base.seed), steps=s.getint("steps", base.steps),
                  lr=s.getfloat("lr", base.lr), out=s.get("out", base.out),
                  auto_scale_n=_bool(s.get("auto_scale_n", base.auto_scale_n)))

    scene = base.scene
    if cp.has_section("scene"):
        s, upd = cp["scene"], {}
        names = {f.name: f for f in fields(SceneConfig)}
        for k, v in s.items():
            if k not in names:
                raise ConfigError(f"unknown key scene.{k}")
            default = getattr(scene, k)
            if k == "dims":
                upd[k] = _ints(v)
                if len(upd[k]) != 3:
                    raise ConfigError("scene.dims needs three integers")
            elif isinstance(default, bool):
                upd[k] = _bool(v)
            elif isinstance(default, int):
                upd[k] = int(v)
            elif isinstance(default, float):
                upd[k] = float(v)
            else:
                upd[k] = v
        scene = replace(scene, **upd)
    kw["scene"] = scene

    if cp.has_section("lga"):
        s = cp["lga"]
        kw["lga"] = LgaConfig(alpha=s.getfloat("alpha", 0.2), beta=s.getfloat("beta", 1.0),
                              oob_policy=s.get("oob_policy", "skip"))
    if cp.has_section("selection"):
        s = cp["selection"]
        kw["selection"] = SelectionConfig(n=s.getint("n", 4096), t=s.getfloat("t", 3.0),
                                          omega=s.getfloat("omega", 0.75))
    if cp.has_section("distill"):
        s = cp["distill"]
        kw["distill"] = DistillConfig(lam=s.getfloat("lambda", 48.0), delta=s.getfloat("delta", 0.1),
                                      gamma_cap=s.getfloat("gamma_cap", 0.99))
    if cp.has_section("toggles"):
        s = cp["toggles"]
        for k, v in s.items():
            if k not in TOGGLES:
                raise ConfigError(f"unknown toggle {k!r}; expected one of {TOGGLES}")
            kw["distill_on" if k == "distill" else k] = _bool(v)
    if cp.has_section("loss"):
        s = cp["loss"]
        if "class_weights" in s:
            kw["class_weights"] = _floats(s["class_weights"])
    if cp.has_section("sweep"):
        kw["sweep"] = {k: _sweep_values(v) for k, v in cp["sweep"].items()}
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` back to the INI format accepted by :func:`parse_config`."""
    sc = asdict(cfg.scene)
    lines = ["[experiment]", f"seed = {cfg.seed}", f"steps = {cfg.steps}", f"lr = {cfg.lr!r}",
             f"out = {cfg.out}", f"auto_scale_n = {cfg.auto_scale_n}", "", "[scene]"]
    for k, v in sc.items():
        lines.append(f"{k} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    lines += ["", "[lga]", f"alpha = {cfg.lga.alpha!r}", f"beta = {cfg.lga.beta!r}",
              f"oob_policy = {cfg.lga.oob_policy}", "", "[selection]",
              f"n = {cfg.selection.n}", f"t = {cfg.selection.t!r}", f"omega = {cfg.selection.omega!r}",
              "", "[distill]", f"lambda = {cfg.distill.lam!r}", f"delta = {cfg.distill.delta!r}",
              f"gamma_cap = {cfg.distill.gamma_cap!r}", "", "[toggles]",
              f"global_hardness = {cfg.global_hardness}", f"local_hardness = {cfg.local_hardness}",
              f"t_hvm = {cfg.t_hvm}", f"distill = {cfg.distill_on}"]
    if cfg.class_weights is not None:
        lines += ["", "[loss]", "class_weights = " + " ".join(repr(w) for w in cfg.class_weights)]
    if cfg.sweep:
        lines += ["", "[sweep]"] + [f"{k} = {', '.join(map(str, v))}" for k, v in cfg.sweep.items()]
    return "\n".join(lines) + "\n"
