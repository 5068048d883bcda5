"""Desk-scale training loop: student network, EMA teacher and every loss term."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio
from .config import ExperimentConfig
from .distill import TeacherState, distill_loss, ema_update, miou_scale, teacher_guided_hvm
from .errors import NonFiniteLossError
from .grid import (GridDims, ProbabilityVolume, SemanticGrid, center_targets, downsample_labels,
                   upsample_array_transpose, upsample_trilinear)
from .hardness import LgaHistogram, global_hardness, lga, lga_histogram
from .losses import (LossReport, compose_total, hvm_loss, softmax, softmax_backward,
                     weighted_ce, zero_affinity)
from .metrics import evaluate
from .selection import SelectionSet, attach_local_weights, select_hard_voxels
from .toymodel import FeatureVolume, ToyNet, forward_coarse, param_count

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("step", "total", "wce", "s_hvm", "t_hvm", "distill",
                  "sum_local_hardness_student", "sum_local_hardness_teacher",
                  "nonempty_selected", "nonempty_selected_teacher", "n_selected")
LOSS_TERMS = ("wce", "s_hvm", "t_hvm", "distill", "affinity")


def split_seeds(master: int) -> dict[str, int]:
    """Independent per-consumer seeds derived from one master seed."""
    children = np.random.SeedSequence(master).spawn(4)
    names = ("data", "select_student", "select_teacher", "init")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def load_scene(cfg: ExperimentConfig) -> tuple[SemanticGrid, FeatureVolume]:
    sc = cfg.scene
    seeds = split_seeds(cfg.seed)
    if sc.source == "synthetic":
        spec = dataio.plane_boxes_scene(
            sc.grid_dims, seed=seeds["data"], num_boxes=sc.num_boxes, num_poles=sc.num_poles,
            num_classes=sc.num_classes, feature_dim=sc.feature_dim, coarse_factor=sc.coarse_factor,
            feature_noise=sc.feature_noise, boundary_noise=sc.boundary_noise)
        return dataio.generate_scene(spec)
    if sc.source == "files":
        label_map = dataio.load_label_map(sc.label_map)
        gt = dataio.decode(dataio.read_file_set(sc.stem), sc.grid_dims, label_map,
                           sc.num_classes, sc.bit_order)
        feats = dataio.synthesize_features(gt, sc.feature_dim, sc.coarse_factor, seeds["data"],
                                           sc.feature_noise, sc.boundary_noise)
        return gt, feats
    from .errors import ConfigError
    raise ConfigError(f"unknown scene source {sc.source!r}")


def predict(net: ToyNet, feats: FeatureVolume, full: GridDims) -> ProbabilityVolume:
    """Inference path: coarse head then trilinear upsampling. No refinement, no teacher."""
    return upsample_trilinear(forward_coarse(net, feats), full)


def predict_labels(net: ToyNet, feats: FeatureVolume, gt: SemanticGrid) -> SemanticGrid:
    return gt.with_labels(predict(net, feats, gt.dims).argmax())


@dataclass
class StepResult:
    report: LossReport
    grad: np.ndarray
    selection_student: SelectionSet | None = None
    selection_teacher: SelectionSet | None = None
    mu: float = 0.0


class Trainer:
    """Owns the student, the teacher state and the per-consumer RNG streams."""

    def __init__(self, cfg: ExperimentConfig, gt: SemanticGrid, feats: FeatureVolume,
                 affinity=zero_affinity):
        self.cfg = cfg
        self.gt, self.feats = gt, feats
        self.full, self.coarse = gt.dims, feats.dims
        self.factors = self.full.scale_factors(self.coarse)
        seeds = split_seeds(cfg.seed)
        self.net = ToyNet(feats.d, gt.num_classes, seed=seeds["init"])
        self.teacher = TeacherState.from_student(self.net.params)
        self.rng_student = np.random.default_rng(seeds["select_student"])
        self.rng_teacher = np.random.default_rng(seeds["select_teacher"])
        self.affinity = affinity
        self.x = feats.flat()
        self.coarse_gt = downsample_labels(gt, self.coarse).labels.ravel()
        self.lga_values = lga(gt, cfg.lga).values
        all_coarse = np.stack(np.unravel_index(np.arange(self.coarse.volume()), self.coarse.shape), 1)
        tgt = center_targets(all_coarse, self.coarse, self.full)
        self.selectable = gt.valid[tuple(tgt.T)].reshape(self.coarse.shape)
        self.n = cfg.effective_n(self.coarse.volume()) if cfg.hvm_on else 0
        self.sel_cfg = replace(cfg.selection, n=self.n,
                               omega=cfg.selection.omega if cfg.global_hardness else 0.0)
        self.valid_full = gt.valid.ravel()
        self.step_index = 0

    def _select(self, probs_coarse: np.ndarray, rng) -> SelectionSet:
        pv = ProbabilityVolume(self.coarse, probs_coarse.reshape(self.coarse.shape + (-1,)), check=False)
        h = global_hardness(pv, mask=self.selectable)
        s = select_hard_voxels(h, self.sel_cfg, rng)
        return attach_local_weights(s, self.gt, self.cfg.lga, self.coarse, self.lga_values)

    def _weights(self, s: SelectionSet) -> np.ndarray:
        return s.weights if self.cfg.local_hardness else np.ones(len(s))

    def loss_and_grad(self, params=None, teacher_params=None, sel_student=None,
                      sel_teacher=None, terms=None) -> StepResult:
        """Total loss and its gradient w.r.t. student parameters.

        Selections are drawn from the trainer's RNG streams unless given, which
        lets a finite-difference check hold them fixed. ``terms`` restricts the
        gradient to a subset of ``LOSS_TERMS`` (as they enter the total, so
        ``t_hvm`` carries its delta); the report always holds every value.
        """
        cfg = self.cfg
        terms = set(LOSS_TERMS if terms is None else terms)
        net = self.net if params is None else self.net.copy(params)
        tparams = self.teacher.params if teacher_params is None else teacher_params
        z, _ = net.forward(self.x)
        p_c = softmax(z)
        wce = weighted_ce(z, self.coarse_gt, cfg.class_weights, ignore_index=self.gt.invalid_id)

        s_hvm_loss, grad_refine = 0.0, None
        if self.n > 0:
            if sel_student is None:
                sel_student = self._select(p_c, self.rng_student)
            idx = np.ravel_multi_index(tuple(sel_student.coords.T), self.coarse.shape)
            r = net.set_sample(idx)
            res = hvm_loss(r, sel_student.labels, self._weights(sel_student))
            s_hvm_loss, grad_refine = res.loss, res.grad

        full_shape = self.full.shape + (self.gt.num_classes,)
        p_final = upsample_trilinear(ProbabilityVolume(self.coarse, p_c.reshape(self.coarse.shape + (-1,)),
                                                       check=False), self.full)
        grad_final = np.zeros(full_shape)
        aff = self.affinity(p_final.probs.reshape(-1, self.gt.num_classes), self.gt.labels.ravel(),
                            self.valid_full)
        if "affinity" in terms:
            grad_final += aff.grad.reshape(full_shape)

        t_hvm_loss = dist_loss = mu = 0.0
        use_teacher_sel = cfg.t_hvm and self.n > 0
        if use_teacher_sel or cfg.distill_on:
            tnet = net.copy(tparams)
            pt_c = softmax(tnet.coarse_logits(self.x))
            if use_teacher_sel:
                if sel_teacher is None:
                    sel_teacher = self._select(pt_c, self.rng_teacher)
                res, sel_teacher = teacher_guided_hvm(None, p_final, self.gt, self.sel_cfg,
                                                      cfg.lga, selection=sel_teacher,
                                                      weighted=cfg.local_hardness)
                t_hvm_loss = res.loss
                if "t_hvm" in terms:
                    grad_final += cfg.distill.delta * res.grad
            if cfg.distill_on:
                pt_final = upsample_trilinear(
                    ProbabilityVolume(self.coarse, pt_c.reshape(self.coarse.shape + (-1,)), check=False),
                    self.full)
                mu = miou_scale(pt_final, self.gt)
                res = distill_loss(p_final, pt_final, mu, cfg.distill, valid=self.valid_full)
                dist_loss = res.loss
                if "distill" in terms:
                    grad_final += res.grad

        grad_c = upsample_array_transpose(grad_final, self.factors).reshape(-1, self.gt.num_classes)
        grad_z = softmax_backward(p_c, grad_c)
        if "wce" in terms:
            grad_z = grad_z + wce.grad
        grad = net.backward(grad_z, grad_refine if "s_hvm" in terms else None)
        report = compose_total(wce.loss, s_hvm_loss, t_hvm_loss, dist_loss, cfg.distill.delta,
                               affinity=aff.loss, step=self.step_index,
                               grad_norms={"total": float(np.linalg.norm(grad))})
        return StepResult(report, grad, sel_student, sel_teacher, mu)

    def step(self) -> dict:
        res = self.loss_and_grad()
        if not np.isfinite(res.report.total):
            raise NonFiniteLossError("total", self.step_index)
        if not np.isfinite(res.grad).all():
            raise NonFiniteLossError("gradient", self.step_index)
        self.net = self.net.copy(self.net.params - self.cfg.lr * res.grad)
        self.teacher = ema_update(self.teacher, self.net.params, self.cfg.distill.gamma_cap)
        row = _row(self.step_index, res, self.gt.empty_id)
        self.step_index += 1
        return row

    def evaluate(self, params=None) -> dict:
        net = self.net if params is None else self.net.copy(params)
        return evaluate(predict_labels(net, self.feats, self.gt), self.gt)


def _sel_stats(s: SelectionSet | None, empty_id: int):
    if s is None or len(s) == 0:
        return 0.0, 0
    return float(s.weights.sum()), int((s.labels != empty_id).sum())


def _row(step: int, res: StepResult, empty_id: int) -> dict:
    r = res.report
    hs, ns = _sel_stats(res.selection_student, empty_id)
    ht, nt = _sel_stats(res.selection_teacher, empty_id)
    n = 0 if res.selection_student is None else len(res.selection_student)
    return {"step": step, "total": r.total, "wce": r.wce, "s_hvm": r.s_hvm, "t_hvm": r.t_hvm,
            "distill": r.distill, "sum_local_hardness_student": hs,
            "sum_local_hardness_teacher": ht, "nonempty_selected": ns,
            "nonempty_selected_teacher": nt, "n_selected": n}


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    initial_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)
    lga_histogram: LgaHistogram | None = None
    params: np.ndarray | None = None
    teacher: TeacherState | None = None

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in REPORT_COLUMNS])
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)


def run_training(cfg: ExperimentConfig, scene=None, progress=None) -> RunReport:
    gt, feats = load_scene(cfg) if scene is None else scene
    trainer = Trainer(cfg, gt, feats)
    report = RunReport(lga_histogram=lga_histogram(gt, cfg.lga))
    report.initial_metrics = trainer.evaluate()
    for i in range(cfg.steps):
        report.rows.append(trainer.step())
        if progress is not None:
            progress(i, report.rows[-1])
    report.final_metrics = trainer.evaluate() if cfg.steps else report.initial_metrics
    report.params = trainer.net.params.copy()
    report.teacher = trainer.teacher
    return report


def expected_param_count(cfg: ExperimentConfig) -> int:
    return param_count(cfg.scene.feature_dim, cfg.scene.num_classes)
