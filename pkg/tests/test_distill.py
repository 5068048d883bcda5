import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hassc.distill import (DistillConfig, TeacherState, distill_loss, distill_loss_logits, ema_gamma,
                           ema_update, miou_scale, teacher_guided_hvm)
from hassc.errors import ConfigError, ShapeError
from hassc.grid import GridDims, ProbabilityVolume, SemanticGrid, upsample_trilinear
from hassc.hardness import HardnessField, LgaConfig, global_hardness
from hassc.losses import softmax
from hassc.selection import SelectionConfig, select_hard_voxels
from oracles import central_difference, lga_oracle, max_relative_error


@pytest.mark.parametrize("step,gamma", [(0, 0.0), (1, 0.5), (9, 0.9), (99, 0.99), (100, 0.99), (10**6, 0.99)])
def test_gamma_schedule(step, gamma):
    assert ema_gamma(step) == pytest.approx(gamma, abs=1e-15)


def test_first_update_copies_student():
    t = TeacherState.from_student(np.zeros(5))
    s = np.arange(5.0)
    t = ema_update(t, s)
    np.testing.assert_array_equal(t.params, s)
    assert t.step == 1


def test_teacher_initialised_from_student_is_a_copy():
    s = np.ones(3)
    t = TeacherState.from_student(s)
    s[0] = 7.0
    assert t.params[0] == 1.0 and t.step == 0


def test_ema_length_mismatch():
    with pytest.raises(ShapeError):
        ema_update(TeacherState.from_student(np.zeros(3)), np.zeros(4))


def test_ema_convexity_random_walk():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(16)
    t = TeacherState.from_student(s)
    lo, hi = s.copy(), s.copy()
    for _ in range(10_000):
        s = s + rng.standard_normal(16) * 0.1
        lo, hi = np.minimum(lo, s), np.maximum(hi, s)
        t = ema_update(t, s)
        assert (t.params >= lo - 1e-12).all() and (t.params <= hi + 1e-12).all()
    assert t.step == 10_000


def test_ema_fixed_point_monotone():
    rng = np.random.default_rng(1)
    t = TeacherState(rng.standard_normal(8), step=5)
    target = rng.standard_normal(8)
    gap = np.abs(t.params - target)
    for _ in range(300):
        t = ema_update(t, target)
        new_gap = np.abs(t.params - target)
        assert (new_gap <= gap + 1e-15).all()
        gap = new_gap


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(lam=-1)
    with pytest.raises(ConfigError):
        DistillConfig(gamma_cap=1.0)
    assert DistillConfig().lam == 48.0 and DistillConfig().delta == 0.1


# -- mu --------------------------------------------------------------------

def onehot_volume(labels, c):
    labels = np.asarray(labels)
    p = np.eye(c)[labels.ravel()].reshape(labels.shape + (c,))
    return ProbabilityVolume(GridDims(*labels.shape), p)


def test_mu_perfect_and_disjoint():
    gt = SemanticGrid(GridDims(2, 2, 1), [1, 2, 1, 2], num_classes=3)
    assert miou_scale(onehot_volume(gt.labels, 3), gt) == 1.0
    gt2 = SemanticGrid(GridDims(2, 2, 1), [2, 2, 2, 2], num_classes=3)
    assert miou_scale(onehot_volume(np.ones((2, 2, 1), dtype=int), 3), gt2) == 0.0


def test_mu_half_split():
    gt = SemanticGrid(GridDims(2, 2, 1), [1, 1, 2, 2], num_classes=3)
    assert miou_scale(onehot_volume(np.ones((2, 2, 1), dtype=int), 3), gt) == pytest.approx(0.25)


def test_mu_ignores_invalid_and_order():
    rng = np.random.default_rng(3)
    labels = rng.choice([0, 1, 2, 255], size=(4, 4, 2))
    pred = rng.integers(0, 3, size=(4, 4, 2))
    gt = SemanticGrid(GridDims(4, 4, 2), labels, num_classes=3)
    mu = miou_scale(onehot_volume(pred, 3), gt)
    perm = rng.permutation(32)
    gt_p = SemanticGrid(GridDims(32, 1, 1), labels.ravel()[perm], num_classes=3)
    assert miou_scale(onehot_volume(pred.ravel()[perm].reshape(32, 1, 1), 3), gt_p) == mu


# -- KL --------------------------------------------------------------------

def test_kl_identical_is_zero():
    p = np.random.default_rng(0).dirichlet(np.ones(4), size=10)
    assert distill_loss(p, p, 0.5).loss == pytest.approx(0.0, abs=1e-15)


def test_kl_hand_value():
    res = distill_loss([[0.5, 0.5]], [[0.75, 0.25]], 0.0, DistillConfig(lam=1.0))
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert res.loss == pytest.approx(expected, rel=1e-12)
    assert res.loss == pytest.approx(0.1308, abs=1e-4)


def test_kl_mu_ratio_is_e():
    p = [[0.5, 0.5]]
    q = [[0.9, 0.1]]
    a = distill_loss(p, q, 0.0).loss
    b = distill_loss(p, q, 1.0).loss
    assert b / a == pytest.approx(math.e, rel=1e-14)
    assert a == pytest.approx(48 * (0.9 * math.log(1.8) + 0.1 * math.log(0.2)), rel=1e-12)


def test_kl_saturated_teacher_is_finite():
    res = distill_loss([[0.5, 0.5]], [[1.0, 0.0]], 0.3)
    assert np.isfinite(res.loss) and np.isfinite(res.grad).all()
    res = distill_loss([[1.0, 0.0]], [[0.5, 0.5]], 0.3)
    assert np.isfinite(res.loss) and np.isfinite(res.grad).all()


def test_kl_masks_invalid():
    rng = np.random.default_rng(1)
    p, q = rng.dirichlet(np.ones(3), 4), rng.dirichlet(np.ones(3), 4)
    valid = np.array([True, True, False, False])
    assert distill_loss(p, q, 0.2, valid=valid).loss == pytest.approx(distill_loss(p[:2], q[:2], 0.2).loss)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(5), 12), rng.dirichlet(np.ones(5), 12)
    assert distill_loss(p, q, rng.random()).loss >= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_kl_logit_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((6, 4))
    q = rng.dirichlet(np.ones(4), 6)
    cfg = DistillConfig(lam=2.0)
    f = lambda x: distill_loss_logits(x, q, 0.4, cfg).loss
    g = distill_loss_logits(z, q, 0.4, cfg).grad
    assert max_relative_error(g, central_difference(f, z)) < 1e-6


def test_kl_prob_gradient():
    rng = np.random.default_rng(9)
    p, q = rng.dirichlet(np.ones(3) * 3, 5), rng.dirichlet(np.ones(3), 5)
    f = lambda x: distill_loss(x, q, 0.1).loss
    assert max_relative_error(distill_loss(p, q, 0.1).grad, central_difference(f, p, 1e-7)) < 1e-6


# -- teacher-guided HVM ----------------------------------------------------

def small_scene(seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.choice([0, 1, 2], size=(8, 8, 8), p=[0.6, 0.2, 0.2])
    gt = SemanticGrid(GridDims(8, 8, 8), labels, num_classes=3)
    coarse = ProbabilityVolume(GridDims(4, 4, 4), rng.dirichlet(np.ones(3), size=(4, 4, 4)))
    return gt, coarse


def test_teacher_guided_replay_oracle():
    gt, coarse_t = small_scene()
    student = ProbabilityVolume(GridDims(8, 8, 8), np.random.default_rng(1).dirichlet(np.ones(3), size=(8, 8, 8)))
    h = global_hardness(coarse_t)
    cfg = SelectionConfig(n=8, t=2, omega=0.5)
    res, sel = teacher_guided_hvm(h, student, gt, cfg, LgaConfig(), np.random.default_rng(7))

    # replay: same stream, plain Python ranking, centre targets, hand-evaluated weighted CE
    rng = np.random.default_rng(7)
    hf = h.values.ravel()
    props = list(rng.choice(64, size=16, replace=False))
    hard = sorted(props, key=lambda i: (-hf[i], i))[:4]
    rest = np.array([i for i in range(64) if i not in hard])
    chosen = hard + list(rng.choice(rest, size=4, replace=False))
    a = lga_oracle(gt.labels)
    total = 0.0
    for idx in chosen:
        ci = np.unravel_index(idx, (4, 4, 4))
        fi = tuple(2 * c + 1 for c in ci)
        lab = gt.labels[fi]
        total += (0.2 + a[fi]) * -math.log(student.probs[fi][lab])
    assert res.loss == pytest.approx(total / 8, rel=1e-12)
    assert list(np.ravel_multi_index(tuple(sel.coords.T), (4, 4, 4))) == chosen
    assert res.grad.shape == student.probs.shape


def test_teacher_uniform_hardness_omega_zero_is_random_ce():
    gt, _ = small_scene(2)
    student = ProbabilityVolume(GridDims(8, 8, 8), np.full((8, 8, 8, 3), 1 / 3))
    h = HardnessField(GridDims(4, 4, 4), np.ones((4, 4, 4)), "global")
    res, sel = teacher_guided_hvm(h, student, gt, SelectionConfig(n=10, t=1, omega=0.0),
                                  rng=np.random.default_rng(0), weighted=False)
    assert sel.hard_count == 0
    assert res.loss == pytest.approx(math.log(3), rel=1e-12)


def test_teacher_at_step_zero_matches_student_selection():
    gt, coarse = small_scene(3)
    h = global_hardness(coarse)
    cfg = SelectionConfig(n=8, t=3, omega=0.75)
    own = select_hard_voxels(h, cfg, np.random.default_rng(4))
    teacher_h = global_hardness(ProbabilityVolume(coarse.dims, coarse.probs.copy()))
    student = upsample_trilinear(coarse, gt.dims)
    _, sel = teacher_guided_hvm(teacher_h, student, gt, cfg, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(sel.coords, own.coords)


def test_teacher_guided_gradient():
    gt, coarse = small_scene(5)
    cfg = SelectionConfig(n=8, t=2, omega=0.5)
    _, sel = teacher_guided_hvm(global_hardness(coarse), upsample_trilinear(coarse, gt.dims), gt, cfg,
                                rng=np.random.default_rng(0))
    z = np.random.default_rng(6).standard_normal((8, 8, 8, 3))

    def f(x):
        pv = ProbabilityVolume(gt.dims, softmax(x), check=False)
        return teacher_guided_hvm(None, pv, gt, cfg, selection=sel)[0]

    res = f(z)
    p = softmax(z)
    g = p * (res.grad - (res.grad * p).sum(-1, keepdims=True))
    touched = np.unique(np.ravel_multi_index(tuple(sel.targets.T), gt.dims.shape))
    zf = z.reshape(-1, 3)
    for idx in touched:
        def local(v, idx=idx):
            zz = zf.copy()
            zz[idx] = v
            return f(zz.reshape(z.shape)).loss
        num = central_difference(local, zf[idx].copy())
        assert max_relative_error(g.reshape(-1, 3)[idx], num) < 1e-6
