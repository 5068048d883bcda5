import json
from dataclasses import replace

import numpy as np
import pytest

from hassc import cli
from hassc.config import ExperimentConfig, SceneConfig, dump_config, parse_config
from hassc.dataio import SceneSpec, encode, generate_scene, ground_plane, invert_label_map, write_file_set
from hassc.errors import ConfigError, NonFiniteLossError
from hassc.grid import GridDims, SemanticGrid
from hassc.hardness import lga_histogram
from hassc.metrics import evaluate
from hassc.toymodel import ToyNet, save_checkpoint
from hassc.train import Trainer, load_scene, predict_labels, run_training, split_seeds
from oracles import lga_oracle

SMALL = SceneConfig(dims=(16, 16, 4), num_boxes=3, num_poles=2, feature_dim=8)


def small_cfg(**kw):
    return replace(ExperimentConfig(scene=SMALL, steps=5), **kw)


def write_cfg(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return str(p)


SMALL_INI = "[experiment]\nsteps = 4\n[scene]\ndims = 16 16 4\nnum_boxes = 3\nnum_poles = 2\nfeature_dim = 8\n"


# -- config -----------------------------------------------------------------

def test_defaults_carry_full_scale_constants():
    cfg = ExperimentConfig()
    assert (cfg.lga.alpha, cfg.lga.beta, cfg.lga.m) == (0.2, 1.0, 6)
    assert (cfg.selection.n, cfg.selection.t, cfg.selection.omega) == (4096, 3.0, 0.75)
    assert (cfg.distill.lam, cfg.distill.delta, cfg.distill.gamma_cap) == (48.0, 0.1, 0.99)


def test_config_round_trip():
    cfg = parse_config(SMALL_INI + "[toggles]\ndistill = off\n[sweep]\nn = 0, 16\n")
    assert not cfg.distill_on and cfg.sweep == {"n": [0, 16]}
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["[bogus]\na = 1\n", "[scene]\ncolour = red\n",
                                  "[toggles]\nhvm_only = 1\n", "[selection]\nt = 0.5\n",
                                  "[experiment]\nsteps = many\n", "not an ini"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_n_auto_scales():
    cfg = ExperimentConfig()
    assert cfg.effective_n(32 * 32 * 4) == 64
    assert cfg.effective_n(128 * 128 * 16) == 4096
    assert replace(cfg, auto_scale_n=False).effective_n(64) == 4096


def test_override_keys():
    cfg = ExperimentConfig()
    assert cfg.override("lambda", 12).distill.lam == 12.0
    assert cfg.override("n", 0).selection.n == 0
    assert cfg.override("distill", "off").distill_on is False
    with pytest.raises(ConfigError):
        cfg.override("gamma", 1)


def test_seed_split_is_stable_and_distinct():
    a, b = split_seeds(3), split_seeds(3)
    assert a == b and len(set(a.values())) == 4
    assert split_seeds(4) != a


# -- training ---------------------------------------------------------------

def test_zero_steps_report_has_only_initial_metrics():
    rep = run_training(small_cfg(steps=0))
    assert rep.rows == [] and rep.final_metrics == rep.initial_metrics


def test_training_is_deterministic():
    a, b = run_training(small_cfg()), run_training(small_cfg())
    assert a.rows_csv() == b.rows_csv()
    assert a.params.tobytes() == b.params.tobytes()


def test_report_rows_and_columns():
    rep = run_training(small_cfg(steps=6))
    assert len(rep.rows) == 6
    assert rep.rows_csv().splitlines()[0].split(",")[6:8] == [
        "sum_local_hardness_student", "sum_local_hardness_teacher"]
    for row in rep.rows:
        assert row["total"] == pytest.approx(row["wce"] + row["s_hvm"] + 0.1 * row["t_hvm"] + row["distill"])
        assert row["n_selected"] == 2           # 8*8*2 coarse voxels / 64
    assert all(np.isfinite(v["miou"]) for v in rep.final_metrics.values())


def test_all_toggles_off_is_plain_ce():
    cfg = small_cfg().with_toggles(global_hardness=False, local_hardness=False, t_hvm=False, distill=False)
    rep = run_training(cfg)
    for row in rep.rows:
        assert row["s_hvm"] == row["t_hvm"] == row["distill"] == 0.0 and row["total"] == row["wce"]


def test_n_zero_equals_baseline_exactly():
    base = small_cfg().with_toggles(global_hardness=False, local_hardness=False, t_hvm=False, distill=False)
    n0 = small_cfg().with_toggles(distill=False).override("n", 0)
    a, b = run_training(base), run_training(n0)
    assert a.params.tobytes() == b.params.tobytes()
    assert a.final_metrics == b.final_metrics


def test_lambda_zero_has_zero_distill():
    rep = run_training(small_cfg().override("lambda", 0))
    assert all(row["distill"] == 0.0 for row in rep.rows)


def test_lga_histogram_in_report_matches_oracle():
    cfg = small_cfg(steps=0)
    gt, _ = load_scene(cfg)
    rep = run_training(cfg)
    a = lga_oracle(gt.labels)
    empty = np.bincount(a[gt.labels == 0], minlength=7)
    nonempty = np.bincount(a[(gt.labels != 0) & gt.valid], minlength=7)
    np.testing.assert_array_equal(rep.lga_histogram.empty_counts, empty)
    np.testing.assert_array_equal(rep.lga_histogram.nonempty_counts, nonempty)
    assert rep.lga_histogram.to_csv() == lga_histogram(gt, cfg.lga).to_csv()


def test_non_finite_loss_aborts_with_step():
    tr = Trainer(small_cfg(), *load_scene(small_cfg()))
    tr.net = tr.net.copy(np.full_like(tr.net.params, np.nan))
    with pytest.raises(NonFiniteLossError) as e:
        tr.step()
    assert e.value.step == 0


def test_perfect_checkpoint_scores_one():
    # layered, block-aligned scene with noiseless features: a nearest-prototype
    # classifier written straight into the weights is exact after upsampling
    dims = GridDims(8, 8, 4)
    spec = SceneSpec(dims, (ground_plane(1, dims, thickness=2), ground_plane(2, dims, 2, y=(4, 8))),
                     num_classes=3, feature_dim=12, feature_noise=0.0, boundary_noise=0.0, seed=1)
    gt, feats = generate_scene(spec)
    proto = np.random.default_rng(1).standard_normal((3, 12))   # same draw as the generator
    proto[:, 9:] = 0.0                                          # ignore the coordinate channels
    net = ToyNet(12, 3, seed=0)
    v = net.views()
    for k in v:
        v[k][...] = 0.0
    v["enc_w1"][...] = 0.01 * np.eye(12)
    v["enc_w2"][...] = np.eye(12)
    v["coarse_w"][...] = 100.0 * proto.T
    v["coarse_b"][...] = -0.5 * (proto ** 2).sum(1)
    m = evaluate(predict_labels(net, feats, gt), gt)
    assert m["L"]["miou"] == 1.0 and m["L"]["iou"] == 1.0


# -- command line -----------------------------------------------------------

def test_cli_train_eval_consistency(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL_INI.replace("steps = 4", "steps = 0"))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--seed", "2"]) == 0
    for name in ("report.csv", "metrics_initial.json", "metrics_final.json", "lga_histogram.csv",
                 "student.ckpt", "teacher.ckpt", "config.ini"):
        assert (out / name).exists()
    capsys.readouterr()
    assert cli.main(["eval", "--config", cfg, "--seed", "2", "--checkpoint", str(out / "student.ckpt")]) == 0
    first = capsys.readouterr().out
    assert json.loads(first) == json.loads((out / "metrics_initial.json").read_text())
    cli.main(["eval", "--config", cfg, "--seed", "2", "--checkpoint", str(out / "student.ckpt")])
    assert capsys.readouterr().out == first


def test_cli_train_twice_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_INI)
    for d in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("report.csv", "metrics_final.json", "student.ckpt", "teacher.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_ablate_cardinality_and_failures(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_INI + "[sweep]\nn = 0, 4\nt = 1, 99\n")
    assert cli.main(["ablate", "--config", cfg, "--out", str(tmp_path / "abl")]) == 0
    rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert len(rows) == 5
    status = {tuple(r.split(",")[:2]): r.split(",")[-2] for r in rows[1:]}
    # t=99 needs more proposals than coarse voxels once N > 0
    assert status[("4", "99")] == "failed" and status[("4", "1")] == "ok" and status[("0", "99")] == "ok"


def test_cli_exit_codes(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    bad = tmp_path / "bad.ckpt"
    save_checkpoint(bad, np.zeros(7))
    cfg = write_cfg(tmp_path, SMALL_INI)
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(bad)]) == 2
    lm = tmp_path / "map.txt"
    lm.write_text("0 0\n1 1\n")
    (tmp_path / "x.bin").write_bytes(b"\0")
    (tmp_path / "x.label").write_bytes(b"\0")
    (tmp_path / "x.invalid").write_bytes(b"\0")
    assert cli.main(["decode", "--input", str(tmp_path / "x"), "--output", str(tmp_path / "x.npy"),
                     "--label-map", str(lm), "--dims", "4 4 4"]) == 3


def test_cli_codec_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.choice([0, 1, 2, 255], size=(8, 8, 8))
    lm = tmp_path / "map.txt"
    lm.write_text("0 0\n10 1\n20 2\n")
    np.save(tmp_path / "in.npy", labels)
    assert cli.main(["encode", "--input", str(tmp_path / "in.npy"), "--output", str(tmp_path / "f"),
                     "--label-map", str(lm), "--num-classes", "3"]) == 0
    assert cli.main(["decode", "--input", str(tmp_path / "f"), "--output", str(tmp_path / "out.npy"),
                     "--label-map", str(lm), "--num-classes", "3", "--dims", "8 8 8"]) == 0
    np.testing.assert_array_equal(np.load(tmp_path / "out.npy"), labels)


def test_cli_lga_stats_on_decoded_frame(tmp_path):
    labels = np.zeros((8, 8, 8), dtype=np.int64)
    labels[:, :, 0] = 1
    g = SemanticGrid(GridDims(8, 8, 8), labels, 2)
    lm = tmp_path / "map.txt"
    lm.write_text("0 0\n40 1\n")
    write_file_set(tmp_path / "f", encode(g, invert_label_map({0: 0, 40: 1})))
    cfg = write_cfg(tmp_path, "[scene]\ndims = 8 8 8\nnum_classes = 2\n")
    assert cli.main(["lga-stats", "--config", cfg, "--input", str(tmp_path / "f"),
                     "--label-map", str(lm), "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "lga_histogram.csv").read_text().splitlines()
    assert text[0] == "lga_value,empty_count,nonempty_count"
    assert text[1] == "0,384,0" and text[2] == "1,64,64"
    empty_cfg = write_cfg(tmp_path, "[scene]\ndims = 8 8 8\nnum_boxes = 0\nnum_poles = 0\n")
    assert cli.main(["lga-stats", "--config", empty_cfg, "--out", str(tmp_path / "o2")]) == 0
