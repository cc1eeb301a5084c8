"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run. Set TAPG_UPDATE_GOLDEN=1 to rewrite the golden files
under tests/golden/ (they are compared, never silently created).
"""

import hashlib
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
import test_inference as inference_tests
import test_metrics as metrics_tests
import test_model as model_tests
import test_sampler as sampler_tests
import test_tensor as tensor_tests
import test_transformer as transformer_tests
from tapg import cli
from tapg.config import load_config
from tapg.inference import MatchConfig, ScoredProposal, fuse_score, fuzzy_match, soft_nms
from tapg.labels import boundary_regions, boundary_targets, iou, iou_matrix, proposal_targets
from tapg.metrics import ar_at_an, ar_curve, auc, average_precision, proposal_thresholds, recall_at
from tapg.sampler import enumerate_windows, extract_features, fibonacci_group, stride
from tapg.tensor import Tensor
from tapg.transformer import QueryForm, scaled_dot_attention

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = Path(__file__).resolve().parent / "golden"
UPDATE = os.environ.get("TAPG_UPDATE_GOLDEN") == "1"


def record(key, label, ok, detail):
    line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE.append((key, line))
    print(line)
    assert ok, line


def golden(name, value):
    """Compare with (or, when updating, rewrite) a JSON golden file."""
    path = GOLDEN / name
    if UPDATE:
        GOLDEN.mkdir(exist_ok=True)
        path.write_text(json.dumps(value, indent=1, sort_keys=True) + "\n")
    if not path.exists():
        pytest.fail(f"missing golden file {path}; rerun with TAPG_UPDATE_GOLDEN=1")
    return json.loads(path.read_text())


# -- 1 --------------------------------------------------------------------------------

def test_criterion_1_stride_table():
    ws = [1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 100]
    got = [stride(w, 21) for w in ws]
    ok = got == [1, 1, 1, 2, 2, 3, 5, 6, 9, 13, 14]
    record(1, "criterion 1", ok, f"stride(w, 21) = {got}")


# -- 2 --------------------------------------------------------------------------------

def test_criterion_2_sparsity_ratio():
    L = len(enumerate_windows(256, fibonacci_group(64, 21)))
    L100 = len(enumerate_windows(100, fibonacci_group(100, 21)))
    ratio = L / 16384  # the stated denominator; 1225 / 16384 is the published 7.5%
    record(2, "criterion 2", ratio <= 0.08,
           f"L={L} for T=256, D=64 (published 1225, diff {L - 1225:+d}); "
           f"L/16384={ratio:.4f}; L={L100} for T=100 (published 451, diff {L100 - 451:+d})")


# -- 3 --------------------------------------------------------------------------------

def test_criterion_3_gradients():
    t0 = time.time()
    prim = {name: tensor_tests.grad_error(build, arrays)
            for name, build, arrays in tensor_tests.PRIMITIVE_CASES}
    enc, enc_zero = transformer_tests.encoder_layer_errors(0)
    e2e, e2e_zero = model_tests.end_to_end_errors(7, 4)
    worst = {"primitives": max(prim.values()), "encoder layer": max(enc.values()),
             "end to end": max(e2e.values())}
    ok = max(worst.values()) < 1e-4 and max(enc_zero, e2e_zero) < 1e-12
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, "criterion 3", ok, f"max relative error: {detail} "
           f"({len(prim)} primitives, {time.time() - t0:.1f}s)")


# -- 4 --------------------------------------------------------------------------------

def test_criterion_4_attention_invariants():
    rng = np.random.default_rng(2024)
    worst_sum = worst_mean = 0.0
    exact = True
    for _ in range(1000):
        n_q, n_k, d_k, d_v = (int(x) for x in rng.integers(1, 12, 4))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        Q = rng.normal(size=(n_q, d_k)) * scale
        K = rng.normal(size=(n_k, d_k)) * scale
        V = rng.normal(size=(n_k, d_v))
        _, w = scaled_dot_attention(Tensor(Q), Tensor(K), Tensor(V), return_weights=True)
        worst_sum = max(worst_sum, float(np.abs(w.data.sum(-1) - 1).max()))
        one = scaled_dot_attention(Tensor(Q), Tensor(K[:1]), Tensor(V[:1])).data
        exact &= bool(np.array_equal(one, np.repeat(V[:1], n_q, axis=0)))
        zero = scaled_dot_attention(Tensor(np.zeros_like(Q)), Tensor(K), Tensor(V)).data
        worst_mean = max(worst_mean, float(np.abs(zero - V.mean(0)).max()))
    ok = worst_sum <= 1e-12 and exact and worst_mean <= 1e-12
    record(4, "criterion 4", ok, f"1000 trials: |row sum - 1| <= {worst_sum:.1e}, "
           f"n_k=1 exact={exact}, zero-query mean error {worst_mean:.1e}")


# -- 5 --------------------------------------------------------------------------------

def test_criterion_5_fuzzy_match_and_fusion():
    windows = [(0, 5), (12, 22), (30, 40)]
    p = fuzzy_match((10, 20, 0.7, 0.6), windows, [0.1, 0.95, 0.1], [0.1, 0.85, 0.1])
    q = fuzzy_match((10, 20, 0.7, 0.6), windows, [0.1, 0.5, 0.1], [0.1, 0.85, 0.1])
    f = fuse_score(ScoredProposal(0, 1, 0.9, 0.8, 0.7, 0.6))
    ok = (p.t_s, p.t_e) == (11.0, 21.0) and (q.t_s, q.t_e) == (10, 20) and abs(f - 0.3024) <= 1e-12
    record(5, "criterion 5", ok, f"refined [{p.t_s:g}, {p.t_e:g}], else branch [{q.t_s:g}, "
           f"{q.t_e:g}], fused {f!r}")


# -- 6 --------------------------------------------------------------------------------

def test_criterion_6_oracles():
    t0 = time.time()
    nms_ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        props = inference_tests._random_props(rng, n)
        cfg = MatchConfig(sigma=float(rng.choice([0.4, 0.25, 1.0])),
                          max_proposals=int(rng.integers(1, 250)))
        got = soft_nms(props, cfg)
        ref = inference_tests.reference_soft_nms([(p.t_s, p.t_e, p.p_f) for p in props],
                                                 cfg.sigma, cfg.score_floor, cfg.max_proposals)
        nms_ok &= [(p.t_s, p.t_e, p.p_f) for p in got] == \
            [(props[i].t_s, props[i].t_e, s) for i, s in ref]

    metric_err = 0.0
    th = proposal_thresholds()
    for seed in range(100):
        props, gts = metrics_tests.random_instance(np.random.default_rng(seed))
        pairs = {v: [tuple(r["segment"]) for r in rows] for v, rows in props.items()}
        for an in (1, 5, 20):
            metric_err = max(metric_err, abs(ar_at_an(props, gts, [an], th)[an]
                                             - metrics_tests.oracle_ar(pairs, gts, an, th)))
        curve = ar_curve(props, gts, th, 20)
        metric_err = max(metric_err, abs(auc(curve) - metrics_tests.oracle_auc(list(curve))))
        for t in (0.3, 0.5, 0.7):
            metric_err = max(metric_err, abs(average_precision(props, gts, t)
                                             - metrics_tests.oracle_ap(props, gts, t)))

    label_err = feat_err = 0.0
    rng = np.random.default_rng(6)
    for _ in range(100):
        windows = [(float(s), float(s + rng.integers(1, 30))) for s in rng.integers(0, 80, rng.integers(1, 40))]
        anns = [(s, s + float(rng.uniform(0.5, 20))) for s in rng.uniform(0, 80, rng.integers(0, 5))]
        got = proposal_targets(windows, anns)
        want = [max([iou(w, a) for a in anns], default=0.0) for w in windows]
        label_err = max(label_err, float(np.abs(got - want).max()))

        T, C, N = int(rng.integers(2, 40)), int(rng.integers(1, 6)), int(rng.integers(2, 12))
        F = rng.normal(size=(T, C))
        wins = []
        for _ in range(int(rng.integers(1, 10))):
            s = rng.uniform(0, T - 0.5)
            wins.append((s, rng.uniform(s + 0.1, T)))
        diff = extract_features(Tensor(F), wins, N).data - sampler_tests.brute_force_features(F, wins, N)
        feat_err = max(feat_err, float(np.abs(diff).max()))

    ok = nms_ok and metric_err <= 1e-12 and label_err <= 1e-12 and feat_err <= 1e-12
    record(6, "criterion 6", ok, f"soft-nms bit-identical={nms_ok}; metric error {metric_err:.1e}; "
           f"proposal_targets {label_err:.1e}; extract_features {feat_err:.1e} "
           f"({time.time() - t0:.1f}s)")


# -- 7 --------------------------------------------------------------------------------

def test_criterion_7_label_assignment():
    r_s, r_e = boundary_regions((10, 20))
    g = boundary_targets([(10, 20)], 100)
    n = np.arange(100)
    inside = (n - 0.5 >= r_s[0]) & (n + 0.5 <= r_s[1])
    inside_e = (n - 0.5 >= r_e[0]) & (n + 0.5 <= r_e[1])
    ok = (r_s == (9.0, 11.0) and r_e == (19.0, 21.0)
          and np.array_equal(g.G_s == 1.0, inside) and np.array_equal(g.G_e == 1.0, inside_e)
          and g.G_s.min() >= 0 and g.G_s.max() <= 1 and g.G_e.min() >= 0 and g.G_e.max() <= 1)
    record(7, "criterion 7", ok, f"r_S={list(r_s)}, r_E={list(r_e)}, peaks at "
           f"{np.flatnonzero(g.G_s == 1).tolist()} / {np.flatnonzero(g.G_e == 1).tolist()}")


# -- 8 --------------------------------------------------------------------------------

def end_to_end(config: Path):
    for cmd in ("gen-data", "train", "infer", "eval"):
        assert cli.main([cmd, "--config", str(config)]) == 0, cmd
    cfg = load_config(config)
    rows = [json.loads(x) for x in cfg.path(cfg.paths.loss_log).read_text().splitlines()]
    res = json.loads(cfg.path(cfg.paths.results).read_text())
    ann = json.loads((cfg.path(cfg.data.dir) / "annotations.json").read_text())
    gts = {v["id"]: [tuple(a["segment"]) for a in v["annotations"]] for v in ann["videos"]}
    top1 = [float(iou_matrix([res[v][0]["segment"]], g).max()) if res.get(v) else 0.0
            for v, g in gts.items()]
    return {
        "loss": [r["L"] for r in rows],
        "loss_ratio": rows[-1]["L"] / rows[0]["L"],
        "ar10_at_0.5": recall_at(res, gts, 0.5, 10),
        "top1_fraction": float(np.mean(np.array(top1) >= 0.7)),
        "report": json.loads(cfg.path(cfg.paths.report).read_text()),
    }


def meets_criterion_8(m):
    return m["loss_ratio"] <= 0.2 and m["ar10_at_0.5"] >= 0.9 and m["top1_fraction"] >= 0.8


def describe(m):
    return (f"final/first loss {m['loss_ratio']:.3f} (<= 0.2), AR@10@0.5 {m['ar10_at_0.5']:.3f} "
            f"(>= 0.9), top-1 tIoU>=0.7 on {m['top1_fraction']:.0%} of videos (>= 80%)")


def test_criterion_8_pinned_run_defaults(tmp_path):
    """The run exactly as written: published training constants, 60 epochs."""
    shutil.copy(ROOT / "configs" / "defaults.toml", tmp_path)
    t0 = time.time()
    m = end_to_end(tmp_path / "defaults.toml")
    record(8, "criterion 8", meets_criterion_8(m),
           f"defaults config: {describe(m)} ({time.time() - t0:.0f}s)")


def test_criterion_8_pinned_run_tuned(tmp_path):
    """Supplementary: the same run with the desk-scale training knobs, against goldens."""
    shutil.copy(ROOT / "configs" / "synthetic.toml", tmp_path)
    t0 = time.time()
    m = end_to_end(tmp_path / "synthetic.toml")
    g = golden("synthetic_run.json", m)
    same = (np.allclose(m["loss"], g["loss"], rtol=1e-9, atol=0)
            and all(abs(m["report"][k] - v) <= 1e-9 for k, v in g["report"].items()
                    if isinstance(v, float)))
    record(8.5, "criterion 8 (supplementary, configs/synthetic.toml)",
           meets_criterion_8(m) and same,
           f"{describe(m)}; matches golden={same} ({time.time() - t0:.0f}s)")


# -- 9 --------------------------------------------------------------------------------

ABLATION_TRAIN = "[train]\nseed = 7\nepochs = 2\nlearning_rate = 5e-4\n"


def _ablation_config(tmp_path, name, model_lines):
    d = tmp_path / name
    d.mkdir()
    text = (ROOT / "configs" / "synthetic.toml").read_text()
    head, _, _ = text.partition("[model]")
    (d / "run.toml").write_text(head + "[model]\n" + model_lines + "\ndropout_rate = 0.0\n\n"
                                + ABLATION_TRAIN)
    return d / "run.toml"


def test_criterion_9_ablation_grid(tmp_path):
    t0 = time.time()
    logs = {}
    for form in QueryForm:
        cfg = _ablation_config(tmp_path, form.value, f'query_form = "{form.value}"\nn_layers = 3')
        assert cli.main(["gen-data", "--config", str(cfg)]) == 0
        assert cli.main(["train", "--config", str(cfg)]) == 0
        c = load_config(cfg)
        logs[form.value] = [json.loads(x)["L"] for x in c.path(c.paths.loss_log).read_text().splitlines()]
    distinct = len({tuple(v) for v in logs.values()}) == 3
    pinned = golden("query_form_losses.json", logs)
    same = all(np.allclose(logs[k], pinned[k], rtol=1e-9, atol=0) for k in pinned) and \
        set(pinned) == set(logs)

    depths = {}
    for M in (1, 3, 6):
        cfg = _ablation_config(tmp_path, f"M{M}", f'query_form = "OriginalFeature"\nn_layers = {M}')
        assert cli.main(["gen-data", "--config", str(cfg)]) == 0
        depths[M] = cli.main(["train", "--config", str(cfg)]) == 0
    ok = distinct and same and all(depths.values())
    record(9, "criterion 9", ok, f"query-form logs distinct={distinct}, match golden={same}; "
           f"M in {{1,3,6}} trained={all(depths.values())} ({time.time() - t0:.0f}s)")


# -- 10 -------------------------------------------------------------------------------

DETERMINISM = """\
seed = 11

[data]
n_videos = 4
video_length = 60
T = 32
channels = 8

[sampler]
window_group = "fib:32:21"
sample_points = 8

[model]
d_model = 32
n_heads = 4
d_ff = 64

[train]
seed = 11
epochs = 2
learning_rate = 5e-4
"""


def _digests(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix != ".toml"}


def _pipeline(d: Path) -> list[int]:
    d.mkdir()
    (d / "run.toml").write_text(DETERMINISM)
    env = dict(os.environ, TAPG_THREADS="0")
    codes = []
    for args in (["gen-data"], ["train"], ["infer"], ["eval", "--plot"], ["plot"]):
        out = subprocess.run([sys.executable, "-m", "tapg", *args, "--config", str(d / "run.toml")],
                             env=env, capture_output=True)
        codes.append(out.returncode)
    return codes


def test_criterion_10_determinism(tmp_path):
    codes = _pipeline(tmp_path / "a") + _pipeline(tmp_path / "b")
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = not any(codes) and a.keys() == b.keys() and not differing and len(a) >= 10
    record(10, "criterion 10", ok, f"{len(a)} output files compared byte-for-byte across two runs"
           + (f"; differing: {differing}" if differing else ""))
