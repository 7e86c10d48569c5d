"""Acceptance suite: one test per criterion, each at its stated tolerance and time budget.

Every test records a PASS/FAIL line; conftest prints them together at the end of the run.
"""
import csv
import json
import math
import os
import time

import numpy as np
import pytest

from detectlab import bbox_loss as L
from detectlab import bench, checks
from detectlab import blocks as B
from detectlab import detector as D
from detectlab import synth as S
from detectlab import tensor as T
from detectlab.bbox_loss import BBox, WIoUParams
from detectlab.cli import main
from detectlab.metrics import average_precision, evaluate
from oracles import brute_map, wiou_v1_oracle
from test_metrics import random_instance

RESULTS: list[str] = []

# training recipe shared by both end-to-end configs (everything except neck / attention / box loss)
RECIPE = {"stage_depth": 2, "batch_size": 8, "lr": 0.02, "w_cls": 3.0, "augment": "dihedral", "epochs": 30, "seed": 7}
FULL = {"neck": "rfb", "attention": "ca", "box_loss": "wiou3"}
BASELINE = {"neck": "sppcspc", "attention": "none", "box_loss": "ciou"}
MAP_TARGET = 0.80
# floors frozen from the baseline calibration run (baseline 0.5433, full 0.6720 on the reference machine):
# the baseline keeps a 0.04 allowance for BLAS rounding differences, the full config must reach the baseline
BASELINE_FLOOR = 0.50
FULL_FLOOR = 0.54
TRAIN_BUDGET_S = 20 * 60


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 -----------------------------------------------------------------------------------------------

def test_c1_wiou_v1_matches_corner_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 1000
    g = np.column_stack([rng.uniform(0, 128, (n, 2)), rng.uniform(1, 60, (n, 2))])
    p = np.column_stack([g[:, :2] + rng.normal(0, 20, (n, 2)), g[:, 2:] * np.exp(rng.normal(0, 0.6, (n, 2)))])
    with T.precision(np.float64):
        got = L.wiou_v1_t(T.Tensor(p), T.Tensor(g)).data
    want = np.array([wiou_v1_oracle(a, b) for a, b in zip(p, g)])
    err = float(np.max(np.abs(got - want)))
    worked = L.wiou_v1(BBox(1, 1, 2, 2), BBox(2, 2, 2, 2))
    dt = time.perf_counter() - t0
    ok = err <= 1e-6 and abs(worked - 6 / 7 * math.exp(1 / 9)) <= 1e-5 and abs(worked - 0.95788) <= 1e-5 and dt < 1
    record("C1 wiou_v1 oracle", ok, f"max err {err:.1e} over {n} pairs, worked pair {worked:.6f}, {dt:.2f}s")


# -- 2 -----------------------------------------------------------------------------------------------

def test_c2_gradient_checks():
    t0 = time.perf_counter()
    fails = []
    worst = 0.0
    for m in checks.MODULES:
        res = checks.run(m, seed=0, tol=1e-4, h=1e-5, max_coords=None if m in ("wiou1", "wiou3", "ciou") else 40)
        worst = max(worst, res["max_rel_err"])
        if not res["pass"]:
            fails.append(m)
    dev = checks.wiou3_gain_identity(seed=0)
    dt = time.perf_counter() - t0
    ok = not fails and dev <= 1e-10 and dt < 120
    record("C2 grad_check", ok, f"{len(checks.MODULES)} modules, worst rel err {worst:.1e}, failed {fails or 'none'}, "
                                f"wiou3 = r * wiou1 dev {dev:.1e}, {dt:.1f}s")


# -- 3 -----------------------------------------------------------------------------------------------

def test_c3_gradient_gain_shape():
    t0 = time.perf_counter()
    prm = WIoUParams(1.9, 3.0)
    grid = np.linspace(0.0, 10.0, 1_000_001)
    r = L.gradient_gain(grid, prm)
    peak = grid[np.argmax(r)]
    unique = int(np.sum(r == r.max())) == 1
    step = grid[1] - grid[0]
    dt = time.perf_counter() - t0
    ok = (L.gradient_gain(3.0, prm) == 1.0 and L.gradient_gain(0.0, prm) == 0.0 and unique
          and abs(peak - 1 / math.log(1.9)) <= step and dt < 1)
    record("C3 focusing gain", ok, f"r(3)={L.gradient_gain(3.0, prm)!r}, r(0)={L.gradient_gain(0.0, prm)!r}, "
                                   f"argmax {peak:.5f} vs 1/ln 1.9 = {1 / math.log(1.9):.5f}, {dt:.2f}s")


# -- 4 -----------------------------------------------------------------------------------------------

def test_c4_map_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(200):
        dets, gts = random_instance(rng, max_det=8, max_gt=5, classes=2)
        res = evaluate(dets, gts)
        m50, mall = brute_map(dets, gts, tuple(np.round(np.arange(0.5, 0.96, 0.05), 2)))
        bad += res.map50 != float(m50) or res.map5095 != float(mall)
    worked = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
    dt = time.perf_counter() - t0
    ok = bad == 0 and abs(worked - 0.8333333333) <= 1e-9 and dt < 10
    record("C4 mAP oracle", ok, f"{200 - bad}/200 exact, worked AP {worked:.10f}, {dt:.2f}s")


# -- 5 -----------------------------------------------------------------------------------------------

def _count(init, *args):
    p = B.BlockParams()
    init(p, *args, np.random.default_rng(0))
    return p.count()


def test_c5_parameter_directions():
    t0 = time.perf_counter()
    lines, ok = [], True
    for c in (64, 128, 256):
        rfb = _count(B.init_rfb, B.RFBConfig(c, c))
        spp = _count(B.init_sppcspc, c, c)
        ca = _count(B.init_ca, B.CAConfig(c))
        ok &= rfb < spp and rfb + ca > rfb and spp + ca > spp
        lines.append(f"C={c}: rfb {rfb} < sppcspc {spp}, ca +{ca}")
    dt = time.perf_counter() - t0
    ok &= dt < 1
    record("C5 param counts", ok, "; ".join(lines) + f", {dt:.2f}s")


# -- 6 -----------------------------------------------------------------------------------------------

def test_c6_loss_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("loss_bench")
    t0 = time.perf_counter()
    hits = {}
    for seed in (42, 0, 1, 2, 3):
        curves = bench.loss_bench(("ciou", "wiou1", "wiou3"), steps=500, seed=seed, lr=10.0, pairs=256)
        bench.write_curves(out / f"seed{seed}.csv", curves)
        hits[seed] = {k: bench.first_below(c, 0.2) for k, c in curves.items()}
    dt = time.perf_counter() - t0
    with open(out / "seed42.csv") as fh:
        assert len(list(csv.reader(fh))) == 502

    def faster(h):
        return h["wiou3"] is not None and (h["ciou"] is None or h["wiou3"] <= h["ciou"])
    ok = faster(hits[42]) and all(faster(h) for h in hits.values()) and dt < 30
    record("C6 loss bench", ok, "first step below 0.2 (wiou3/ciou): "
           + ", ".join(f"seed {s} {h['wiou3']}/{h['ciou']}" for s, h in hits.items()) + f", {dt:.1f}s, CSVs in {out}")


# -- 7 -----------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def calib_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth300")
    S.build_dataset(None, 300, root, seed=7)
    return root


def _end_to_end(data, arch, threads="1"):
    os.environ["DETECTLAB_THREADS"] = threads
    cfg = D.DetectorConfig.from_dict({**RECIPE, **arch})
    t0 = time.perf_counter()
    ckpt, rows = D.train(cfg, D.DetectionData.from_dir(data, "train"))
    elapsed = time.perf_counter() - t0
    res = D.evaluate_model(D.model_from_checkpoint(ckpt), D.DetectionData.from_dir(data, "test"))
    return elapsed, [r["total"] for r in rows], res.map50


@pytest.fixture(scope="module")
def baseline_run(calib_data):
    return _end_to_end(calib_data, BASELINE)


@pytest.fixture(scope="module")
def full_run(calib_data, baseline_run):
    # the baseline calibration run comes first
    return _end_to_end(calib_data, FULL)


def test_c7a_baseline_calibration(baseline_run):
    elapsed, losses, m = baseline_run
    ok = elapsed <= TRAIN_BUDGET_S and (BASELINE_FLOOR is None or m >= BASELINE_FLOOR)
    record("C7 baseline calibration", ok, f"sppcspc/none/ciou held-out mAP0.5 {m:.4f} "
                                         f"(floor {BASELINE_FLOOR}), {elapsed:.0f}s")


def test_c7b_full_budget_and_loss(full_run):
    elapsed, losses, _ = full_run
    first5 = losses[:5]
    decreasing = all(b < a for a, b in zip(first5, first5[1:]))
    ok = elapsed <= TRAIN_BUDGET_S and decreasing
    record("C7 full run time and loss", ok, f"{elapsed:.0f}s of {TRAIN_BUDGET_S}s, "
                                            f"first 5 epoch losses {[round(v, 3) for v in first5]}")


def test_c7c_full_calibrated_floor(full_run):
    m = full_run[2]
    ok = FULL_FLOOR is not None and m >= FULL_FLOOR
    record("C7 full run calibrated floor", ok, f"rfb/ca/wiou3 held-out mAP0.5 {m:.4f} (floor {FULL_FLOOR})")


def test_c7d_full_map_target(full_run):
    m = full_run[2]
    record("C7 full run mAP target", m >= MAP_TARGET, f"held-out mAP0.5 {m:.4f} vs {MAP_TARGET}")


# -- 8 -----------------------------------------------------------------------------------------------

def test_c8_repeat_training_bit_identical(tmp_path):
    S.build_dataset(None, 20, tmp_path / "data", seed=11)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**RECIPE, **FULL, "epochs": 3, "base_channels": 4}))
    blobs = []
    for run in ("a", "b"):
        code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"), "--out", str(tmp_path / run)])
        assert code == 0
        blobs.append(((tmp_path / run / "model.dlck").read_bytes(), (tmp_path / run / "log.csv").read_bytes()))
    ok = blobs[0] == blobs[1]
    record("C8 determinism", ok, f"checkpoints {len(blobs[0][0])} bytes and CSV logs "
                                 f"{'identical' if ok else 'differ'} across two cmd_train runs")
