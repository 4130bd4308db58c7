"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N PASS/FAIL`` line (see ``conftest.py``)
before asserting, so the summary shows every criterion even when one fails.
Scenario sizes are chosen to keep the whole module within a few tens of
minutes on a single CPU core.
"""

import json
import time

import numpy as np
import pytest
import yaml

from conformal_ids.chunking import controller_new, observe
from conformal_ids.cli import main
from conformal_ids.conformal import STRATEGIES, calibrate, p_value
from conformal_ids.neural import (CE_MLP_LAYERS, FNN_LAYERS, TrainConfig, bce_with_logits,
                                  build_ce_mlp, build_mlp, train)
from conformal_ids.stream import SimConfig, run_simulation
from conformal_ids.synthetic import generate_stream, make_spec, shifted_stream_spec

N_FEATURES = 20
U = np.ones(N_FEATURES) / np.sqrt(N_FEATURES)                 # original class axis
V = np.tile([1.0, -1.0], N_FEATURES // 2) / np.sqrt(N_FEATURES)  # orthogonal to U
W = np.tile([1.0, 1.0, -1.0, -1.0], N_FEATURES // 4) / np.sqrt(N_FEATURES)  # orthogonal to U, V

pytestmark = pytest.mark.acceptance


def ce_train_fn(d, epochs=30):
    def fit(X, y, seed):
        return train(build_ce_mlp(d, seed), X, y, TrainConfig(epochs=epochs, seed=seed))
    return fit


# 1 -------------------------------------------------------------------------

def test_criterion_1_validity(criterion):
    start = time.perf_counter()
    spec = make_spec([(6000, -3 * U, 3 * U, 1.0, 0.5)], N_FEATURES, seed=101)
    held_out = make_spec([(20000, -3 * U, 3 * U, 1.0, 0.5)], N_FEATURES, seed=102)
    cal_data, test_data = generate_stream(spec), generate_stream(held_out)
    rates, ok = {}, True
    for strategy in STRATEGIES:
        cal = calibrate(strategy, ce_train_fn(N_FEATURES), cal_data.features, cal_data.labels,
                        alpha=0.05, k=5, seed=7)
        assert min(len(cal.score_buffers[c]) for c in (0, 1)) >= 500
        rejected = cal.nonconforming(test_data.features, test_data.labels)
        for c in (0, 1):
            rate = float(rejected[test_data.labels == c].mean())
            rates[f"{strategy}/{c}"] = round(rate, 4)
            ok &= abs(rate - 0.05) <= 0.03
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 120
    criterion(1, "per-class rejection 0.05 +- 0.03, all strategies", ok,
              f"{rates}, {elapsed:.0f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_2_p_value_oracle(criterion):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        buffer = np.sort(np.round(rng.random(int(rng.integers(1, 500))), 3))
        score = float(np.round(rng.random(), 3)) if rng.random() < 0.5 else float(
            rng.choice(buffer))
        brute = (1 + sum(1 for s in buffer if s >= score)) / (len(buffer) + 1)
        mismatches += p_value(score, buffer) != brute
    criterion(2, "binary-search p-value equals linear count", mismatches == 0,
              f"{mismatches} mismatches in 1000 cases")
    assert mismatches == 0


# 3 -------------------------------------------------------------------------

def fifty_k_stream():
    """20 features, 50k flows: stationary, then a new attack family, then a benign shift."""
    train_table = generate_stream(make_spec([(5000, -3 * U, 3 * U, 1.0, 0.5)], N_FEATURES, 31))
    stream = generate_stream(make_spec([
        (15000, -3 * U, 3 * U, 1.0, 0.5),
        (15000, -3 * U, 4 * V, 1.0, 0.5),
        (20000, -3 * U + 3 * W, 4 * V, 1.0, 0.5),
    ], N_FEATURES, 32))
    return train_table, stream


def test_criterion_3_approx_cce_matches_cce(criterion):
    train_table, stream = fifty_k_stream()
    reports = {}
    for strategy in ("approx_cce", "cce"):
        reports[strategy] = run_simulation(train_table, stream, SimConfig(strategy=strategy,
                                                                          seed=3))
    f1 = {s: r.metrics["ce"]["f1"] for s, r in reports.items()}
    secs = {s: r.runtime_seconds for s, r in reports.items()}
    gap = abs(f1["approx_cce"] - f1["cce"])
    ok = gap <= 0.01 and secs["approx_cce"] < secs["cce"] and sum(secs.values()) <= 900
    calibs = {s: r.n_calibrations for s, r in reports.items()}
    criterion(3, "Approx-CCE F1 within 0.01 of CCE and faster", ok,
              f"F1 {f1['approx_cce']:.4f} vs {f1['cce']:.4f}, "
              f"{secs['approx_cce']:.0f}s vs {secs['cce']:.0f}s, calibrations {calibs}")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_4_adaptive_vs_fixed_one(criterion):
    start = time.perf_counter()
    train_table = generate_stream(make_spec([(2000, -3 * U, 3 * U, 1.0, 0.5)], N_FEATURES, 11))
    stream = generate_stream(make_spec([(600, -3 * U, 3 * U, 1.0, 0.5),
                                        (4000, -3 * U, 4 * V, 1.0, 0.5)], N_FEATURES, 12))
    results = {}
    for chunking in ("adaptive", 1):
        cfg = SimConfig(chunking=chunking, buffer_capacity=1000, seed=1)
        rep = run_simulation(train_table, stream, cfg)
        results[chunking] = (rep.n_calibrations, rep.metrics["ce"]["f1"])
    (n_a, f1_a), (n_1, f1_1) = results["adaptive"], results[1]
    elapsed = time.perf_counter() - start
    ok = n_a <= 0.25 * n_1 and f1_a >= f1_1 - 0.01 and elapsed <= 1200
    criterion(4, "adaptive calibrations <= 0.25x fixed-1, F1 within 0.01", ok,
              f"calibrations {n_a} vs {n_1}, F1 {f1_a:.4f} vs {f1_1:.4f}, {elapsed:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------

def scalar_controller(drifts, chi0, chi_min, chi_max, lam, delta):
    chi, ema, t_drift, t_chunks, trace = chi0, 0.0, 0, 0, []
    for drift in drifts:
        if drift:
            t_drift += 1
        t_chunks += 1
        r = t_drift / t_chunks
        ema = lam * ema + (1 - lam) * r
        if ema > 0.2:
            chi = max(chi_min, chi // 2)
        elif ema < 0.05:
            chi = min(chi_max, chi + delta)
        trace.append(chi)
    return trace


def test_criterion_5_controller_trace_oracle(criterion):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        chi_min = int(rng.integers(1, 100))
        chi_max = int(rng.integers(chi_min, 10000))
        chi0 = int(rng.integers(chi_min, chi_max + 1))
        lam, delta = float(rng.uniform(0.01, 0.99)), int(rng.integers(1, 500))
        drifts = (rng.random(int(rng.integers(1, 300))) < rng.random()).tolist()
        state = controller_new(chi0, chi_min, chi_max, lam, delta)
        got = [observe(state, d) for d in drifts]
        mismatches += got != scalar_controller(drifts, chi0, chi_min, chi_max, lam, delta)
    criterion(5, "controller trace equals scalar reference", mismatches == 0,
              f"{mismatches} mismatching sequences of 1000")
    assert mismatches == 0


# 6 -------------------------------------------------------------------------

def test_criterion_6_drift_responsiveness(criterion):
    hits, outcomes = 0, []
    for seed in range(10):
        train_spec, stream_spec = shifted_stream_spec(seed=seed)
        boundary = stream_spec.boundaries[0]
        rep = run_simulation(generate_stream(train_spec), generate_stream(stream_spec),
                             SimConfig(seed=seed))
        recs = rep.records
        b = next(r["chunk"] for r in recs if r["start"] <= boundary < r["start"] + r["size"])
        first = next((r["chunk"] for r in recs if r["drift"]), None)
        outcomes.append(None if first is None else first - b)
        hits += first is not None and 0 <= first - b <= 3
    ok = hits >= 9
    criterion(6, "first detection within 3 chunks of a 4-sigma shift", ok,
              f"{hits}/10 runs, chunk offsets {outcomes}")
    assert ok


# 7 -------------------------------------------------------------------------

def max_gradient_error(layers, seed):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(6, 3)), rng.integers(0, 2, 6).astype(float)
    model = build_mlp(3, layers, seed=seed)
    _, grads = model.loss_and_grads(X, y, rng=np.random.default_rng(seed + 1))
    worst, h = 0.0, 1e-5
    for name, analytic in grads.items():
        flat = model.params[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 25), replace=False)
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            keep = flat[i]
            losses = []
            for step in (h, -h):
                flat[i] = keep + step
                z = model.forward(X, rng=np.random.default_rng(seed + 1))
                losses.append(bce_with_logits(z, y))
            flat[i] = keep
            numeric[n] = (losses[0] - losses[1]) / (2 * h)
        a = analytic.reshape(-1)[picks]
        worst = max(worst, np.linalg.norm(a - numeric) / max(
            np.linalg.norm(a) + np.linalg.norm(numeric), 1e-12))
    return worst


def test_criterion_7_gradient_check(criterion):
    errors = {"relu_dropout": max_gradient_error(FNN_LAYERS, 70),
              "gelu_layernorm": max_gradient_error(CE_MLP_LAYERS, 71)}
    ok = all(e <= 1e-4 for e in errors.values())
    criterion(7, "analytic vs finite-difference gradients within 1e-4", ok,
              ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))
    assert ok


# 8 -------------------------------------------------------------------------

def test_criterion_8_simulate_determinism(tmp_path, criterion):
    cfg = {
        "data": {
            "train_synthetic": {"n_features": 20, "seed": 80, "segments": [
                {"length": 2000, "benign_mean": -0.6708, "attack_mean": 0.6708}]},
            "stream_synthetic": {"n_features": 20, "seed": 81, "segments": [
                {"length": 2000, "benign_mean": -0.6708, "attack_mean": 0.6708},
                {"length": 2000, "benign_mean": 0.2236, "attack_mean": 0.6708}]},
        },
        "seed": 8,
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    logs = []
    for run in ("a", "b"):
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / run)]) == 0
        events = [json.loads(line) for line in (tmp_path / run / "events.jsonl").open()]
        logs.append([{k: v for k, v in e.items() if not k.endswith("_seconds")}
                     for e in events])
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    n_retrain = sum(e["retrain"] for e in logs[0])
    criterion(8, "identical event logs modulo timing", ok,
              f"{len(logs[0])} records, {n_retrain} retrains")
    assert ok


# 9 -------------------------------------------------------------------------

def test_criterion_9_stationary_no_retrain(criterion):
    counts = []
    for seed in (0, 1, 2):
        train_spec, stream_spec = shifted_stream_spec(shift_sigmas=0.0, seed=seed)
        rep = run_simulation(generate_stream(train_spec), generate_stream(stream_spec),
                             SimConfig(seed=seed))
        counts.append(rep.n_calibrations)
    ok = all(c == 0 for c in counts)
    criterion(9, "stationary stream triggers no recalibration", ok,
              f"calibrations per seed {counts}")
    assert ok
