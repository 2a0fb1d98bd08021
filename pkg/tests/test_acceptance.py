"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary under "acceptance criteria".
"""
import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, hand_pe
from test_metrics import recount
from test_stage1 import brute_force_stump
from stagedetect._trees import LEAF
from stagedetect.agent import PAYLOAD_SENTINEL, Status, fixture_stream, map_hash, replay, rollback
from stagedetect.bundle import ModelBundle
from stagedetect.cli import cmd_generate_data, cmd_train, load_dataset
from stagedetect.config import RunConfig
from stagedetect.dataset import (
    Dataset,
    DatasetSchema,
    LabeledSample,
    smote,
    stratified_kfold,
)
from stagedetect.features import PE_LAYOUT, PeParseError, extract_static, parse_pe_header
from stagedetect.metrics import compute_metrics, confusion
from stagedetect.stage1_static import fit_tree
from stagedetect.stage2_sequence import LstmParams, gradient_check
from stagedetect.stage3_fusion import run_pipeline

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk_benchmark.json"


def record(name: str, ok: bool, detail: str, elapsed: float | None = None, budget: float | None = None):
    if elapsed is not None and budget is not None:
        ok = ok and elapsed < budget
        detail += f"; {elapsed:.2f}s (budget {budget:g}s)"
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_metrics_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        t, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        rep = compute_metrics(confusion(t, p))
        for name, exact in recount(t.tolist(), p.tolist()).items():
            worst = max(worst, abs(getattr(rep, name) - float(exact)))
    record("metrics oracle", worst <= 1e-12, f"1000 pairs, max abs error {worst:.1e}",
           time.perf_counter() - start, 5)


def test_lstm_gradient_check():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    errs = []
    for draw in range(5):
        m, H, T = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
        p = LstmParams.init(m, H, scale=0.5, seed=draw)
        errs.append(gradient_check(p, (rng.normal(size=(T, m)), draw % 2), eps=1e-5))
    record("LSTM gradient check", max(errs) < 1e-4,
           f"5 draws (m,H<=4, T<=6), max relative error {max(errs):.1e}",
           time.perf_counter() - start, 60)


def test_smote_geometry():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, 2)) * [3.0, 0.5] + [1.0, -2.0]
    start = time.perf_counter()
    out, (src, nbr, u) = smote(X, 5, target=540, seed=3, return_provenance=True)
    a, b = X[src], X[nbr]
    d, r = b - a, out - a
    resid = np.abs(d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]).max()
    in_unit = bool(np.all((u >= 0) & (u <= 1)))
    lo, hi = X.min(axis=0), X.max(axis=0)
    in_box = bool(np.all((out >= lo) & (out <= hi)))
    record("SMOTE geometry", out.shape == (500, 2) and resid < 1e-9 and in_unit and in_box,
           f"500 synthetics, colinearity residual {resid:.1e}, u in [0,1]: {in_unit}, in box: {in_box}",
           time.perf_counter() - start, 5)


def test_stratification():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = 0.0
    partitions_ok = True
    for trial in range(50):
        size = int(rng.integers(20, 501))
        k = int(rng.choice([2, 5, 10]))
        n_pos = max(k, int(round(size * rng.uniform(0.05, 0.5))))
        n_pos = min(n_pos, size - k)
        labels = np.r_[np.ones(n_pos, int), np.zeros(size - n_pos, int)][rng.permutation(size)]
        ds = Dataset(tuple(LabeledSample(f"r{i}", np.zeros(1), {}, int(y)) for i, y in enumerate(labels)),
                     DatasetSchema(1))
        plan = stratified_kfold(ds, k, seed=trial)
        folds = plan.folds()
        partitions_ok &= sorted(i for f in folds for i in f) == sorted(ds.ids)
        lab = dict(zip(ds.ids, labels))
        for f in folds:
            worst = max(worst, abs(sum(lab[i] for i in f) - n_pos / k))
    record("stratification", partitions_ok and worst <= 1,
           f"50 datasets, partition: {partitions_ok}, max per-fold positive deviation {worst:.2f}",
           time.perf_counter() - start, 5)


def test_forest_vs_brute_force():
    rng = np.random.default_rng(13)
    start = time.perf_counter()
    agree = 0
    for _ in range(20):
        n = int(rng.integers(4, 13))
        X = rng.integers(-3, 4, size=(n, 2)).astype(float)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        tree = fit_tree(X, y, max_depth=1)
        oracle = brute_force_stump(X, y)
        got = None if tree.feature[0] == LEAF else (int(tree.feature[0]), float(tree.threshold[0]))
        agree += oracle == got
    record("forest vs brute force", agree == 20, f"{agree}/20 depth-1 trees match exact Gini search",
           time.perf_counter() - start, 5)


def test_parser_truncation():
    data = hand_pe()
    start = time.perf_counter()
    crashes = []
    for cut in range(len(data) + 1):
        try:
            try:
                parse_pe_header(data[:cut])
            except PeParseError:
                pass
            v = extract_static(data[:cut]).values
            if v.shape != (PE_LAYOUT.n,) or not np.isfinite(v).all():
                crashes.append(cut)
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes.append(cut)
    record("parser truncation", not crashes,
           f"{len(data) + 1} prefixes, {len(crashes)} crashes", time.perf_counter() - start, 5)


# --- desk benchmark ---------------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = RunConfig.load(DESK_CONFIG)
    root = tmp_path_factory.mktemp("desk")
    cmd_generate_data(cfg, root / "data")
    start = time.perf_counter()
    metrics = cmd_train(cfg, root / "data" / "dataset.jsonl", root / "run1")
    elapsed = time.perf_counter() - start
    return cfg, root, metrics, elapsed


@pytest.mark.slow
def test_end_to_end(desk):
    cfg, root, metrics, elapsed = desk
    pooled = metrics["pooled"]
    record("end-to-end desk benchmark",
           pooled["n_samples"] == 2000 and pooled["accuracy"] >= 0.95 and pooled["fpr"] <= 0.05,
           f"2000 samples, {cfg.k_folds}-fold, pooled accuracy {pooled['accuracy']:.4f}, "
           f"FPR {pooled['fpr']:.4f}, recall {pooled['recall']:.4f}", elapsed, 600)


@pytest.mark.slow
def test_latency(desk):
    _, root, _, _ = desk
    timing = json.loads((root / "run1" / "timing.json").read_text())
    lat, model = timing["latency_ms_inclusive"], timing["latency_ms_model_only"]
    record("latency", 0 < lat < 250,
           f"{lat:.3f} ms/sample inclusive, {model:.3f} ms/sample model-only (budget 250 ms)")


@pytest.mark.slow
def test_determinism(desk):
    cfg, root, _, _ = desk
    cmd_train(cfg, root / "data" / "dataset.jsonl", root / "run2")
    same_metrics = (root / "run1" / "metrics.json").read_bytes() == (root / "run2" / "metrics.json").read_bytes()
    b1 = ModelBundle.load(root / "run1" / "bundle.json")
    b2 = ModelBundle.load(root / "run2" / "bundle.json")
    ds = load_dataset(cfg, root / "data" / "dataset.jsonl")
    rng = np.random.default_rng(99)
    mismatches = 0
    for k in range(100):
        s = ds.samples[int(rng.integers(len(ds)))]
        s = dataclasses.replace(s, static=s.static + rng.normal(scale=1.0, size=s.static.shape))
        v1, v2 = run_pipeline(b1, s).to_json(), run_pipeline(b2, s).to_json()
        mismatches += v1 != v2
    record("determinism", same_metrics and mismatches == 0,
           f"metrics.json byte-identical: {same_metrics}; verdict mismatches on 100 fuzzed samples: {mismatches}")


@pytest.mark.slow
def test_agent_fixtures(desk):
    _, root, _, _ = desk
    bundle = ModelBundle.load(root / "run1" / "bundle.json")
    mal = fixture_stream("malicious")
    sentinel = next(i for i, e in enumerate(mal) if e.name == PAYLOAD_SENTINEL)
    initial = {"HKLM/Software/Microsoft/Windows/CurrentVersion/Run/updater": "C:/Program Files/upd.exe"}
    res = replay(mal, bundle, initial_map=initial)
    quarantines = [t for t in res.transitions if t.new is Status.QUARANTINED]
    before = [t for t in quarantines if t.event_index < sentinel]
    one_each = len(quarantines) == 1 and len(res.alerts) == 1 and len(before) == 1

    benign = replay(fixture_stream("benign"), bundle)
    quiet = len(benign.alerts) == 0

    # the quarantined process's later events are dropped: removing them from the
    # stream altogether gives the same final map hash
    q_idx = quarantines[0].event_index if quarantines else len(mal)
    trimmed = [e for i, e in enumerate(mal) if not (e.pid == 4242 and i > q_idx)]
    oracle = replay(trimmed, bundle, initial_map=initial)
    hash_fixed = map_hash(oracle.system_map) == map_hash(res.system_map)

    clean = replay([e for e in mal if e.pid != 4242], bundle, initial_map=initial)
    restored = rollback(res.journal, 4242, res.system_map, res.states) if quarantines else None
    exact = restored == clean.system_map
    record("agent fixtures", one_each and quiet and hash_fixed and exact,
           f"malicious: {len(quarantines)} quarantine / {len(res.alerts)} alert before sentinel "
           f"(event {q_idx} < {sentinel}); benign alerts: {len(benign.alerts)}; "
           f"post-quarantine hash unchanged: {hash_fixed}; rollback exact: {exact}")


def test_non_reproducibility_statement():
    readme = (ROOT / "README.md").read_text(encoding="utf-8")
    section = readme.split("## Reference targets", 1)[-1].split("\n## ", 1)[0]
    figures = ("97.3%", "97.8%", "1.5%", "25 ms")
    present = all(f in section for f in figures)
    flagged = "not reproduced" in section.lower()
    record("non-reproducibility statement", "## Reference targets" in readme and present and flagged,
           "reference figures 97.3% / 97.8% / 1.5% / 25 ms documented as targets that are not reproduced")
