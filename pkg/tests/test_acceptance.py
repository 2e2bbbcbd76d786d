"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines next
to the measured numbers; under plain ``pytest -v`` they still appear because
printing bypasses output capture.
"""

import json
import time

import numpy as np
import pytest

from cascadecl.cascade import group_cascades, infer_edges
from cascadecl.cli import main
from cascadecl.continual import LAMBDA_GRID, ContinualParams, FisherState, Method, _penalty
from cascadecl.experiment import (DEFAULT_REPEATS, TRAIN_FRAC, ExperimentSpec, compute_metrics, run_incremental,
                                  split)
from cascadecl.model import DiffPoolModel, ModelConfig, diffpool_level
from cascadecl.autodiff import Tensor
from cascadecl.training import TrainConfig

from conftest import random_cascade_records, random_graph
from gradcheck import TOL, check_op, model_grad_check, primitive_cases
from test_cascade import brute_force_edges
from test_experiment import confusion_oracle
from test_features import check_hop2, random_mention_graph
from test_model import permutation_check

GEM_SIZES = (100, 200, 300)
PHASE2 = TrainConfig(epochs=10)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


# -- 1: paper-shaped tables from FakeNewsNet-format inputs ---------------------


def test_criterion_1_table_shapes(tmp_path, verdict):
    gen = tmp_path / "gen"
    assert main(["gen-synth", "--out", str(gen), "--n-news", "24", "--seed", "3"]) == 0
    runs = []
    for name in ("A", "B"):
        src = gen / name
        for mode in ("profile", "timeline", "combined"):
            arch = tmp_path / f"{name}-{mode}" / name
            assert main(["build", "--tweets", str(src / "tweets.jsonl"), "--users", str(src / "users.jsonl"),
                         "--labels", str(src / "labels.jsonl"), "--timelines", str(src / "timelines.jsonl"),
                         "--out", str(arch), "--mode", mode, "--clip-tweets", "100"]) == 0
            run = tmp_path / "runs" / f"{name}-{mode}"
            assert main(["train", "--data", str(arch), "--out", str(run), "--epochs", "2", "--repeats", "2"]) == 0
            runs.append(str(run))
    for lam in ("1", "100000"):
        run = tmp_path / "runs" / f"ewc-{lam}"
        assert main(["train-incremental", "--data1", str(gen / "A"), "--data2", str(gen / "B"), "--out", str(run),
                     "--method", "ewc", "--lambda", lam, "--epochs", "2", "--phase2-epochs", "1",
                     "--repeats", "1", "--fisher-samples", "10"]) == 0
        runs.append(str(run))
    t1, t2 = tmp_path / "table1.csv", tmp_path / "table2.csv"
    assert main(["report", "--runs", *runs, "--out", str(tmp_path / "all.csv"), "--table1", str(t1),
                 "--table2", str(t2)]) == 0
    rows1 = [r.split(",") for r in t1.read_text().splitlines()]
    rows2 = [r.split(",") for r in t2.read_text().splitlines()]
    ok = (rows1[0] == ["Dataset", "Metric", "User profile features only", "Timeline tweets features only",
                       "Combined"]
          and len(rows1) == 1 + 2 * 4 and all(len(r) == 5 and r[2] and r[3] and r[4] for r in rows1[1:])
          and [r[1] for r in rows1[1:5]] == ["Accuracy", "Precision", "Recall", "F1"]
          and rows2[0] == ["lambda", "A Acc", "A Pre", "A Rec", "A F1", "B Acc", "B Pre", "B Rec", "B F1"]
          and [r[0] for r in rows2[1:]] == ["1", "100000"] and all(len(r) == 9 for r in rows2))
    verdict(1, ok, "Table 1 (2 datasets x 4 metrics x 3 feature sets) and Table 2 (lambda x 2 datasets x 4 "
                   "metrics) emitted; numeric agreement needs the real corpus and is not gated")
    assert ok


# -- 2: finite-difference gradients --------------------------------------------


def test_criterion_2_gradients(verdict):
    start = time.perf_counter()
    worst_prim, worst_model = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for _, build, inputs in primitive_cases(rng):
            worst_prim = max(worst_prim, check_op(build, inputs, seed))
        worst_model = max(worst_model, model_grad_check(seed))
    elapsed = time.perf_counter() - start
    ok = worst_prim < TOL and worst_model < TOL and elapsed < 60
    verdict(2, ok, f"20 seeds; worst rel. error primitives {worst_prim:.2e}, model {worst_model:.2e}; "
                   f"{elapsed:.1f} s")
    assert ok


# -- 3: GNN invariances ----------------------------------------------------------


def test_criterion_3_gnn_properties(verdict):
    rng = np.random.default_rng(33)
    model = DiffPoolModel(ModelConfig(seed=3))
    perm = max(permutation_check(model, random_graph(rng, n=int(rng.integers(3, 60))), rng) for _ in range(10))
    A = (rng.random((9, 9)) < 0.4).astype(float)
    Z = rng.normal(size=(9, 5))
    out = diffpool_level(Tensor(A), Tensor(Z), Tensor(rng.normal(size=(9, 1))))
    collapse = max(float(np.max(np.abs(out.emb.data - Z.sum(axis=0, keepdims=True)))),
                   abs(out.adj.item() - A.sum()))
    g = random_graph(rng, n=12)
    iso = float(np.max(np.abs(model.logits(g) - model.logits(g.permuted(rng.permutation(12))))))
    ok = perm < 1e-9 and collapse < 1e-12 and iso < 1e-9
    verdict(3, ok, f"permutation {perm:.1e}, n'=1 collapse {collapse:.1e}, isomorphic pair {iso:.1e}")
    assert ok


# -- 4: pipeline oracles ------------------------------------------------------------


def test_criterion_4_pipeline_oracles(verdict):
    rng = np.random.default_rng(44)
    edge_ok = 0
    for k in range(200):
        n = int(rng.integers(1, 21))
        tweets, users = random_cascade_records(rng, n, n_users=max(1, n // 2))
        (c,) = group_cascades(tweets)
        w = float(rng.uniform(1, 10))
        edge_ok += infer_edges(c, users, w, k % 2 == 1) == brute_force_edges(c, users, w, k % 2 == 1)
    hop_ok = 0
    for _ in range(100):
        try:
            check_hop2(*random_mention_graph(rng, int(rng.integers(1, 31))))
            hop_ok += 1
        except AssertionError:
            pass
    ok = edge_ok == 200 and hop_ok == 100
    verdict(4, ok, f"edges exact on {edge_ok}/200 cascades, hop-2 exact on {hop_ok}/100 mention graphs")
    assert ok


# -- 5, 6, 8: naive forgetting and the paired naive/GEM run ---------------------------


def _incremental(datasets, methods):
    spec = ExperimentSpec(datasets, ("A", "B"), phase2=PHASE2, continual=methods, seed=0, scenario="acceptance")
    start = time.perf_counter()
    report = run_incremental(spec)
    return report, time.perf_counter() - start


@pytest.fixture(scope="module")
def incremental(regime_datasets):
    methods = (ContinualParams(Method.NAIVE),) + tuple(ContinualParams(Method.GEM, mem_size=m) for m in GEM_SIZES)
    return _incremental(regime_datasets[:2], methods)


def test_criterion_5_forgetting(regime_datasets, verdict):
    # timed on its own: phase 1 and naive phase 2, nothing else
    report, elapsed = _incremental(regime_datasets[:2], (ContinualParams(Method.NAIVE),))
    before = report.mean("phase1", "phase1", "A").accuracy
    after = report.mean("naive", "phase2", "A").accuracy
    drop = before - after
    ok = drop >= 0.10 and elapsed < 20 * 60
    verdict(5, ok, f"task-A accuracy {before:.3f} after phase 1, {after:.3f} after naive phase 2 "
                   f"(drop {drop:.3f}, {DEFAULT_REPEATS} repeats) in {elapsed / 60:.1f} min")
    assert ok


def test_criterion_6_gem(incremental, verdict):
    report, _ = incremental
    naive_a = report.mean("naive", "phase2", "A").accuracy
    naive_b = report.mean("naive", "phase2", "B").accuracy
    parts, ok = [], True
    for m in GEM_SIZES:
        name = f"gem-m{m}"
        a = report.mean(name, "phase2", "A").accuracy
        b = report.mean(name, "phase2", "B").accuracy
        audits = [report.extra[f"{name}/{i}"]["gem_audit"] for i in range(DEFAULT_REPEATS)]
        audit_ok = all(x["max_memory_loss"] is None or x["max_memory_loss"] <= x["ref_loss"] + 1e-6 for x in audits)
        accepted = sum(x["accepted"] for x in audits)
        violations = sum(h["constraint_violations"] for i in range(DEFAULT_REPEATS)
                         for h in report.histories[f"{name}/{i}"])
        ok &= a >= naive_a + 0.05 and abs(b - naive_b) <= 0.10 and audit_ok and violations == 0
        parts.append(f"|M|={m}: A {a:.3f} B {b:.3f}, {accepted} accepted steps audited")
    verdict(6, ok, f"naive A {naive_a:.3f} B {naive_b:.3f}; " + "; ".join(parts))
    assert ok


def test_criterion_8_protocol(incremental, regime_datasets, verdict):
    report, _ = incremental
    dsa = regime_datasets[0]
    tr, te = split(dsa, seed=0)
    split_ok = TRAIN_FRAC == 0.75 and len(tr) == 300 and len(te) == 100
    counts = {s["repeats"] for s in report.summary()}
    rng = np.random.default_rng(8)
    exact = 0
    for _ in range(50):
        n = int(rng.integers(1, 60))
        y, p = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
        got = compute_metrics(p, y).as_tuple()
        exact += all(abs(a - float(b)) <= 1e-15 for a, b in zip(got, confusion_oracle(p, y)))
    ok = split_ok and counts == {5} and DEFAULT_REPEATS == 5 and exact == 50
    verdict(8, ok, f"split {len(tr)}/{len(te)} of {len(dsa)}; repeats per report group {sorted(counts)}; "
                   f"metrics exact on {exact}/50 random vectors")
    assert ok


# -- 7: EWC --------------------------------------------------------------------------


def test_criterion_7_ewc(regime_datasets, verdict):
    dsa, dsb = regime_datasets[:2]
    model = DiffPoolModel(ModelConfig(seed=0))
    theta = model.params.flatten()
    at_star = _penalty(model, FisherState(theta, np.abs(theta) + 1.0, 1e5)).item()
    methods = (ContinualParams(Method.NAIVE),) + tuple(ContinualParams(Method.EWC, lam=lam) for lam in LAMBDA_GRID)
    spec = ExperimentSpec((dsa, dsb), ("A", "B"), phase2=PHASE2, continual=methods, seed=0)
    report = run_incremental(spec)
    naive_a = report.mean("naive", "phase2", "A").accuracy
    ewc = {lam: report.mean(f"ewc-l{lam:g}", "phase2", "A").accuracy for lam in LAMBDA_GRID}
    best = max(ewc, key=ewc.get)
    drift_hi = [report.extra[f"ewc-l100000/{i}"]["drift"] for i in range(DEFAULT_REPEATS)]
    drift_lo = [report.extra[f"ewc-l1/{i}"]["drift"] for i in range(DEFAULT_REPEATS)]
    drift_ok = all(h < lo for h, lo in zip(drift_hi, drift_lo))
    ok = at_star == 0.0 and drift_ok and ewc[best] >= naive_a + 0.03
    pairs = ", ".join(f"{h:.3f}{'<' if h < lo else '>='}{lo:.3f}" for h, lo in zip(drift_hi, drift_lo))
    # not gated: the same comparison in the Fisher-weighted norm
    weighted = ", ".join(f"{report.extra[f'ewc-l100000/{i}']['fisher_drift']:.4f}"
                         f" vs {report.extra[f'ewc-l1/{i}']['fisher_drift']:.4f}" for i in range(DEFAULT_REPEATS))
    verdict(7, ok, f"penalty at theta* {at_star}; drift lambda=1e5 vs lambda=1 per seed: {pairs} "
                   f"(Fisher-weighted: {weighted}); "
                   f"best lambda {best:g} keeps task-A {ewc[best]:.3f} vs naive {naive_a:.3f} "
                   f"({DEFAULT_REPEATS} repeats)")
    assert ok


# -- 9: determinism through the CLI -----------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path, verdict):
    outputs = {}
    for k in range(2):
        root = tmp_path / f"try{k}"
        gen = root / "gen"
        assert main(["gen-synth", "--out", str(gen), "--n-news", "24", "--seed", "7"]) == 0
        runs = {
            "train": ["train", "--data", str(gen / "A"), "--out", str(root / "train"), "--seed", "7",
                      "--epochs", "3", "--repeats", "2"],
            "inc": ["train-incremental", "--data1", str(gen / "A"), "--data2", str(gen / "B"),
                    "--out", str(root / "inc"), "--seed", "7", "--method", "gem", "--mem-size", "10",
                    "--epochs", "3", "--phase2-epochs", "2", "--repeats", "2"],
        }
        for name, argv in runs.items():
            assert main(argv) == 0
            outputs.setdefault(name, []).append((root / name / "report.csv").read_bytes())
        assert main(["report", "--runs", str(root / "train"), str(root / "inc"), "--out", str(root / "m.csv")]) == 0
        outputs.setdefault("report", []).append((root / "m.csv").read_bytes())
        outputs.setdefault("archive", []).append((gen / "A" / "graphs.bin").read_bytes())
    same = {k: v[0] == v[1] for k, v in outputs.items()}
    ok = all(same.values())
    verdict(9, ok, "byte-identical outputs across two invocations: " + json.dumps(same))
    assert ok
