"""Evaluation protocol: stratified splits, repeated runs, metrics and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .cascade import DEFAULT_WINDOW_H, ClipSpec, PropagationGraph
from .continual import ContinualParams, Method, parameter_drift, train_incremental
from .dataset import GraphDataset, atomic_write, build_dataset
from .errors import ConfigError, EmptyInput, IncompatibleCheckpoint, LengthMismatch, TooSmall
from .features import FeatureMode, NormStats, fit_norm
from .model import DiffPoolModel, ModelConfig, load_checkpoint
from .records import RawRecords
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

TRAIN_FRAC = 0.75
DEFAULT_REPEATS = 5
METRIC_NAMES = ("accuracy", "precision", "recall", "f1")
CSV_COLUMNS = ("scenario", "phase", "dataset", "repeat", "acc", "pre", "rec", "f1")


# -- splits and metrics -------------------------------------------------------


def split_indices(labels: Sequence[int], frac: float = TRAIN_FRAC, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split; the train side gets ``ceil(frac * N)`` items.

    The train total is shared between classes by largest remainder (ties go
    to the smaller class id), and each class is shuffled and cut at its quota.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 4:
        raise TooSmall(f"split needs at least 4 items, got {n}")
    if not 0.0 < frac < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {frac}")
    total = math.ceil(frac * n)
    classes = sorted(set(labels.tolist()))
    counts = [int((labels == c).sum()) for c in classes]
    ideal = [total * k / n for k in counts]
    quota = [min(k, math.floor(x)) for k, x in zip(counts, ideal)]
    order = sorted(range(len(classes)), key=lambda i: (-(ideal[i] - math.floor(ideal[i])), i))
    left = total - sum(quota)
    while left > 0:
        for i in order:
            if left and quota[i] < counts[i]:
                quota[i] += 1
                left -= 1
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        train.extend(members[:q].tolist())
        test.extend(members[q:].tolist())
    return np.array(sorted(train), dtype=int), np.array(sorted(test), dtype=int)


def split(dataset: GraphDataset, frac: float = TRAIN_FRAC, seed: int = 0) -> tuple[GraphDataset, GraphDataset]:
    tr, te = split_indices(dataset.labels, frac, seed)
    return dataset.subset(tr), dataset.subset(te)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.accuracy, self.precision, self.recall, self.f1)


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> Metrics:
    """Accuracy plus macro precision, recall and F1 over the classes seen in either input.

    A class that is never predicted has undefined precision, counted as 0.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) != len(y):
        raise LengthMismatch(f"{len(p)} predictions for {len(y)} labels")
    if len(y) == 0:
        raise EmptyInput("metrics need at least one prediction")
    classes = sorted(set(y.tolist()) | set(p.tolist()))
    pre, rec, f1 = [], [], []
    for c in classes:
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        if tp + fp == 0:
            log.debug("class %s never predicted; precision counted as 0", c)
        pc = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        pre.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    return Metrics(float(np.mean(p == y)), float(np.mean(pre)), float(np.mean(rec)), float(np.mean(f1)))


def evaluate(model: DiffPoolModel, graphs: Sequence[PropagationGraph]) -> Metrics:
    return compute_metrics(model.predict(graphs), [g.label for g in graphs])


def apply_norm(graphs: Iterable[PropagationGraph], norm: NormStats) -> list[PropagationGraph]:
    return [replace(g, features=norm.apply(g.features)) for g in graphs]


# -- specs and reports --------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment. ``continual`` lists the phase-2 methods to compare on the same phase-1 models."""

    datasets: tuple[GraphDataset, ...]
    dataset_names: tuple[str, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phase2: TrainConfig | None = None
    continual: tuple[ContinualParams, ...] = (ContinualParams(),)
    repeats: int = DEFAULT_REPEATS
    seed: int = 0
    frac: float = TRAIN_FRAC
    scenario: str = "single"
    jobs: int = 1
    # incremental runs only: start phase 2 from this phase-1 checkpoint instead of training one
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        if self.dataset_names and len(self.dataset_names) != len(self.datasets):
            raise ConfigError("one name per dataset required")

    def names(self) -> tuple[str, ...]:
        return self.dataset_names or tuple(f"D{i + 1}" for i in range(len(self.datasets)))

    def echo(self) -> dict:
        return {
            "scenario": self.scenario,
            "datasets": list(self.names()),
            "dataset_info": [{k: v for k, v in ds.info.items()} for ds in self.datasets],
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "phase2": self.phase2.to_dict() if self.phase2 else None,
            "continual": [_continual_dict(c) for c in self.continual],
            "repeats": self.repeats,
            "seed": self.seed,
            "frac": self.frac,
            "stratified": True,
            "averaging": "macro",
            "init_checkpoint": self.init_checkpoint,
        }


def _continual_dict(c: ContinualParams) -> dict:
    d = asdict(c)
    d["method"] = Method(c.method).value
    return d


@dataclass
class ExperimentReport:
    rows: list[dict]
    config: dict
    wall_clock_s: float = 0.0
    histories: dict[str, list[dict]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    # repeat-0 models by scenario with the normalization they expect; not serialized
    models: dict = field(default_factory=dict, repr=False)

    def groups(self) -> list[tuple[str, str, str]]:
        seen = []
        for r in self.rows:
            key = (r["scenario"], r["phase"], r["dataset"])
            if key not in seen:
                seen.append(key)
        return seen

    def select(self, scenario: str | None = None, phase: str | None = None, dataset: str | None = None) -> list[dict]:
        return [r for r in self.rows
                if (scenario is None or r["scenario"] == scenario)
                and (phase is None or r["phase"] == phase)
                and (dataset is None or r["dataset"] == dataset)]

    def mean(self, scenario: str, phase: str, dataset: str) -> Metrics:
        rows = self.select(scenario, phase, dataset)
        if not rows:
            raise KeyError((scenario, phase, dataset))
        return Metrics(*(float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES))

    def std(self, scenario: str, phase: str, dataset: str) -> Metrics:
        rows = self.select(scenario, phase, dataset)
        return Metrics(*(float(np.std([r[m] for r in rows])) for m in METRIC_NAMES))

    def summary(self) -> list[dict]:
        out = []
        for s, p, d in self.groups():
            mean, std = self.mean(s, p, d), self.std(s, p, d)
            out.append({"scenario": s, "phase": p, "dataset": d, "repeats": len(self.select(s, p, d)),
                        "mean": mean.to_dict(), "std": std.to_dict()})
        return out

    def to_json(self) -> dict:
        return {"config": self.config, "rows": self.rows, "summary": self.summary(),
                "histories": self.histories, "extra": self.extra, "wall_clock_s": self.wall_clock_s}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows: Iterable[dict]) -> str:
    """Flat CSV with fixed columns; floats printed with repr precision for exact round trips."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r["scenario"], r["phase"], r["dataset"], r["repeat"],
                    repr(r["accuracy"]), repr(r["precision"]), repr(r["recall"]), repr(r["f1"])])
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"scenario": r["scenario"], "phase": r["phase"], "dataset": r["dataset"],
                     "repeat": int(r["repeat"]), "accuracy": float(r["acc"]), "precision": float(r["pre"]),
                     "recall": float(r["rec"]), "f1": float(r["f1"])})
    return rows


def write_report(report: ExperimentReport, directory) -> None:
    """``report.json`` (everything, including wall-clock) and ``report.csv`` (metrics only, deterministic)."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write(directory / "report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    atomic_write(directory / "report.csv", report.to_csv())


def _row(scenario: str, phase: str, dataset: str, repeat: int, m: Metrics) -> dict:
    return {"scenario": scenario, "phase": phase, "dataset": dataset, "repeat": repeat, **m.to_dict()}


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- single-dataset runs ------------------------------------------------------


def train_single(dataset: GraphDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int,
                 frac: float = TRAIN_FRAC):
    """One split/normalize/train cycle. Returns (model, norm, normalized train, normalized test)."""
    train, test = split(dataset, frac, seed)
    norm = fit_norm([g.features for g in train], dataset.mode)
    tr, te = apply_norm(train, norm), apply_norm(test, norm)
    model = DiffPoolModel(replace(model_cfg, input_dim=dataset.d, seed=seed))
    fit(model, tr, replace(train_cfg, seed=seed))
    return model, norm, tr, te


def _single_repeat(args):
    spec, i = args
    s = spec.seed + i
    model, norm, _, te = train_single(spec.datasets[0], spec.model, spec.train, s, spec.frac)
    row = _row(spec.scenario, "test", spec.names()[0], i, evaluate(model, te))
    return row, ((model, norm) if i == 0 else None)


def run_single(spec: ExperimentSpec) -> ExperimentReport:
    """``repeats`` independent split/train/evaluate cycles with seeds ``seed + i``."""
    start = time.perf_counter()
    parts = _map(_single_repeat, [(spec, i) for i in range(spec.repeats)], spec.jobs)
    report = ExperimentReport([p[0] for p in parts], spec.echo())
    report.models[spec.scenario] = parts[0][1]
    report.extra["statistics"] = {n: ds.stats() for n, ds in zip(spec.names(), spec.datasets)}
    report.wall_clock_s = time.perf_counter() - start
    return report


# -- incremental runs ---------------------------------------------------------


def scenario_name(c: ContinualParams) -> str:
    m = Method(c.method)
    if m is Method.GEM:
        return f"gem-m{c.mem_size}"
    if m is Method.EWC:
        return f"ewc-l{c.lam:g}"
    return "naive"


def _phase1_from_checkpoint(spec: ExperimentSpec, seed: int):
    ckpt = load_checkpoint(spec.init_checkpoint)
    d1 = spec.datasets[0]
    check_compatible(ckpt.model, d1.d)
    norm = ckpt.norm if ckpt.norm is not None else NormStats.identity(d1.d)
    train, test = split(d1, spec.frac, seed)
    return ckpt.model, norm, apply_norm(train, norm), apply_norm(test, norm)


def check_compatible(model: DiffPoolModel, d: int) -> None:
    if model.config.input_dim != d:
        raise IncompatibleCheckpoint(f"checkpoint expects feature dim {model.config.input_dim}, "
                                     f"dataset has feature dim {d}")


def _incremental_repeat(args):
    spec, i = args
    s = spec.seed + i
    d1, d2 = spec.datasets
    n1, n2 = spec.names()
    if spec.init_checkpoint:
        model1, norm, tr1, te1 = _phase1_from_checkpoint(spec, s)
    else:
        model1, norm, tr1, te1 = train_single(d1, spec.model, spec.train, s, spec.frac)
    train2, test2 = split(d2, spec.frac, s)
    tr2, te2 = apply_norm(train2, norm), apply_norm(test2, norm)
    rows = [_row("phase1", "phase1", n1, i, evaluate(model1, te1)),
            _row("phase1", "phase1", n2, i, evaluate(model1, te2))]
    histories, extra, models = {}, {}, {}
    phase2 = spec.phase2 or spec.train
    for c in spec.continual:
        name = scenario_name(c)
        model = model1.clone()

        def on_epoch(m, te1=te1, te2=te2):
            a, b = evaluate(m, te1), evaluate(m, te2)
            return {**{f"task1_{k}": v for k, v in zip(("acc", "pre", "rec", "f1"), a.as_tuple())},
                    **{f"task2_{k}": v for k, v in zip(("acc", "pre", "rec", "f1"), b.as_tuple())}}

        d2_train, d1_val, d2_val = tr2, (), ()
        if Method(c.method) is Method.EWC:
            d2_train, d2_val = _holdout(tr2, c.ewc_val_frac, s)
            _, d1_val = _holdout(tr1, c.ewc_val_frac, s)
        result = train_incremental(model, d2_train, c, replace(phase2, seed=s), d1_train=tr1,
                                   evaluate=on_epoch, d1_val=d1_val, d2_val=d2_val)
        rows.append(_row(name, "phase2", n1, i, evaluate(model, te1)))
        rows.append(_row(name, "phase2", n2, i, evaluate(model, te2)))
        histories[f"{name}/{i}"] = result.history
        info = {"epochs_run": result.epochs_run,
                "drift": parameter_drift(model, model1.params.flatten())}
        if result.fisher is not None:
            # drift measured in the metric the penalty actually controls
            d = model.params.flatten() - result.fisher.theta_star
            info["fisher_drift"] = float(np.sqrt(np.sum(result.fisher.fisher_diag * d * d)))
        if result.audit is not None:
            a = result.audit
            info["gem_audit"] = {"steps": a.steps, "accepted": a.accepted, "rejected": a.rejected,
                                 "projected": a.projected, "zero_memory_grad": a.zero_memory_grad,
                                 "ref_loss": result.memory.ref_loss,
                                 "max_memory_loss": max(a.memory_losses) if a.memory_losses else None}
        extra[f"{name}/{i}"] = info
        if i == 0:
            models[name] = (model, norm)
    return rows, histories, extra, models


def _holdout(graphs: Sequence[PropagationGraph], frac: float, seed: int):
    """Stratified ``(1 - frac, frac)`` cut of a training split."""
    if len(graphs) < 4 or frac <= 0:
        return list(graphs), list(graphs)
    keep, held = split_indices([g.label for g in graphs], 1.0 - frac, seed)
    return [graphs[k] for k in keep], [graphs[k] for k in held]


def run_incremental(spec: ExperimentSpec) -> ExperimentReport:
    """Phase 1 on the first dataset, then every method in ``spec.continual`` from the same phase-1 model.

    Rows: ``phase1`` metrics on both test splits, then per method the
    ``phase2`` metrics on both. All methods of a repeat share split and seed.
    """
    if len(spec.datasets) != 2:
        raise ConfigError("incremental runs need exactly two datasets")
    if spec.init_checkpoint and spec.repeats != 1:
        raise ConfigError("a phase-1 checkpoint fixes the first model; use repeats=1")
    d1, d2 = spec.datasets
    if d1.d != d2.d:
        raise ConfigError(f"datasets disagree on feature dim: {d1.d} vs {d2.d}")
    start = time.perf_counter()
    parts = _map(_incremental_repeat, [(spec, i) for i in range(spec.repeats)], spec.jobs)
    rows = [r for p in parts for r in p[0] if r["phase"] == "phase1"]
    rows += [r for p in parts for r in p[0] if r["phase"] == "phase2"]
    report = ExperimentReport(rows, spec.echo())
    for _, h, e, _ in parts:
        report.histories.update(h)
        report.extra.update(e)
    report.models.update(parts[0][3])
    report.wall_clock_s = time.perf_counter() - start
    return report


def history_csv(history: Sequence[dict]) -> str:
    cols = ["epoch"] + [f"task{t}_{m}" for t in (1, 2) for m in ("acc", "pre", "rec", "f1")] + \
        ["constraint_violations"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for h in history:
        w.writerow([h.get(c, "") for c in cols])
    return buf.getvalue()


# -- early-detection sweeps ---------------------------------------------------


def clip_sweep(records: RawRecords, clips: Sequence[ClipSpec | None], spec: ExperimentSpec, *,
               mode: FeatureMode = FeatureMode.PROFILE, time_window_h: float = DEFAULT_WINDOW_H,
               use_follow: bool = False) -> list[ExperimentReport]:
    """One report per bound (``None`` = unclipped), built from the same raw records and seeds."""
    reports = []
    for clip in clips:
        ds = build_dataset(records.tweets, records.users, records.labels, clip=clip, time_window_h=time_window_h,
                           use_follow=use_follow, mode=mode, timelines=records.timelines)
        label = clip.label() if clip else "full"
        sub = replace(spec, datasets=(ds,), dataset_names=(spec.names()[0],), scenario=f"clip-{label}")
        reports.append(run_single(sub))
    return reports


# -- paper-shaped tables ------------------------------------------------------

_METRIC_LABELS = (("Accuracy", "accuracy"), ("Precision", "precision"), ("Recall", "recall"), ("F1", "f1"))
MODE_COLUMNS = (("profile", "User profile features only"), ("timeline", "Timeline tweets features only"),
                ("combined", "Combined"))


def table1(results: dict[tuple[str, str], Metrics], datasets: Sequence[str]) -> list[list[str]]:
    """Dataset x metric rows against feature-mode columns; ``results[(dataset, mode)]`` holds mean metrics."""
    modes = [m for m, _ in MODE_COLUMNS if any((d, m) in results for d in datasets)]
    header = ["Dataset", "Metric"] + [dict(MODE_COLUMNS)[m] for m in modes]
    out = [header]
    for d in datasets:
        for label, attr in _METRIC_LABELS:
            cells = [f"{getattr(results[(d, m)], attr):.3f}" if (d, m) in results else "" for m in modes]
            out.append([d, label] + cells)
    return out


def table2(results: dict[float, tuple[Metrics, Metrics]], datasets: Sequence[str]) -> list[list[str]]:
    """One row per lambda with both datasets' metrics after incremental training."""
    header = ["lambda"] + [f"{d} {short}" for d in datasets for short in ("Acc", "Pre", "Rec", "F1")]
    out = [header]
    for lam in sorted(results):
        m1, m2 = results[lam]
        out.append([f"{lam:g}"] + [f"{v:.3f}" for v in m1.as_tuple() + m2.as_tuple()])
    return out


def table_csv(table: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    return buf.getvalue()
