"""Command line interface: ``cascadecl <subcommand> [options]``.

Options may also come from ``--config FILE``, a flat key/value document
(JSON object, or ``key = value`` lines with ``#`` comments). Keys use the
long option names with dashes or underscores. Command-line flags override
the file, which overrides the built-in defaults. The seed falls back to the
``CASCADECL_SEED`` environment variable.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .cascade import DEFAULT_WINDOW_H, ClipSpec
from .continual import LAMBDA_GRID, ContinualParams, Method
from .dataset import atomic_write, build_dataset, load_archive, save_archive
from .errors import CascadeError, ConfigError, DataError
from .experiment import (DEFAULT_REPEATS, TRAIN_FRAC, ExperimentSpec, Metrics, apply_norm, check_compatible,
                         evaluate, history_csv, read_csv_rows, rows_to_csv, run_incremental, run_single, split,
                         table1, table2, table_csv, write_report)
from .features import FeatureMode, NormStats
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .records import load_labels, load_timelines, load_tweets, load_users
from .synth import default_regimes, write_regime
from .training import TrainConfig

log = logging.getLogger("cascadecl")

SEED_ENV = "CASCADECL_SEED"
CHECKPOINT_NAME = "model.ckpt"
NORM_NAME = "norm.json"


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show the default of every option, including options without help text."""

    def _get_help_string(self, action):
        text = action.help or ""
        if ("%(default)" in text or action.default is argparse.SUPPRESS or not action.option_strings
                or action.required):
            return text
        return f"{text} (default: %(default)s)".lstrip()


def _fill_help(parser: argparse.ArgumentParser) -> None:
    # argparse skips the help formatter entirely for options without help text
    for a in parser._actions:
        if a.help is None and a.option_strings:
            a.help = "(required)" if a.required else "(default: %(default)s)"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key/value config file (JSON or key = value lines)")
    p.add_argument("--seed", type=int, default=None, help=f"base seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent repeats")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    p.add_argument("--pool-layers", type=int, default=d.pool_layers, help="DiffPool levels (2-4)")
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--pool-ratio", type=float, default=d.pool_ratio)
    p.add_argument("--max-nodes", type=int, default=d.max_nodes, help="graph size the cluster widths are sized for")
    p.add_argument("--aux-link-weight", type=float, default=d.aux_link_weight)
    p.add_argument("--aux-entropy-weight", type=float, default=d.aux_entropy_weight)
    p.add_argument("--directed", action="store_true", default=d.directed, help="propagate over directed edges")


def _train_flags(p: argparse.ArgumentParser, prefix: str = "") -> None:
    d = TrainConfig()
    p.add_argument(f"--{prefix}epochs", type=int, default=d.epochs)
    p.add_argument(f"--{prefix}batch-size", type=int, default=d.batch_size)
    p.add_argument(f"--{prefix}lr", type=float, default=d.lr)
    p.add_argument(f"--{prefix}patience", type=int, default=d.patience,
                   help="epochs without a lower training loss before stopping")


def _protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    p.add_argument("--train-frac", type=float, default=TRAIN_FRAC)


def build_parser() -> argparse.ArgumentParser:
    fmt = _DefaultsFormatter
    parser = _Parser(prog="cascadecl", description="Propagation-graph fake news classification with continual "
                                                   "learning.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="build a dataset archive from jsonl records", formatter_class=fmt)
    _common(p)
    p.add_argument("--tweets", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--timelines", default=None, help="needed for timeline/combined modes")
    p.add_argument("--out", required=True, help="archive directory")
    p.add_argument("--clip-tweets", type=int, default=None)
    p.add_argument("--clip-hours", type=float, default=None)
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_H, help="posting window for edges, hours (1-10)")
    p.add_argument("--use-follow", action="store_true", default=False)
    p.add_argument("--mode", choices=[m.value for m in FeatureMode], default="profile")
    p.add_argument("--strict", action="store_true", default=False, help="fail on orphan retweets")

    p = sub.add_parser("gen-synth", help="generate the two synthetic regimes", formatter_class=fmt)
    _common(p)
    p.add_argument("--out", required=True, help="directory; regimes go to OUT/A and OUT/B")
    p.add_argument("--n-news", type=int, default=400)
    p.add_argument("--mode", choices=[m.value for m in FeatureMode], default="profile")
    p.add_argument("--clip-tweets", type=int, default=100)
    p.add_argument("--clip-hours", type=float, default=5.0)
    p.add_argument("--window", type=float, default=DEFAULT_WINDOW_H)

    p = sub.add_parser("train", help="repeated split/train/evaluate on one archive", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True, help="archive directory")
    p.add_argument("--out", required=True, help="run directory")
    _model_flags(p)
    _train_flags(p)
    _protocol_flags(p)

    dc = ContinualParams()
    p = sub.add_parser("train-incremental", help="train on one archive, then continue on a second",
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--data1", required=True)
    p.add_argument("--data2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="phase-1 checkpoint; skips phase-1 training")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.NAIVE.value)
    p.add_argument("--mem-size", type=int, default=dc.mem_size, help="GEM episodic memory size")
    p.add_argument("--lambda", dest="lam", type=float, default=dc.lam,
                   help=f"EWC weight; the sweep grid is {', '.join(f'{v:g}' for v in LAMBDA_GRID)}")
    p.add_argument("--fisher-samples", type=int, default=dc.fisher_samples)
    p.add_argument("--empirical-fisher", action="store_true", default=dc.empirical_fisher)
    p.add_argument("--gem-lr", type=float, default=dc.gem_lr)
    p.add_argument("--gem-margin", type=float, default=dc.gem_margin)
    _model_flags(p)
    _train_flags(p)
    _train_flags(p, "phase2-")
    _protocol_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an archive", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--split", choices=["test", "all"], default="test",
                   help="test = the held-out split recreated from the checkpoint's seed")

    p = sub.add_parser("report", help="merge run reports", formatter_class=fmt)
    _common(p)
    p.add_argument("--runs", nargs="+", required=True, help="run directories holding report.csv")
    p.add_argument("--out", required=True, help="merged CSV path")
    p.add_argument("--table1", default=None, help="also write a feature-mode table here")
    p.add_argument("--table2", default=None, help="also write an EWC lambda table here")
    for p in sub.choices.values():
        _fill_help(p)
    return parser


# -- config handling ----------------------------------------------------------


def read_config(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if any(isinstance(v, (dict, list)) for v in data.values()):
            raise ConfigError(f"{path}: config must be flat")
        return data
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, path: str) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    by_flag = {opt.lstrip("-"): a.dest for a in sub._actions for opt in a.option_strings}
    defaults = {}
    for key, value in read_config(path).items():
        dest = by_flag.get(key) or by_flag.get(key.replace("_", "-")) or (key if key in actions else None)
        if dest is None or dest == "config":
            raise ConfigError(f"{path}: unknown config key {key!r}")
        action = actions[dest]
        if isinstance(value, str):
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = value.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", "*"):
                value = value.split()
            elif action.type is not None:
                try:
                    value = action.type(value)
                except ValueError:
                    raise ConfigError(f"{path}: bad value for {key}: {value!r}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: {key} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(parser, sub, args.config)
        args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return args


def _clip(tweets: int | None, hours: float | None) -> ClipSpec | None:
    if tweets is None and hours is None:
        return None
    return ClipSpec(tweets, hours)


def _model_config(args, input_dim: int) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, pool_layers=args.pool_layers, hidden_dim=args.hidden_dim,
                       embed_dim=args.embed_dim, pool_ratio=args.pool_ratio, max_nodes=args.max_nodes,
                       aux_link_weight=args.aux_link_weight, aux_entropy_weight=args.aux_entropy_weight,
                       directed=args.directed, seed=args.seed)


def _train_config(args, prefix: str = "") -> TrainConfig:
    get = lambda k: getattr(args, prefix + k)  # noqa: E731
    return TrainConfig(epochs=get("epochs"), batch_size=get("batch_size"), lr=get("lr"), patience=get("patience"),
                       seed=args.seed)


def _write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save_run_model(out: Path, model, norm: NormStats, extra: dict) -> None:
    save_checkpoint(out / CHECKPOINT_NAME, model, norm=norm, extra=extra)
    _write_json(out / NORM_NAME, norm.to_dict())


# -- subcommands --------------------------------------------------------------


def cmd_build(args) -> int:
    if not 1.0 <= args.window <= 10.0:
        raise ConfigError(f"--window must lie in [1, 10] hours, got {args.window}")
    mode = FeatureMode(args.mode)
    if mode is not FeatureMode.PROFILE and not args.timelines:
        raise ConfigError(f"--mode {mode.value} needs --timelines")
    tweets = load_tweets(args.tweets)
    if not tweets:
        raise DataError("no news items")
    users = load_users(args.users)
    labels = load_labels(args.labels)
    timelines = load_timelines(args.timelines) if args.timelines else None
    ds = build_dataset(tweets, users, labels, clip=_clip(args.clip_tweets, args.clip_hours),
                       time_window_h=args.window, use_follow=args.use_follow, mode=mode, timelines=timelines,
                       strict=args.strict)
    save_archive(ds, args.out)
    info = ds.info
    log.info("built %d graphs (dropped %d empty, skipped %d orphan, %d unlabeled) into %s", len(ds),
             info["dropped_empty"], info["skipped_orphans"], info["unlabeled"], args.out)
    return 0


def cmd_gen(args) -> int:
    out = Path(args.out)
    clip = _clip(args.clip_tweets, args.clip_hours)
    for cfg in default_regimes():
        cfg = replace(cfg, n_news=args.n_news, seed=cfg.seed + args.seed)
        manifest = write_regime(cfg, out / cfg.name, mode=FeatureMode(args.mode), clip=clip,
                                time_window_h=args.window)
        st = manifest["statistics"]
        log.info("regime %s: %d graphs, mean nodes %.1f, mean edges %.1f", cfg.name, st["graphs"],
                 st["mean_nodes"], st["mean_edges"])
    return 0


def cmd_train(args) -> int:
    ds = load_archive(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = ExperimentSpec((ds,), (Path(args.data).name or "D1",), model=_model_config(args, ds.d),
                          train=_train_config(args), repeats=args.repeats, seed=args.seed, frac=args.train_frac,
                          scenario=f"single-{ds.mode.value}", jobs=args.jobs)
    report = run_single(spec)
    model, norm = report.models[spec.scenario]
    _save_run_model(out, model, norm, {"seed": args.seed, "frac": args.train_frac, "data": str(args.data)})
    write_report(report, out)
    m = report.mean(spec.scenario, "test", spec.names()[0])
    log.info("mean test accuracy %.4f f1 %.4f over %d repeats", m.accuracy, m.f1, spec.repeats)
    return 0


def cmd_train_incremental(args) -> int:
    d1, d2 = load_archive(args.data1), load_archive(args.data2)
    if args.checkpoint:
        check_compatible(load_checkpoint(args.checkpoint).model, d1.d)
    if d1.d != d2.d:
        raise ConfigError(f"archives disagree on feature dim: {d1.d} vs {d2.d}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = ContinualParams(method=Method(args.method), mem_size=args.mem_size, lam=args.lam,
                             fisher_samples=args.fisher_samples, empirical_fisher=args.empirical_fisher,
                             gem_lr=args.gem_lr, gem_margin=args.gem_margin)
    names = (Path(args.data1).name or "D1", Path(args.data2).name or "D2")
    if names[0] == names[1]:
        names = (names[0] + "-1", names[1] + "-2")
    spec = ExperimentSpec((d1, d2), names, model=_model_config(args, d1.d), train=_train_config(args),
                          phase2=_train_config(args, "phase2_"), continual=(params,),
                          repeats=1 if args.checkpoint else args.repeats, seed=args.seed, frac=args.train_frac,
                          scenario="incremental", jobs=args.jobs, init_checkpoint=args.checkpoint)
    report = run_incremental(spec)
    (name, (model, norm)), = report.models.items()
    _save_run_model(out, model, norm, {"seed": args.seed, "frac": args.train_frac, "data": str(args.data2),
                                       "method": params.method.value})
    write_report(report, out)
    history = report.histories.get(f"{name}/0", [])
    atomic_write(out / "history.csv", history_csv(history))
    for ds_name in names:
        before = report.mean("phase1", "phase1", ds_name).accuracy
        after = report.mean(name, "phase2", ds_name).accuracy
        log.info("%s accuracy: %.4f after phase 1, %.4f after phase 2 (%s)", ds_name, before, after, name)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_archive(args.data)
    check_compatible(ckpt.model, ds.d)
    norm = ckpt.norm if ckpt.norm is not None else NormStats.identity(ds.d)
    graphs = list(ds.graphs)
    seed = int(ckpt.extra.get("seed", args.seed))
    if args.split == "test":
        _, test = split(ds, float(ckpt.extra.get("frac", TRAIN_FRAC)), seed)
        graphs = list(test.graphs)
    m = evaluate(ckpt.model, apply_norm(graphs, norm))
    _write_json(Path(args.out), {"split": args.split, "seed": seed, "count": len(graphs), **m.to_dict()})
    log.info("accuracy %.4f precision %.4f recall %.4f f1 %.4f on %d graphs", *m.as_tuple(), len(graphs))
    return 0


def cmd_report(args) -> int:
    rows, t1, t2 = [], {}, {}
    t1_names, t2_names = [], None
    for run in args.runs:
        run = Path(run)
        try:
            rows += read_csv_rows((run / "report.csv").read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"{run}: report.csv missing") from None
        meta_path = run / "report.json"
        if not meta_path.exists():
            continue
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        cfg = meta["config"]
        for s in meta["summary"]:
            mean = Metrics(**s["mean"])
            if s["phase"] == "test" and s["scenario"].startswith("single-"):
                mode = s["scenario"].split("-", 1)[1]
                t1[(s["dataset"], mode)] = mean
                if s["dataset"] not in t1_names:
                    t1_names.append(s["dataset"])
            elif s["phase"] == "phase2" and s["scenario"].startswith("ewc-"):
                lam = next(c["lam"] for c in cfg["continual"] if c["method"] == "ewc")
                t2_names = t2_names or cfg["datasets"]
                pair = t2.setdefault(lam, [None, None])
                pair[cfg["datasets"].index(s["dataset"])] = mean
    atomic_write(Path(args.out), rows_to_csv(rows))
    if args.table1:
        atomic_write(Path(args.table1), table_csv(table1(t1, t1_names)))
    if args.table2:
        done = {lam: tuple(p) for lam, p in t2.items() if None not in p}
        atomic_write(Path(args.table2), table_csv(table2(done, t2_names or ["D1", "D2"])))
    log.info("merged %d rows from %d runs into %s", len(rows), len(args.runs), args.out)
    return 0


COMMANDS = {
    "build": cmd_build,
    "gen-synth": cmd_gen,
    "train": cmd_train,
    "train-incremental": cmd_train_incremental,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except CascadeError as exc:
        print(f"cascadecl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"cascadecl: error: config file not found: {exc.filename}", file=sys.stderr)
        return ConfigError.exit_code
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    try:
        return COMMANDS[args.command](args)
    except CascadeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
