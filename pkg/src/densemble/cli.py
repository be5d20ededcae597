"""Command-line surface: train/evaluate plus the experiment commands that
emit each results table as machine-readable CSV or JSON.

Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
3 numeric abort during training. Config precedence is flag > config file >
built-in default; the config file is flat `key = value` text.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from densemble.aggregation import (
    AGGREGATOR_NAMES,
    average_ranker,
    bma_ranker,
    single_expert_ranker,
)
from densemble.dataset import (
    DatasetError,
    InteractionMatrix,
    SplitDataset,
    inject_noise,
    load_interactions,
    split_train_test,
)
from densemble.evaluation import (
    GatedEnsembleRanker,
    aggregate_seeds,
    evaluate,
    metric_items,
    metrics_json_text,
)
from densemble.model import (
    CheckpointError,
    load_checkpoint,
    parameter_breakdown,
)
from densemble.training import (
    TrainConfig,
    TrainingDivergedError,
    initialize_run,
    train,
    validation_carve,
)


class ConfigError(Exception):
    """Bad flags, bad config file, or inconsistent option values."""


@dataclass
class Config:
    dataset: str | None = None
    format: str = "auto"
    out: str = "runs"
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    k: int = 2
    aggregator: str = "gate"
    rates: tuple = (0.0, 0.25, 0.5, 1.0)
    cutoffs: tuple = (5, 20)
    dims: tuple = (128, 48, 12)
    split_ratio: float = 0.8
    split_seed: int = 0
    temperature: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 600
    corruption_prob: float = 0.3
    l2_lambda: float = 1e-8
    w_importance: float = 1e-2
    w_load: float = 1e-2
    pretrain_epochs: int = 30
    early_stop_patience: int = 200
    restart_every: int = 0  # warm restarts off; set a cadence in epochs to enable


def _parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(v.strip()) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def _parse_float_list(text: str) -> tuple:
    try:
        return tuple(float(v.strip()) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from exc


_FILE_PARSERS = {
    "dataset": str, "format": str, "out": str, "aggregator": str,
    "seed": int, "k": int, "batch_size": int, "epochs": int,
    "pretrain_epochs": int, "early_stop_patience": int, "restart_every": int,
    "split_seed": int,
    "seeds": _parse_int_list, "cutoffs": _parse_int_list, "dims": _parse_int_list,
    "rates": _parse_float_list,
    "split_ratio": float, "temperature": float, "learning_rate": float,
    "corruption_prob": float, "l2_lambda": float,
    "w_importance": float, "w_load": float,
}


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; `#` starts a comment, blank lines ignored."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FILE_PARSERS:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            values[key] = _FILE_PARSERS[key](raw.strip())
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); config errors are exit 1
        raise ConfigError(message)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--dataset", help="interaction file (user, item per line)")
    parser.add_argument("--format", choices=("tsv", "csv"), dest="format")
    parser.add_argument("--out", help="output directory (default runs/)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--seeds", type=_parse_int_list, help="comma-separated run seeds")
    parser.add_argument("--k", type=int, help="experts activated per input (1-3)")
    parser.add_argument("--aggregator", help="gate | average | bma | mild | moderate | strong")
    parser.add_argument("--rates", type=_parse_float_list, help="noise rates for ablation")
    parser.add_argument("--epochs", type=int)


def _build_parser() -> _Parser:
    parser = _Parser(prog="densemble",
                     description="Denoising-ensemble recommender experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, func, desc in (
            ("train", cmd_train, "train one model; write checkpoint, log, metrics"),
            ("evaluate", cmd_evaluate, "score a checkpoint on the held-out split"),
            ("sweep-k", cmd_sweep_k, "train and evaluate for k = 1, 2, 3"),
            ("ablate-noise", cmd_ablate_noise, "false-positive noise ablation"),
            ("compare-aggregators", cmd_compare_aggregators,
             "sparse gate vs averaging vs static weighting"),
            ("count-params", cmd_count_params, "exact parameter accounting")):
        p = sub.add_parser(name, description=desc)
        p.set_defaults(func=func)
        if name == "count-params":
            p.add_argument("--config", help="flat key=value config file")
            p.add_argument("--users", type=int, required=True)
            p.add_argument("--items", type=int, required=True)
            p.add_argument("--dims", type=_parse_int_list)
        else:
            _add_common_flags(p)
            if name == "evaluate":
                p.add_argument("--checkpoint", required=True)
    return parser


def _merge_config(args: argparse.Namespace) -> Config:
    cfg = Config()
    config_path = getattr(args, "config", None)
    if config_path:
        cfg = replace(cfg, **parse_config_file(config_path))
    overrides = {}
    for f in fields(Config):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    cfg = replace(cfg, **overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    if cfg.format not in ("auto", "tsv", "csv"):
        raise ConfigError(f"unknown format {cfg.format!r}")
    if cfg.aggregator not in AGGREGATOR_NAMES:
        raise ConfigError(f"unknown aggregator {cfg.aggregator!r}; "
                          f"expected one of {', '.join(AGGREGATOR_NAMES)}")
    if cfg.k not in (1, 2, 3):
        raise ConfigError(f"k must be 1, 2, or 3, got {cfg.k}")
    if not cfg.seeds:
        raise ConfigError("seeds list is empty")
    if not cfg.cutoffs or any(n < 1 for n in cfg.cutoffs):
        raise ConfigError("cutoffs must be positive integers")
    if len(cfg.dims) != 3 or any(d < 1 for d in cfg.dims):
        raise ConfigError("dims must be three positive widths, e.g. 128,48,12")
    if any(r < 0 for r in cfg.rates):
        raise ConfigError("noise rates must be nonnegative")
    if not 0.0 < cfg.split_ratio < 1.0:
        raise ConfigError("split_ratio must be in (0, 1)")
    try:
        _train_config(cfg, cfg.seed, cfg.k).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg: Config, seed: int, k: int) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                       epochs=cfg.epochs, corruption_prob=cfg.corruption_prob,
                       l2_lambda=cfg.l2_lambda, w_importance=cfg.w_importance,
                       w_load=cfg.w_load, k=k, seed=seed,
                       pretrain_epochs=cfg.pretrain_epochs,
                       early_stop_patience=cfg.early_stop_patience,
                       restart_every=cfg.restart_every or None)


def _load_split(cfg: Config):
    if cfg.dataset is None:
        raise DatasetError("no dataset given: pass --dataset or set dataset= in the config")
    matrix, _ = load_interactions(cfg.dataset, cfg.format)
    split = split_train_test(matrix, cfg.split_ratio, cfg.split_seed)
    return matrix, split, Path(cfg.dataset).stem


def _train_one(cfg: Config, split: SplitDataset, seed: int, k: int,
               checkpoint_path=None, log_path=None):
    model, gating = initialize_run(split.train.num_users, split.train.num_items,
                                   cfg.dims, k, seed)
    report = train(model, gating, split, _train_config(cfg, seed, k),
                   checkpoint_path=checkpoint_path, log_path=log_path)
    return model, gating, report


def _make_ranker(cfg: Config, model, gating, split: SplitDataset, seed: int,
                 aggregator: str):
    if aggregator == "gate":
        if gating is None:
            raise ConfigError("this checkpoint has no gate; pick another --aggregator")
        return GatedEnsembleRanker(model, gating)
    if aggregator == "average":
        return average_ranker(model)
    if aggregator == "bma":
        carve = validation_carve(split.train, seed)
        return bma_ranker(model, carve.train, carve.test, cfg.temperature)
    return single_expert_ranker(model, aggregator)


def _out_dir(cfg: Config) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (str, int)) else repr(float(c))
                              for c in row))
    _write_text(path, "\n".join(lines) + "\n")


def _print_metrics(label: str, report) -> None:
    parts = ", ".join(f"{key}={value:.4f}" for key, value in metric_items(report))
    print(f"{label}: {parts} ({report.users_evaluated} users)")


def cmd_train(cfg: Config, args) -> int:
    _, split, name = _load_split(cfg)
    out = _out_dir(cfg)
    ckpt = out / f"model_seed{cfg.seed}.ckpt"
    log = out / f"train_seed{cfg.seed}.csv"
    model, gating, report = _train_one(cfg, split, cfg.seed, cfg.k,
                                       checkpoint_path=ckpt, log_path=log)
    ranker = _make_ranker(cfg, model, gating, split, cfg.seed, cfg.aggregator)
    metrics = evaluate(ranker, split, cfg.cutoffs, seed=cfg.seed)
    _write_text(out / f"metrics_seed{cfg.seed}.json",
                metrics_json_text(metrics, name, cfg.aggregator, cfg.k))
    print(f"trained {len(report.epochs)} epochs "
          f"(best epoch {report.best_epoch}), checkpoint {ckpt}")
    _print_metrics(f"{cfg.aggregator} on {name}", metrics)
    return 0


def cmd_evaluate(cfg: Config, args) -> int:
    model, gating = load_checkpoint(args.checkpoint)
    _, split, name = _load_split(cfg)
    if model.num_items != split.train.num_items or model.num_users != split.train.num_users:
        raise CheckpointError(
            f"checkpoint is for {model.num_users} users x {model.num_items} items, "
            f"dataset has {split.train.num_users} x {split.train.num_items}")
    ranker = _make_ranker(cfg, model, gating, split, cfg.seed, cfg.aggregator)
    metrics = evaluate(ranker, split, cfg.cutoffs, seed=cfg.seed)
    out = _out_dir(cfg)
    k = gating.k if gating is not None else cfg.k
    _write_text(out / f"metrics_{cfg.aggregator}_seed{cfg.seed}.json",
                metrics_json_text(metrics, name, cfg.aggregator, k))
    _print_metrics(f"{cfg.aggregator} on {name}", metrics)
    return 0


def cmd_sweep_k(cfg: Config, args) -> int:
    _, split, name = _load_split(cfg)
    rows = []
    for k in (1, 2, 3):
        reports = []
        for seed in cfg.seeds:
            model, gating, _ = _train_one(cfg, split, seed, k)
            metrics = evaluate(GatedEnsembleRanker(model, gating), split,
                               cfg.cutoffs, seed=seed)
            _print_metrics(f"k={k} seed={seed}", metrics)
            reports.append(metrics)
        agg = aggregate_seeds(reports)
        for key in agg.mean:
            rows.append((k, key, agg.mean[key], agg.std[key]))
    path = _out_dir(cfg) / "sweep_k.csv"
    _write_csv(path, "k,metric,mean,std", rows)
    print(f"wrote {path}")
    return 0


_ABLATION_RANKERS = ("mild", "moderate", "strong", "average")


def _strip_overlap(test: InteractionMatrix, noisy_train: InteractionMatrix) -> InteractionMatrix:
    """Held-out items that noise injected into train are no longer held out."""
    rows = []
    for u in range(test.num_users):
        rows.append(np.setdiff1d(test.rows[u], noisy_train.rows[u]))
    return InteractionMatrix.from_rows(test.num_users, test.num_items, rows)


def cmd_ablate_noise(cfg: Config, args) -> int:
    _, split, name = _load_split(cfg)
    rows = []
    for rate in cfg.rates:
        noisy_train = inject_noise(split.train, rate, cfg.split_seed)
        noisy_split = SplitDataset(noisy_train, _strip_overlap(split.test, noisy_train))
        per_ranker = {r: [] for r in _ABLATION_RANKERS}
        for seed in cfg.seeds:
            model, gating, _ = _train_one(cfg, noisy_split, seed, cfg.k)
            for ranker_name in _ABLATION_RANKERS:
                ranker = _make_ranker(cfg, model, gating, noisy_split, seed, ranker_name)
                metrics = evaluate(ranker, noisy_split, cfg.cutoffs, seed=seed)
                _print_metrics(f"rate={rate} seed={seed} {ranker_name}", metrics)
                per_ranker[ranker_name].append(metrics)
        for ranker_name in _ABLATION_RANKERS:
            agg = aggregate_seeds(per_ranker[ranker_name])
            for key in agg.mean:
                rows.append((repr(float(rate)), ranker_name, key, agg.mean[key]))
    path = _out_dir(cfg) / "ablate_noise.csv"
    _write_csv(path, "rate,ranker,metric,mean", rows)
    print(f"wrote {path}")
    return 0


def cmd_compare_aggregators(cfg: Config, args) -> int:
    _, split, name = _load_split(cfg)
    kinds = ("gate", "average", "bma")
    per_kind = {kind: [] for kind in kinds}
    for seed in cfg.seeds:
        model, gating, _ = _train_one(cfg, split, seed, cfg.k)
        for kind in kinds:
            ranker = _make_ranker(cfg, model, gating, split, seed, kind)
            metrics = evaluate(ranker, split, cfg.cutoffs, seed=seed)
            _print_metrics(f"seed={seed} {kind}", metrics)
            per_kind[kind].append(metrics)
    rows = []
    for kind in kinds:
        agg = aggregate_seeds(per_kind[kind])
        for key in agg.mean:
            rows.append((kind, key, agg.mean[key], agg.std[key]))
    path = _out_dir(cfg) / "compare_aggregators.csv"
    _write_csv(path, "aggregator,metric,mean,std", rows)
    print(f"wrote {path}")
    return 0


def cmd_count_params(cfg: Config, args) -> int:
    dims = args.dims if args.dims is not None else cfg.dims
    if len(dims) < 1 or any(d < 1 for d in dims):
        raise ConfigError("dims must be positive widths")
    if args.users < 1 or args.items < 1:
        raise ConfigError("--users and --items must be positive")
    breakdown = parameter_breakdown(args.users, args.items, dims)
    print(f"parameters for {args.users} users x {args.items} items, dims {tuple(dims)}")
    for key, value in breakdown.items():
        label = key.replace("_", " ")
        print(f"  {label}: {value:,}")
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _merge_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
