"""Command-line front end: gen-data, train, evaluate, experiment, ablate.

Configuration is a single JSON document; flags only override config fields.
Exit codes: 0 success, 1 runtime failure (e.g. diverged training), 2
configuration or usage error.  All reports are written to files so runs are
diffable; the only timestamp lives in the manifest.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import data as data_mod
from .fairloss import FairLossConfig
from .metrics import build_report, select_operating_point
from .model import load_metadata, load_params, save_params
from .train import (
    RunResult,
    TrainConfig,
    TrainingDivergedError,
    predictions,
    run_ablation,
    run_experiment,
    train_model,
)

OUT_ROOT_ENV = "FAIRMARGIN_OUT"


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field."""


@dataclass
class ExperimentConfig:
    cohort: data_mod.CohortConfig | None
    dataset: str | None
    train: TrainConfig
    out: str | None
    report_formats: tuple[str, ...] = ("json", "csv")

    def __post_init__(self):
        if (self.cohort is None) == (self.dataset is None):
            raise ConfigError("exactly one of 'cohort' and 'dataset' must be present")


def _parse_train_section(doc: dict) -> TrainConfig:
    t = doc.get("train", {})
    f = doc.get("fairness", {})
    try:
        fair = FairLossConfig(
            lambda_plus=float(f.get("lambda_plus", 1.5)),
            lambda_minus=float(f.get("lambda_minus", 1.5)),
            min_group_count=int(f.get("min_group_count", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fairness: {exc}") from exc
    try:
        return TrainConfig(
            epochs=int(t.get("epochs", 30)),
            batch_size=int(t.get("batch_size", 64)),
            learning_rate=float(t.get("learning_rate", 0.001)),
            hidden_dims=tuple(t.get("hidden_dims", [32, 16])),
            fair=fair,
            seeds=tuple(t.get("seeds", [0, 1, 2, 3, 4, 5])),
            split_fractions=tuple(t.get("split_fractions", [0.6, 0.2, 0.2])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        doc: dict = {"cohort": data_mod.default_cohort_config().to_dict()}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cohort_cfg = None
    if "cohort" in doc:
        try:
            cohort_cfg = data_mod.CohortConfig.from_dict(doc["cohort"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cohort: {exc}") from exc
    formats = tuple(doc.get("report_formats", ["json", "csv"]))
    for fmt in formats:
        if fmt not in ("json", "csv"):
            raise ConfigError(f"report_formats: unknown format {fmt!r}")
    return ExperimentConfig(
        cohort=cohort_cfg,
        dataset=doc.get("dataset"),
        train=_parse_train_section(doc),
        out=doc.get("out"),
        report_formats=formats,
    )


def _resolve_out(flag_value: str | None, cfg_value: str | None, command: str) -> Path:
    if flag_value:
        return Path(flag_value)
    if cfg_value:
        return Path(cfg_value)
    root = os.environ.get(OUT_ROOT_ENV, "fairmargin_runs")
    return Path(root) / command


def _load_cohort(cfg: ExperimentConfig) -> data_mod.Cohort:
    if cfg.cohort is not None:
        return data_mod.generate(cfg.cohort)
    path = Path(cfg.dataset)
    if not path.exists():
        raise ConfigError(f"dataset: file not found: {cfg.dataset}")
    return data_mod.load_csv(path)


def _write_manifest(out_dir: Path, command: str, artifacts: list[Path]) -> None:
    manifest = {
        "command": command,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "artifacts": sorted(str(p.relative_to(out_dir)) for p in artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _save_run(run: RunResult, run_dir: Path, formats: tuple[str, ...]) -> list[Path]:
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    ckpt = run_dir / "checkpoint.json"
    save_params(run.rebuild_params(), ckpt, metadata=run.metadata)
    artifacts.append(ckpt)
    trace = run_dir / "trace.csv"
    run.save_trace(trace)
    artifacts.append(trace)
    json_path = run_dir / "report.json" if "json" in formats else None
    table_path = run_dir / "report_table.csv" if "csv" in formats else None
    run.report.save(json_path=json_path, table_path=table_path)
    artifacts += [p for p in (json_path, table_path) if p is not None]
    return artifacts


def _method_label(fair: FairLossConfig) -> str:
    return "baseline" if fair.lambda_plus == 0.0 and fair.lambda_minus == 0.0 else "fair"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_experiment_config(args.config)
    if cfg.cohort is None:
        raise ConfigError("gen-data needs a 'cohort' section, not a 'dataset' path")
    cohort = data_mod.generate(cfg.cohort)
    out = Path(args.out) if args.out else _resolve_out(None, cfg.out, "gen-data") / "cohort.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_csv(cohort, out)
    print(f"wrote {out} (fingerprint {cohort.fingerprint})")
    print(f"n={cohort.n} feature_dim={cfg.cohort.feature_dim} classes={cfg.cohort.num_classes}")
    for group, size in cohort.group_sizes().items():
        print(f"  {group}: {size}")
    prev = ", ".join(f"y{k}={v:.4f}" for k, v in enumerate(cohort.prevalence_observed()))
    print(f"observed prevalence: {prev}")
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    cohort = _load_cohort(cfg)
    seeds = tuple(args.seeds) if args.seeds else cfg.train.seeds
    out_dir = _resolve_out(args.out, cfg.out, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    method = _method_label(cfg.train.fair)
    artifacts: list[Path] = []
    for seed in seeds:
        run = train_model(cohort, cfg.train, seed, method=method)
        artifacts += _save_run(run, out_dir / f"seed_{seed}", cfg.report_formats)
        final = run.trace[-1]
        val_auc = "n/a" if final["val_auc"] is None else f"{final['val_auc']:.4f}"
        print(f"seed {seed}: train_loss={final['train_loss']:.4f} val_auc={val_auc}")
    _write_manifest(out_dir, "train", artifacts)
    print(f"artifacts under {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt_path = Path(args.checkpoint)
    data_path = Path(args.dataset)
    for p in (ckpt_path, data_path):
        if not p.exists():
            raise ConfigError(f"file not found: {p}")
    params = load_params(ckpt_path)
    meta = load_metadata(ckpt_path)
    cohort = data_mod.load_csv(data_path)
    d_model = params.config.input_dim
    d_data = cohort.features.shape[1]
    if d_model != d_data:
        raise ConfigError(f"feature_dim mismatch: checkpoint {d_model}, dataset {d_data}")
    k_model = params.config.num_classes
    k_data = cohort.labels.shape[1]
    if k_model != k_data:
        raise ConfigError(f"num_classes mismatch: checkpoint {k_model}, dataset {k_data}")
    fractions = tuple(meta.get("split_fractions", [0.6, 0.2, 0.2]))
    run_seed = int(meta.get("run_seed", 0))
    from .train import _SPLIT_STREAM  # same derivation the trainer used

    tagged = data_mod.split(
        cohort, fractions, seed=data_mod.derived_seed(run_seed, _SPLIT_STREAM)
    )
    op = select_operating_point(predictions(tagged, params, "val"))

    baseline_report = None
    if args.baseline:
        base_doc = json.loads(Path(args.baseline).read_text())
        from .metrics import EvalReport

        baseline_report = EvalReport(
            method=base_doc.get("method", "baseline"),
            attributes=base_doc.get("attributes", []),
            num_classes=base_doc.get("num_classes", k_model),
            thresholds=tuple(base_doc.get("thresholds", [])),
            per_class={},
            per_attribute=base_doc.get("per_attribute", {}),
            joint=base_doc.get("joint", {}),
            auc_per_class=base_doc.get("auc_per_class", []),
            macro_auc=base_doc.get("macro_auc"),
        )
    report = build_report(
        predictions(tagged, params, "test"),
        op,
        baseline_report=baseline_report,
        method=args.method,
    )
    out_dir = _resolve_out(args.out, None, "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save(json_path=out_dir / "report.json", table_path=out_dir / "report_table.csv")
    _write_manifest(out_dir, "evaluate", [out_dir / "report.json", out_dir / "report_table.csv"])
    auc_str = "n/a" if report.macro_auc is None else f"{report.macro_auc:.4f}"
    print(f"macro AUC {auc_str}; report under {out_dir}")
    return 0


def _run_aggregate_cmd(args, kind: str) -> int:
    cfg = load_experiment_config(args.config)
    cohort = _load_cohort(cfg)
    seeds = tuple(args.seeds) if args.seeds else cfg.train.seeds
    out_dir = _resolve_out(args.out, cfg.out, kind)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "experiment":
        result = run_experiment(cohort, cfg.train, cfg.train.fair, seeds=seeds, jobs=args.jobs)
    else:
        result = run_ablation(cohort, cfg.train, seeds=seeds, jobs=args.jobs)
    table_csv = out_dir / f"{kind}_table.csv"
    table_txt = out_dir / f"{kind}_table.txt"
    result.save_table(table_csv)
    text = result.render_text()
    table_txt.write_text(text)
    artifacts = [table_csv, table_txt]
    for method in result.methods:
        for run in method.runs:
            run_dir = out_dir / "runs" / f"{method.method}_seed_{run.seed}"
            artifacts += _save_run(run, run_dir, cfg.report_formats)
    _write_manifest(out_dir, kind, artifacts)
    print(text, end="")
    print(f"artifacts under {out_dir}")
    return 0


def cmd_experiment(args) -> int:
    return _run_aggregate_cmd(args, "experiment")


def cmd_ablate(args) -> int:
    return _run_aggregate_cmd(args, "ablate")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairmargin",
        description="Worst-group equalized-odds margin regularization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort CSV")
    p.add_argument("--config", help="experiment config JSON (default: built-in cohort)")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", nargs="+", type=int, help="override config seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baseline", help="baseline report.json for delta AUC")
    p.add_argument("--method", default="model", help="method label for the report")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="baseline vs regularized over seeds")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel per-seed workers")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", help="single-term arms vs baseline over seeds")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, data_mod.CohortFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
