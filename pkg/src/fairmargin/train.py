"""Deterministic training loop, Adam, and the multi-seed experiment protocols.

A run seed drives three independent derived streams (split assignment,
parameter init, per-epoch shuffles), so two arms trained at the same seed
see identical data order and start from identical weights.  Experiments
train a baseline (both lambdas zero) and regularized arms per seed and
aggregate mean and standard error across seeds.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .autodiff import Tape, Tensor, bce_with_logits, sigmoid_values
from .fairloss import BatchView, FairLossConfig, loss_parts
from .metrics import (
    DegenerateLabelsError,
    EvalReport,
    OperatingPoint,
    PredictionSet,
    auc,
    build_report,
    select_operating_point,
)
from .model import MlpConfig, MlpParams, forward, init_mlp, predict_scores

__all__ = [
    "TrainConfig",
    "RunResult",
    "TrainingDivergedError",
    "Adam",
    "train_model",
    "predictions",
    "run_experiment",
    "run_ablation",
    "ExperimentResult",
    "MethodAggregate",
]

# stream tags for deriving independent RNG streams from one run seed
_SPLIT_STREAM = 11
_INIT_STREAM = 12
_SHUFFLE_STREAM = 13

TABLE_METRICS = ("eodds", "eom", "tpr_ratio", "fpr_ratio")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; carries where it happened and the term values."""

    def __init__(self, epoch: int, batch: int, terms: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.terms = terms
        pretty = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {pretty}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.001
    hidden_dims: tuple[int, ...] = (32, 16)
    fair: FairLossConfig = field(default_factory=FairLossConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Adam:
    """Textbook Adam with bias correction; updates parameter data in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor]) -> None:
        if self._m is None:
            self._m = [np.zeros_like(p.data) for p in params]
            self._v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(params):
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            m_hat = self._m[i] / (1 - b1**self.t)
            v_hat = self._v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class RunResult:
    """One trained run: final weights, trace, operating point, test report."""

    seed: int
    method: str
    model_config: MlpConfig
    param_arrays: list[np.ndarray]
    trace: list[dict]
    operating_point: OperatingPoint
    report: EvalReport
    metadata: dict

    def rebuild_params(self) -> MlpParams:
        tape = Tape()
        params = MlpParams(config=self.model_config)
        arrays = iter(self.param_arrays)
        for _ in self.model_config.layer_dims:
            w = tape.parameter(next(arrays).copy())
            b = tape.parameter(next(arrays).copy())
            params.layers.append((w, b))
        return params

    def save_trace(self, path) -> None:
        cols = [
            "epoch",
            "train_loss",
            "train_bce",
            "train_eo_plus",
            "train_eo_minus",
            "val_bce",
            "val_auc",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.trace:
                writer.writerow(["" if row[c] is None else repr(row[c]) for c in cols])


def predictions(cohort: data_mod.Cohort, params: MlpParams, split_name: str) -> PredictionSet:
    """Scores/labels/attributes for one split of a tagged cohort."""
    idx = cohort.split_indices(split_name)
    if idx.size == 0:
        raise ValueError(f"split {split_name!r} is empty")
    scores = predict_scores(params, cohort.features[idx])
    return PredictionSet(
        scores=scores,
        labels=cohort.labels[idx],
        attributes={name: cohort.attribute_labels(name)[idx] for name in cohort.attribute_codes},
        split=split_name,
        attribute_values={name: values for name, values in cohort.config.schema},
    )


def _val_metrics(cohort: data_mod.Cohort, params: MlpParams) -> tuple[float, float | None]:
    idx = cohort.split_indices("val")
    tape = Tape()
    params.attach(tape)
    logits = forward(params, tape.constant(cohort.features[idx]))
    val_bce = bce_with_logits(logits, cohort.labels[idx]).item()
    scores = sigmoid_values(logits.data)
    aucs = []
    for k in range(scores.shape[1]):
        try:
            aucs.append(auc(scores[:, k], cohort.labels[idx][:, k]))
        except DegenerateLabelsError:
            pass
    return val_bce, (float(np.mean(aucs)) if aucs else None)


def train_model(
    cohort: data_mod.Cohort, cfg: TrainConfig, seed: int, method: str = "model"
) -> RunResult:
    """Train one model; every random choice derives from ``seed``."""
    tagged = data_mod.split(
        cohort, cfg.split_fractions, seed=data_mod.derived_seed(seed, _SPLIT_STREAM)
    )
    catalog = tagged.catalog
    n_features = tagged.features.shape[1]
    n_classes = tagged.labels.shape[1]
    model_cfg = MlpConfig(
        input_dim=n_features,
        hidden_dims=cfg.hidden_dims,
        num_classes=n_classes,
        init_seed=data_mod.derived_seed(seed, _INIT_STREAM),
    )
    params = init_mlp(model_cfg)
    optimizer = Adam(lr=cfg.learning_rate)

    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        epoch_batches = data_mod.batches(
            tagged, "train", cfg.batch_size, epoch_seed=[seed, _SHUFFLE_STREAM, epoch]
        )
        sums = {"total": 0.0, "bce": 0.0, "eo_plus": 0.0, "eo_minus": 0.0}
        for b_i, batch_idx in enumerate(epoch_batches):
            tape = Tape()
            params.attach(tape)
            x = tape.constant(tagged.features[batch_idx])
            logits = forward(params, x)
            batch = BatchView(
                logits=logits,
                labels=tagged.labels[batch_idx],
                group_masks=catalog.batch_masks(batch_idx),
            )
            parts = loss_parts(batch, cfg.fair, catalog)
            values = parts.values()
            if not np.isfinite(values["total"]):
                raise TrainingDivergedError(epoch, b_i, values)
            tape.backward(parts.total)
            optimizer.step(params.tensors())
            for key in sums:
                sums[key] += values[key]
        n_b = len(epoch_batches)
        val_bce, val_auc = _val_metrics(tagged, params)
        trace.append(
            {
                "epoch": epoch,
                "train_loss": sums["total"] / n_b,
                "train_bce": sums["bce"] / n_b,
                "train_eo_plus": sums["eo_plus"] / n_b,
                "train_eo_minus": sums["eo_minus"] / n_b,
                "val_bce": val_bce,
                "val_auc": val_auc,
            }
        )

    op = select_operating_point(predictions(tagged, params, "val"))
    report = build_report(predictions(tagged, params, "test"), op, method=method)
    return RunResult(
        seed=seed,
        method=method,
        model_config=model_cfg,
        param_arrays=[a.copy() for a in params.arrays()],
        trace=trace,
        operating_point=op,
        report=report,
        metadata={
            "run_seed": int(seed),
            "split_fractions": list(cfg.split_fractions),
            "lambda_plus": cfg.fair.lambda_plus,
            "lambda_minus": cfg.fair.lambda_minus,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
        },
    )


# ---------------------------------------------------------------------------
# multi-seed protocols
# ---------------------------------------------------------------------------


def _run_task(args) -> RunResult:
    cohort, cfg, seed, method = args
    return train_model(cohort, cfg, seed, method=method)


def _execute(tasks: list[tuple], jobs: int) -> list[RunResult]:
    if jobs <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


@dataclass
class MethodAggregate:
    method: str
    runs: list[RunResult]
    # (attribute, metric) -> (mean, standard error, #seeds contributing)
    metrics: dict[tuple[str, str], tuple[float | None, float | None, int]]


@dataclass
class ExperimentResult:
    attributes: list[str]
    seeds: tuple[int, ...]
    methods: list[MethodAggregate]

    def method(self, name: str) -> MethodAggregate:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)

    def flat_rows(self) -> list[list[str]]:
        def fmt(v) -> str:
            return "" if v is None else repr(float(v))

        rows = []
        for m in self.methods:
            for key, (mean_v, se_v, n) in m.metrics.items():
                attribute, metric = key
                rows.append([m.method, attribute, "macro", metric, fmt(mean_v), fmt(se_v), str(n)])
        return rows

    def save_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "attribute", "class", "metric", "mean", "se", "n_seeds"])
            writer.writerows(self.flat_rows())

    def render_text(self) -> str:
        """Fixed-width table: EOdds and EOM per attribute plus joint, then dAUC."""

        def cell(m: MethodAggregate, attribute: str, metric: str) -> str:
            mean_v, se_v, _ = m.metrics.get((attribute, metric), (None, None, 0))
            if mean_v is None:
                return "---"
            if metric == "delta_auc" and all(
                r.report.baseline_method == r.method for r in m.runs
            ):
                return "---"
            return f"{mean_v:.3f} ± {(se_v if se_v is not None else 0.0):.3f}"

        attrs = self.attributes
        header = (
            ["Method"]
            + [f"EOdds {a}" for a in attrs]
            + ["EOdds joint"]
            + [f"EOM {a}" for a in attrs]
            + ["EOM joint", "dAUC"]
        )
        lines = []
        rows = [header]
        for m in self.methods:
            row = [m.method]
            row += [cell(m, a, "eodds") for a in attrs]
            row += [cell(m, "joint", "eodds")]
            row += [cell(m, a, "eom") for a in attrs]
            row += [cell(m, "joint", "eom")]
            row += [cell(m, "overall", "delta_auc")]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        for i, row in enumerate(rows):
            lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def _aggregate(method: str, runs: list[RunResult], attributes: list[str]) -> MethodAggregate:
    runs = sorted(runs, key=lambda r: r.seed)

    def collect(getter) -> tuple[float | None, float | None, int]:
        vals = [v for v in (getter(r) for r in runs) if v is not None]
        if not vals:
            return None, None, 0
        arr = np.asarray(vals, dtype=np.float64)
        se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        return float(arr.mean()), se, arr.size

    metrics: dict[tuple[str, str], tuple] = {}
    for attribute in attributes:
        for metric in TABLE_METRICS:
            metrics[(attribute, metric)] = collect(
                lambda r, a=attribute, m=metric: r.report.per_attribute[a][m]
            )
    for metric in TABLE_METRICS:
        metrics[("joint", metric)] = collect(lambda r, m=metric: r.report.joint[m])
    metrics[("overall", "auc")] = collect(lambda r: r.report.macro_auc)
    metrics[("overall", "delta_auc")] = collect(lambda r: r.report.delta_auc)
    return MethodAggregate(method=method, runs=runs, metrics=metrics)


def _attach_deltas(arm_runs: list[RunResult], baseline_runs: list[RunResult]) -> None:
    base_by_seed = {r.seed: r for r in baseline_runs}
    for run in arm_runs:
        base = base_by_seed[run.seed]
        run.report.baseline_method = base.method
        if run.report.macro_auc is not None and base.report.macro_auc is not None:
            run.report.delta_auc = run.report.macro_auc - base.report.macro_auc


def _run_arms(
    cohort: data_mod.Cohort,
    base_cfg: TrainConfig,
    arms: list[tuple[str, FairLossConfig]],
    seeds: tuple[int, ...],
    jobs: int,
) -> ExperimentResult:
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds for mean/se aggregation")
    tasks = []
    for method, fair_cfg in arms:
        cfg = replace(base_cfg, fair=fair_cfg)
        for seed in seeds:
            tasks.append((cohort, cfg, seed, method))
    results = _execute(tasks, jobs)
    by_method: dict[str, list[RunResult]] = {name: [] for name, _ in arms}
    for r in results:
        by_method[r.method].append(r)

    baseline_runs = by_method[arms[0][0]]
    for run in baseline_runs:  # self-reference: delta is identically zero
        run.report.baseline_method = run.method
        run.report.delta_auc = 0.0
    for name, _ in arms[1:]:
        _attach_deltas(by_method[name], baseline_runs)

    attributes = [name for name, _ in cohort.config.schema]
    return ExperimentResult(
        attributes=attributes,
        seeds=tuple(seeds),
        methods=[_aggregate(name, by_method[name], attributes) for name, _ in arms],
    )


def run_experiment(
    cohort: data_mod.Cohort,
    base_cfg: TrainConfig,
    fair_cfg: FairLossConfig,
    seeds: tuple[int, ...] | None = None,
    jobs: int = 1,
) -> ExperimentResult:
    """Baseline (both lambdas zero) vs regularized, per seed, aggregated."""
    seeds = tuple(seeds) if seeds is not None else base_cfg.seeds
    baseline = FairLossConfig(0.0, 0.0, fair_cfg.min_group_count)
    return _run_arms(
        cohort, base_cfg, [("baseline", baseline), ("fair", fair_cfg)], seeds, jobs
    )


def run_ablation(
    cohort: data_mod.Cohort,
    cfg: TrainConfig,
    seeds: tuple[int, ...] | None = None,
    jobs: int = 1,
) -> ExperimentResult:
    """Single-term arms and the both-terms arm against the baseline."""
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    lp, lm, mgc = cfg.fair.lambda_plus, cfg.fair.lambda_minus, cfg.fair.min_group_count
    if lp <= 0 or lm <= 0:
        raise ValueError("ablation needs positive lambda_plus and lambda_minus in cfg.fair")
    arms = [
        ("baseline", FairLossConfig(0.0, 0.0, mgc)),
        ("eo_plus", FairLossConfig(lp, 0.0, mgc)),
        ("eo_minus", FairLossConfig(0.0, lm, mgc)),
        ("both", FairLossConfig(lp, lm, mgc)),
    ]
    return _run_arms(cohort, cfg, arms, seeds, jobs)
