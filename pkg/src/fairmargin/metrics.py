"""Threshold-free AUC and operating-point fairness metrics.

AUC uses the Mann-Whitney rank formulation with midranks for ties.  The
operating point is chosen per class on the validation split by maximizing
Youden's J = TPR - FPR over an exhaustive candidate grid (midpoints of
consecutive distinct scores, plus 0 and 1).  Disparity metrics are the
worst-to-best group ratio scores

    eodds = 1 - (min/max TPR + min/max FPR) / 2      (0 = parity, lower better)
    eom   = (min/max TPR + min/max TNR) / 2          (1 = parity, higher better)

computed per attribute over its subgroups, macro-averaged over classes, and
joint-averaged over attributes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "DegenerateLabelsError",
    "InsufficientGroupsError",
    "PredictionSet",
    "OperatingPoint",
    "GroupRates",
    "EvalReport",
    "auc",
    "youden_threshold",
    "select_operating_point",
    "group_rates",
    "eodds",
    "eodds_components",
    "eom",
    "eom_from_rates",
    "build_report",
]


class DegenerateLabelsError(ValueError):
    """Raised when a computation needs both classes but got only one."""


class InsufficientGroupsError(ValueError):
    """Raised when a disparity ratio has fewer than two groups with defined rates."""


@dataclass
class PredictionSet:
    """Scores, labels and demographic attributes for one split."""

    scores: np.ndarray  # N x K floats in [0, 1]
    labels: np.ndarray  # N x K in {0, 1}
    attributes: dict[str, np.ndarray]  # attribute name -> N value labels
    split: str = "test"
    # report ordering of subgroup values; defaults to sorted unique values
    attribute_values: dict[str, list[str]] | None = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.scores.shape != self.labels.shape:
            raise ValueError(
                f"scores shape {self.scores.shape} != labels shape {self.labels.shape}"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        n = self.scores.shape[0]
        self.attributes = {k: np.asarray(v) for k, v in self.attributes.items()}
        for name, vals in self.attributes.items():
            if vals.shape != (n,):
                raise ValueError(f"attribute {name!r} has {vals.shape}, expected ({n},)")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def values_of(self, attribute: str) -> list[str]:
        if self.attribute_values and attribute in self.attribute_values:
            return list(self.attribute_values[attribute])
        return [str(v) for v in np.unique(self.attributes[attribute])]


@dataclass(frozen=True)
class OperatingPoint:
    """One decision threshold per class; predictions are score >= threshold."""

    thresholds: tuple[float, ...]

    def predict(self, scores: np.ndarray) -> np.ndarray:
        scores = np.atleast_2d(scores)
        if scores.shape[1] != len(self.thresholds):
            raise ValueError(
                f"{scores.shape[1]} score columns vs {len(self.thresholds)} thresholds"
            )
        return scores >= np.asarray(self.thresholds)[None, :]


@dataclass(frozen=True)
class GroupRates:
    tpr: float | None
    fpr: float | None
    support_pos: int
    support_neg: int


def auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form with midranks for ties.

    Equals P(s_pos > s_neg) + 0.5 * P(s_pos = s_neg) over all
    positive-negative pairs.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = rankdata(s, method="average")
    rank_sum = ranks[y == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_candidates(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.unique(np.concatenate(([0.0], mids, [1.0])))


def _youden_scan(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"threshold selection needs both classes, got {n_pos}/{n_neg}"
        )
    cands = _threshold_candidates(scores)
    sorted_pos = np.sort(scores[pos])
    sorted_neg = np.sort(scores[~pos])
    # counts of scores >= t, vectorized over the candidate grid
    tp = n_pos - np.searchsorted(sorted_pos, cands, side="left")
    fp = n_neg - np.searchsorted(sorted_neg, cands, side="left")
    j = tp / n_pos - fp / n_neg
    best = np.flatnonzero(j == j.max())
    return float(cands[best[0]])  # candidates ascend, so ties pick the lowest


def youden_threshold(val_preds: PredictionSet, k: int) -> float:
    """Threshold maximizing J on the whole validation split for class k."""
    return _youden_scan(val_preds.scores[:, k], val_preds.labels[:, k])


def select_operating_point(val_preds: PredictionSet) -> OperatingPoint:
    return OperatingPoint(
        thresholds=tuple(youden_threshold(val_preds, k) for k in range(val_preds.num_classes))
    )


def group_rates(
    preds: PredictionSet, op: OperatingPoint, attribute: str
) -> list[dict[str, GroupRates]]:
    """Per-class, per-subgroup TPR/FPR with supports.

    Rates with a zero denominator are None and get excluded from the
    disparity min/max.
    """
    pred = op.predict(preds.scores)
    attr_vals = preds.attributes[attribute]
    out: list[dict[str, GroupRates]] = []
    for k in range(preds.num_classes):
        y = preds.labels[:, k]
        yhat = pred[:, k]
        per_group: dict[str, GroupRates] = {}
        for value in preds.values_of(attribute):
            member = attr_vals == value
            pos = member & (y == 1)
            neg = member & (y == 0)
            n_pos = int(pos.sum())
            n_neg = int(neg.sum())
            tpr = float(yhat[pos].sum() / n_pos) if n_pos else None
            fpr = float(yhat[neg].sum() / n_neg) if n_neg else None
            per_group[value] = GroupRates(tpr, fpr, n_pos, n_neg)
        out.append(per_group)
    return out


def _present(values: list[float | None]) -> list[float]:
    return [v for v in values if v is not None]


def _ratio(values: list[float]) -> float:
    # min/max worst-to-best ratio; all-zero rates count as perfect parity
    mx = max(values)
    if mx == 0.0:
        return 1.0
    return min(values) / mx


def eodds_components(rates: dict[str, GroupRates]) -> tuple[float, float]:
    """(min/max TPR, min/max FPR) over groups with defined rates."""
    tprs = _present([r.tpr for r in rates.values()])
    fprs = _present([r.fpr for r in rates.values()])
    if len(tprs) < 2 or len(fprs) < 2:
        raise InsufficientGroupsError(
            f"need >= 2 groups with defined TPR and FPR, got {len(tprs)}/{len(fprs)}"
        )
    return _ratio(tprs), _ratio(fprs)


def eodds(rates: dict[str, GroupRates]) -> float:
    """Equalized-odds disparity in [0, 1]; 0 means perfect parity."""
    tpr_ratio, fpr_ratio = eodds_components(rates)
    return 1.0 - 0.5 * (tpr_ratio + fpr_ratio)


def eom_from_rates(rates: dict[str, GroupRates]) -> float:
    """Per-class opportunity balance: mean of TPR and TNR worst-to-best ratios."""
    tprs = _present([r.tpr for r in rates.values()])
    tnrs = _present([1.0 - r.fpr if r.fpr is not None else None for r in rates.values()])
    if len(tprs) < 2 or len(tnrs) < 2:
        raise InsufficientGroupsError(
            f"need >= 2 groups with defined TPR and TNR, got {len(tprs)}/{len(tnrs)}"
        )
    return 0.5 * (_ratio(tprs) + _ratio(tnrs))


def eom(preds: PredictionSet, op: OperatingPoint, attribute: str, k: int) -> float:
    """Opportunity balance for one attribute and one class head."""
    return eom_from_rates(group_rates(preds, op, attribute)[k])


def _mean_present(values: list[float | None]) -> float | None:
    present = _present(values)
    if not present:
        return None
    return float(np.mean(present))


@dataclass
class EvalReport:
    """Per-attribute and joint disparity metrics plus AUC at one operating point."""

    method: str
    attributes: list[str]
    num_classes: int
    thresholds: tuple[float, ...]
    # attribute -> per-class list of cells; each cell holds the metric values
    # (None where undefined) and the per-subgroup rates behind them
    per_class: dict[str, list[dict]]
    # attribute -> macro (class-averaged) eodds/eom/tpr_ratio/fpr_ratio
    per_attribute: dict[str, dict]
    joint: dict
    auc_per_class: list[float | None]
    macro_auc: float | None
    delta_auc: float | None = None
    baseline_method: str | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def cell_dict(cell: dict) -> dict:
            out = {m: cell[m] for m in ("eodds", "eom", "tpr_ratio", "fpr_ratio")}
            out["groups"] = {
                value: {
                    "tpr": r.tpr,
                    "fpr": r.fpr,
                    "support_pos": r.support_pos,
                    "support_neg": r.support_neg,
                }
                for value, r in cell["rates"].items()
            }
            return out

        return {
            "method": self.method,
            "attributes": self.attributes,
            "num_classes": self.num_classes,
            "thresholds": list(self.thresholds),
            "per_class": {
                attr: [cell_dict(c) for c in cells] for attr, cells in self.per_class.items()
            },
            "per_attribute": self.per_attribute,
            "joint": self.joint,
            "auc_per_class": self.auc_per_class,
            "macro_auc": self.macro_auc,
            "delta_auc": self.delta_auc,
            "baseline_method": self.baseline_method,
            "flags": self.flags,
        }

    def table_rows(self) -> list[tuple[str, str, str, str, str]]:
        """Flat (method, attribute, class, metric, value) rows."""

        def fmt(v) -> str:
            return "" if v is None else repr(float(v))

        rows: list[tuple[str, str, str, str, str]] = []
        for attr in self.attributes:
            for k, cell in enumerate(self.per_class[attr]):
                for metric in ("eodds", "eom", "tpr_ratio", "fpr_ratio"):
                    rows.append((self.method, attr, str(k), metric, fmt(cell[metric])))
                for value, r in cell["rates"].items():
                    rows.append((self.method, attr, str(k), f"tpr[{value}]", fmt(r.tpr)))
                    rows.append((self.method, attr, str(k), f"fpr[{value}]", fmt(r.fpr)))
            for metric in ("eodds", "eom", "tpr_ratio", "fpr_ratio"):
                rows.append(
                    (self.method, attr, "macro", metric, fmt(self.per_attribute[attr][metric]))
                )
        for metric in ("eodds", "eom", "tpr_ratio", "fpr_ratio"):
            rows.append((self.method, "joint", "macro", metric, fmt(self.joint[metric])))
        for k, v in enumerate(self.auc_per_class):
            rows.append((self.method, "overall", str(k), "auc", fmt(v)))
        rows.append((self.method, "overall", "macro", "auc", fmt(self.macro_auc)))
        rows.append((self.method, "overall", "macro", "delta_auc", fmt(self.delta_auc)))
        return rows

    def save(self, json_path=None, table_path=None) -> None:
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        if table_path is not None:
            with open(table_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["method", "attribute", "class", "metric", "value"])
                writer.writerows(self.table_rows())


def build_report(
    test_preds: PredictionSet,
    op: OperatingPoint,
    baseline_report: EvalReport | None = None,
    method: str = "model",
) -> EvalReport:
    """Assemble the full evaluation report on a test split.

    Undefined cells (single-class groups, missing rates) are reported as
    absent and flagged, never raised.
    """
    attributes = list(test_preds.attributes.keys())
    k_classes = test_preds.num_classes
    flags: list[str] = []

    per_class: dict[str, list[dict]] = {}
    per_attribute: dict[str, dict] = {}
    for attr in attributes:
        rates_by_class = group_rates(test_preds, op, attr)
        cells: list[dict] = []
        for k, rates in enumerate(rates_by_class):
            cell: dict = {"rates": rates}
            try:
                tpr_ratio, fpr_ratio = eodds_components(rates)
                cell["tpr_ratio"] = tpr_ratio
                cell["fpr_ratio"] = fpr_ratio
                cell["eodds"] = 1.0 - 0.5 * (tpr_ratio + fpr_ratio)
            except InsufficientGroupsError as exc:
                cell["tpr_ratio"] = cell["fpr_ratio"] = cell["eodds"] = None
                flags.append(f"{attr}/class{k}: eodds absent ({exc})")
            try:
                cell["eom"] = eom_from_rates(rates)
            except InsufficientGroupsError as exc:
                cell["eom"] = None
                flags.append(f"{attr}/class{k}: eom absent ({exc})")
            cells.append(cell)
        per_class[attr] = cells
        per_attribute[attr] = {
            metric: _mean_present([c[metric] for c in cells])
            for metric in ("eodds", "eom", "tpr_ratio", "fpr_ratio")
        }

    joint = {
        metric: _mean_present([per_attribute[a][metric] for a in attributes])
        for metric in ("eodds", "eom", "tpr_ratio", "fpr_ratio")
    }

    auc_per_class: list[float | None] = []
    for k in range(k_classes):
        try:
            auc_per_class.append(auc(test_preds.scores[:, k], test_preds.labels[:, k]))
        except DegenerateLabelsError as exc:
            auc_per_class.append(None)
            flags.append(f"class{k}: auc absent ({exc})")
    macro_auc = _mean_present(auc_per_class)

    delta_auc = None
    baseline_method = None
    if baseline_report is not None:
        baseline_method = baseline_report.method
        if macro_auc is not None and baseline_report.macro_auc is not None:
            delta_auc = macro_auc - baseline_report.macro_auc

    return EvalReport(
        method=method,
        attributes=attributes,
        num_classes=k_classes,
        thresholds=op.thresholds,
        per_class=per_class,
        per_attribute=per_attribute,
        joint=joint,
        auc_per_class=auc_per_class,
        macro_auc=macro_auc,
        delta_auc=delta_auc,
        baseline_method=baseline_method,
        flags=flags,
    )
