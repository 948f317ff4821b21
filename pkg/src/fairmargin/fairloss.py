"""Worst-subgroup equalized-odds margin losses.

Per mini-batch and per class head: find the subgroup whose positives have
the lowest mean predicted probability (under-diagnosis risk) and the one
whose negatives have the highest (over-diagnosis risk), then penalize the
smooth log-sum-exp margins

    margin_plus  = lse_max(logits | y=0) - lse_min(logits | y=1, worst group)
    margin_minus = lse_max(logits | y=0, worst group) - lse_min(logits | y=1)

through a hinge, added to the per-class-averaged BCE.  Group selection is a
hard, non-differentiable choice; gradients flow only through the margins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    EmptyPoolError,
    Tensor,
    add,
    bce_with_logits,
    hinge,
    lse_max,
    lse_min,
    scale,
    sigmoid_values,
    stack_mean,
    sub,
)

__all__ = [
    "SubgroupCatalog",
    "BatchView",
    "FairLossConfig",
    "LossParts",
    "group_means",
    "select_worst_groups",
    "margin_eo_plus",
    "margin_eo_minus",
    "loss_parts",
    "total_loss",
]


@dataclass(frozen=True)
class SubgroupCatalog:
    """The unified set of attribute-value subgroups and sample membership.

    ``groups`` is ordered: attributes in schema order, values in schema order
    within each attribute.  That ordering is the tie-breaking order for
    worst-group selection.  ``membership`` is a groups x samples boolean
    matrix; each sample is a member of exactly one group per attribute.
    """

    groups: tuple[tuple[str, str], ...]
    membership: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.membership, dtype=bool)
        object.__setattr__(self, "membership", m)
        if m.ndim != 2 or m.shape[0] != len(self.groups):
            raise ValueError(
                f"membership shape {m.shape} does not match {len(self.groups)} groups"
            )

    @classmethod
    def from_codes(
        cls,
        schema: list[tuple[str, list[str]]],
        codes: dict[str, np.ndarray],
    ) -> "SubgroupCatalog":
        """Build from per-attribute integer value codes."""
        groups: list[tuple[str, str]] = []
        rows: list[np.ndarray] = []
        for name, values in schema:
            attr_codes = np.asarray(codes[name])
            for vi, value in enumerate(values):
                groups.append((name, value))
                rows.append(attr_codes == vi)
        return cls(groups=tuple(groups), membership=np.array(rows, dtype=bool))

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_samples(self) -> int:
        return self.membership.shape[1]

    @property
    def attributes(self) -> list[str]:
        seen: list[str] = []
        for name, _ in self.groups:
            if name not in seen:
                seen.append(name)
        return seen

    def batch_masks(self, indices: np.ndarray) -> np.ndarray:
        """Membership restricted to a batch: groups x batch boolean matrix."""
        return self.membership[:, np.asarray(indices)]

    def sample_groups(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.membership[:, i]).tolist())


@dataclass
class BatchView:
    """One mini-batch as the loss sees it."""

    logits: Tensor  # B x K, on the live tape
    labels: np.ndarray  # B x K in {0, 1}
    group_masks: np.ndarray  # G x B boolean

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.group_masks = np.asarray(self.group_masks, dtype=bool)
        b = self.logits.shape[0]
        if self.labels.shape != self.logits.shape:
            raise ValueError(
                f"labels shape {self.labels.shape} != logits shape {self.logits.shape}"
            )
        if self.group_masks.ndim != 2 or self.group_masks.shape[1] != b:
            raise ValueError(f"group_masks shape {self.group_masks.shape} not G x {b}")

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class FairLossConfig:
    # default weights are validation-tuned for the default synthetic cohort
    lambda_plus: float = 1.5
    lambda_minus: float = 1.5
    min_group_count: int = 1

    def __post_init__(self):
        for name in ("lambda_plus", "lambda_minus"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.min_group_count < 1:
            raise ValueError(f"min_group_count must be >= 1, got {self.min_group_count}")


def group_means(
    batch: BatchView, k: int, min_group_count: int = 1
) -> tuple[list[float | None], list[float | None]]:
    """Mean predicted probability per group over positives and negatives.

    A group's mean is absent (None) when its pool for class ``k`` has fewer
    than ``min_group_count`` samples in the batch.  Probabilities come from
    the same forward pass the loss uses; no gradient flows through them.
    """
    probs = sigmoid_values(batch.logits.data[:, k])
    pos = batch.labels[:, k] == 1.0
    neg = ~pos
    mu_plus: list[float | None] = []
    mu_minus: list[float | None] = []
    for g in range(batch.group_masks.shape[0]):
        member = batch.group_masks[g]
        pool_p = member & pos
        pool_m = member & neg
        mu_plus.append(float(probs[pool_p].mean()) if pool_p.sum() >= min_group_count else None)
        mu_minus.append(float(probs[pool_m].mean()) if pool_m.sum() >= min_group_count else None)
    return mu_plus, mu_minus


def select_worst_groups(
    mu_plus: list[float | None], mu_minus: list[float | None]
) -> tuple[int | None, int | None]:
    """Argmin of present positive means and argmax of present negative means.

    Ties break toward the lowest group index; absent everywhere gives None.
    """
    g_min_plus: int | None = None
    for g, v in enumerate(mu_plus):
        if v is not None and (g_min_plus is None or v < mu_plus[g_min_plus]):
            g_min_plus = g
    g_max_minus: int | None = None
    for g, v in enumerate(mu_minus):
        if v is not None and (g_max_minus is None or v > mu_minus[g_max_minus]):
            g_max_minus = g
    return g_min_plus, g_max_minus


def _class_column(batch: BatchView, k: int) -> np.ndarray:
    m = np.zeros((batch.batch_size, batch.num_classes), dtype=bool)
    m[:, k] = True
    return m


def margin_eo_plus(batch: BatchView, k: int, g: int) -> Tensor:
    """TPR-side margin: all-batch negatives vs worst-group positives.

    Raises EmptyPoolError when either pool is empty; the combined loss maps
    that to a zero contribution.
    """
    col = _class_column(batch, k)
    neg = col & (batch.labels == 0.0)
    pos_g = col & (batch.labels == 1.0) & batch.group_masks[g][:, None]
    return sub(
        lse_max(batch.logits, neg.reshape(-1)),
        lse_min(batch.logits, pos_g.reshape(-1)),
    )


def margin_eo_minus(batch: BatchView, k: int, g: int) -> Tensor:
    """FPR-side margin: worst-group negatives vs all-batch positives."""
    col = _class_column(batch, k)
    neg_g = col & (batch.labels == 0.0) & batch.group_masks[g][:, None]
    pos = col & (batch.labels == 1.0)
    return sub(
        lse_max(batch.logits, neg_g.reshape(-1)),
        lse_min(batch.logits, pos.reshape(-1)),
    )


@dataclass
class LossParts:
    """Scalar tensors making up the training objective, plus diagnostics."""

    total: Tensor
    bce: Tensor
    eo_plus: Tensor | None
    eo_minus: Tensor | None
    worst_plus: list[int | None] = field(default_factory=list)
    worst_minus: list[int | None] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        out = {"total": self.total.item(), "bce": self.bce.item()}
        out["eo_plus"] = self.eo_plus.item() if self.eo_plus is not None else 0.0
        out["eo_minus"] = self.eo_minus.item() if self.eo_minus is not None else 0.0
        return out


def loss_parts(batch: BatchView, cfg: FairLossConfig, catalog: SubgroupCatalog) -> LossParts:
    """BCE plus the two hinge-LSE penalties, each averaged over classes.

    A fairness term with zero weight is skipped entirely, so a zero-lambda
    run computes exactly the BCE-only objective.  Empty pools (no positives
    or no negatives for a class in the batch, or no eligible group) zero the
    affected term for that class only.
    """
    if batch.group_masks.shape[0] != catalog.num_groups:
        raise ValueError(
            f"batch has {batch.group_masks.shape[0]} group masks, "
            f"catalog defines {catalog.num_groups}"
        )
    k_classes = batch.num_classes
    tape = batch.logits.tape
    zero = lambda: tape.constant(0.0)  # noqa: E731

    bce_terms = [
        bce_with_logits(batch.logits, batch.labels, mask=_class_column(batch, k).reshape(-1))
        for k in range(k_classes)
    ]
    bce = stack_mean(bce_terms)

    need_plus = cfg.lambda_plus > 0.0
    need_minus = cfg.lambda_minus > 0.0
    plus_terms: list[Tensor] = []
    minus_terms: list[Tensor] = []
    worst_plus: list[int | None] = []
    worst_minus: list[int | None] = []
    if need_plus or need_minus:
        for k in range(k_classes):
            mu_plus, mu_minus = group_means(batch, k, cfg.min_group_count)
            g_plus, g_minus = select_worst_groups(mu_plus, mu_minus)
            worst_plus.append(g_plus)
            worst_minus.append(g_minus)
            if need_plus:
                if g_plus is None:
                    plus_terms.append(zero())
                else:
                    try:
                        plus_terms.append(hinge(margin_eo_plus(batch, k, g_plus)))
                    except EmptyPoolError:
                        plus_terms.append(zero())
            if need_minus:
                if g_minus is None:
                    minus_terms.append(zero())
                else:
                    try:
                        minus_terms.append(hinge(margin_eo_minus(batch, k, g_minus)))
                    except EmptyPoolError:
                        minus_terms.append(zero())

    total = bce
    eo_plus = stack_mean(plus_terms) if need_plus else None
    eo_minus = stack_mean(minus_terms) if need_minus else None
    if eo_plus is not None:
        total = add(total, scale(eo_plus, cfg.lambda_plus))
    if eo_minus is not None:
        total = add(total, scale(eo_minus, cfg.lambda_minus))
    return LossParts(
        total=total,
        bce=bce,
        eo_plus=eo_plus,
        eo_minus=eo_minus,
        worst_plus=worst_plus,
        worst_minus=worst_minus,
    )


def total_loss(batch: BatchView, cfg: FairLossConfig, catalog: SubgroupCatalog) -> Tensor:
    """The combined training objective as a single scalar tensor."""
    return loss_parts(batch, cfg, catalog).total
