"""Shared test helpers: finite-difference oracles and small problem builders."""

from __future__ import annotations

import numpy as np
import pytest

from fairmargin.autodiff import Tape
from fairmargin.fairloss import BatchView, FairLossConfig, SubgroupCatalog, loss_parts
from fairmargin.model import MlpConfig, MlpParams, forward, init_mlp


def finite_diff_grads(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar f(arrays) w.r.t. every element.

    Perturbs the arrays in place and restores them, so ``f`` must read the
    same array objects on every call.
    """
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_a.size):
            orig = flat_a[i]
            flat_a[i] = orig + h
            f_plus = f()
            flat_a[i] = orig - h
            f_minus = f()
            flat_a[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """Max |a - n| / max(|a|, |n|, 1e-3) over all gradient entries.

    The 1e-3 floor keeps finite-difference noise on near-zero gradients
    (truncation ~h^2, cancellation ~eps/h) from registering as relative error.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def two_group_catalog(membership_a: np.ndarray) -> SubgroupCatalog:
    """One attribute, two groups partitioning the batch by a boolean mask."""
    member = np.asarray(membership_a, dtype=bool)
    return SubgroupCatalog(
        groups=(("grp", "a"), ("grp", "b")),
        membership=np.stack([member, ~member]),
    )


def random_batch_problem(seed: int, batch: int = 12, dim: int = 5, k_classes: int = 2):
    """A small MLP + batch whose composite loss is safely away from kinks.

    Finite differences are only a valid oracle at differentiable points, so
    draws whose hinge margins or hidden pre-activations sit within 1e-3 of
    zero are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(50):
        features = rng.normal(size=(batch, dim))
        labels = (rng.random((batch, k_classes)) < 0.5).astype(float)
        member = rng.random(batch) < 0.5
        if not member.any() or member.all():
            continue
        catalog = two_group_catalog(member)
        cfg = MlpConfig(input_dim=dim, hidden_dims=(6,), num_classes=k_classes, init_seed=seed)
        params = init_mlp(cfg)
        for w, _ in params.layers:
            w.data += 0.3 * rng.normal(size=w.shape)  # break init symmetry a bit

        fair = FairLossConfig(lambda_plus=0.7, lambda_minus=0.9, min_group_count=1)

        def compute(return_parts=False):
            tape = Tape()
            params.attach(tape)
            x = tape.constant(features)
            logits = forward(params, x)
            bv = BatchView(
                logits=logits, labels=labels, group_masks=catalog.membership
            )
            parts = loss_parts(bv, fair, catalog)
            if return_parts:
                return tape, parts
            return parts.total.item()

        # reject draws too close to a relu or hinge kink for the FD oracle
        tape, parts = compute(return_parts=True)
        hidden_pre = features @ params.layers[0][0].data + params.layers[0][1].data
        if np.min(np.abs(hidden_pre)) < 1e-3:
            continue
        if any(
            abs(node.parents[0].item()) < 1e-3
            for node in tape.nodes
            if node.op == "hinge"
        ):
            continue
        return params, compute, fair, catalog, features, labels
    raise RuntimeError(f"could not build a kink-free random problem for seed {seed}")


@pytest.fixture
def tape() -> Tape:
    return Tape()
