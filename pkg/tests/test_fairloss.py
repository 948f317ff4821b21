"""Worst-group selection and margin-loss tests against scalar oracles.

The reference computations here use naive formulas (plain math.log/exp over
python floats), independent of the tape ops they check.
"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fairmargin.autodiff import Tape
from fairmargin.fairloss import (
    BatchView,
    FairLossConfig,
    SubgroupCatalog,
    group_means,
    loss_parts,
    margin_eo_minus,
    margin_eo_plus,
    select_worst_groups,
    total_loss,
)
from conftest import finite_diff_grads, max_rel_error, random_batch_problem, two_group_catalog


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def make_batch(logits_2d, labels_2d, group_masks) -> tuple[Tape, BatchView]:
    tape = Tape()
    logits = tape.parameter(np.atleast_2d(np.asarray(logits_2d, dtype=float)))
    return tape, BatchView(
        logits=logits,
        labels=np.atleast_2d(np.asarray(labels_2d, dtype=float)),
        group_masks=np.asarray(group_masks, dtype=bool),
    )


# --- reference arithmetic -------------------------------------------------


def ref_lse_max(vals) -> float:
    return math.log(sum(math.exp(v) for v in vals))


def ref_margin_plus(neg_logits, worst_pos_logits) -> float:
    return ref_lse_max(neg_logits) + math.log(sum(math.exp(-v) for v in worst_pos_logits))


def ref_margin_minus(worst_neg_logits, pos_logits) -> float:
    return ref_lse_max(worst_neg_logits) + math.log(sum(math.exp(-v) for v in pos_logits))


def ref_bce(logits, labels) -> float:
    return sum(math.log(1 + math.exp(l)) - y * l for l, y in zip(logits, labels)) / len(logits)


# --- group means and worst-group selection ---------------------------------


class TestGroupMeans:
    def test_positive_means_per_group(self):
        # group a positives with probs .9/.8, group b positive with prob .4
        probs = [0.9, 0.8, 0.4, 0.3]
        logits = [[logit(p)] for p in probs]
        labels = [[1.0], [1.0], [1.0], [0.0]]
        masks = [[True, True, False, False], [False, False, True, True]]
        _, batch = make_batch(logits, labels, masks)
        mu_plus, mu_minus = group_means(batch, 0)
        assert mu_plus[0] == pytest.approx(0.85, abs=1e-12)
        assert mu_plus[1] == pytest.approx(0.4, abs=1e-12)
        assert mu_minus[0] is None  # no negatives in group a
        assert mu_minus[1] == pytest.approx(0.3, abs=1e-12)

    def test_absent_pool_is_none_not_zero(self):
        _, batch = make_batch([[1.0], [0.5]], [[0.0], [0.0]], [[True, False], [False, True]])
        mu_plus, _ = group_means(batch, 0)
        assert mu_plus == [None, None]

    def test_all_half_probs(self):
        _, batch = make_batch(
            [[0.0], [0.0], [0.0]],
            [[1.0], [1.0], [0.0]],
            [[True, False, True], [False, True, False]],
        )
        mu_plus, mu_minus = group_means(batch, 0)
        assert mu_plus == [0.5, 0.5]
        assert mu_minus == [0.5, None]

    def test_min_group_count_filters_small_pools(self):
        _, batch = make_batch(
            [[1.0], [2.0], [3.0]],
            [[1.0], [1.0], [1.0]],
            [[True, True, False], [False, False, True]],
        )
        mu_plus, _ = group_means(batch, 0, min_group_count=2)
        assert mu_plus[0] is not None and mu_plus[1] is None


class TestSelectWorstGroups:
    def test_argmin_argmax(self):
        g_plus, g_minus = select_worst_groups([0.85, 0.4], [0.1, 0.7])
        assert g_plus == 1 and g_minus == 1

    def test_tie_breaks_to_lowest_index(self):
        g_plus, g_minus = select_worst_groups([0.2, 0.2, 0.5], [0.2, 0.2, 0.1])
        assert g_plus == 0 and g_minus == 0

    def test_all_absent_gives_none(self):
        assert select_worst_groups([None, None], [None, None]) == (None, None)

    def test_absent_entries_skipped(self):
        g_plus, g_minus = select_worst_groups([None, 0.9, 0.8], [0.3, None, 0.4])
        assert g_plus == 2 and g_minus == 2

    def test_invariant_under_strictly_monotone_transform(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            mu_p = [None if rng.random() < 0.2 else float(rng.random()) for _ in range(5)]
            mu_m = [None if rng.random() < 0.2 else float(rng.random()) for _ in range(5)]
            base = select_worst_groups(mu_p, mu_m)
            for h in (lambda v: 3.0 * v + 1.0, math.exp, lambda v: v**3):
                mapped = select_worst_groups(
                    [None if v is None else h(v) for v in mu_p],
                    [None if v is None else h(v) for v in mu_m],
                )
                assert mapped == base


# --- margins ----------------------------------------------------------------


class TestMargins:
    def test_eo_plus_inactive_case(self):
        # one negative logit -1, one worst-group positive logit 2
        tape, batch = make_batch(
            [[-1.0], [2.0]], [[0.0], [1.0]], [[False, True], [True, False]]
        )
        m = margin_eo_plus(batch, 0, 0)
        assert m.item() == pytest.approx(-3.0, abs=1e-12)

    def test_eo_plus_active_case(self):
        tape, batch = make_batch(
            [[3.0], [1.0]], [[0.0], [1.0]], [[False, True], [True, False]]
        )
        m = margin_eo_plus(batch, 0, 0)
        assert m.item() == pytest.approx(2.0, abs=1e-12)

    def test_eo_minus_inactive_case(self):
        # worst-group negative logit -2, one positive logit 4
        tape, batch = make_batch(
            [[-2.0], [4.0]], [[0.0], [1.0]], [[True, False], [False, True]]
        )
        m = margin_eo_minus(batch, 0, 0)
        assert m.item() == pytest.approx(-6.0, abs=1e-12)

    def test_eo_minus_active_case(self):
        tape, batch = make_batch(
            [[1.0], [0.0]], [[0.0], [1.0]], [[True, False], [False, True]]
        )
        m = margin_eo_minus(batch, 0, 0)
        assert m.item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_reference_arithmetic_on_random_batches(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = 10
            logits = rng.normal(size=n)
            labels = (rng.random(n) < 0.5).astype(float)
            member = rng.random(n) < 0.5
            if labels.sum() in (0, n) or not member.any() or member.all():
                continue
            _, batch = make_batch(
                logits[:, None], labels[:, None], np.stack([member, ~member])
            )
            for g in (0, 1):
                pos_g = logits[(labels == 1) & (member == (g == 0))]
                neg_g = logits[(labels == 0) & (member == (g == 0))]
                if pos_g.size:
                    expected = ref_margin_plus(logits[labels == 0], pos_g)
                    assert margin_eo_plus(batch, 0, g).item() == pytest.approx(
                        expected, abs=1e-10
                    )
                if neg_g.size:
                    expected = ref_margin_minus(neg_g, logits[labels == 1])
                    assert margin_eo_minus(batch, 0, g).item() == pytest.approx(
                        expected, abs=1e-10
                    )

    def test_label_flip_logit_negation_duality(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = 8
            logits = rng.normal(size=n)
            labels = (rng.random(n) < 0.5).astype(float)
            member = rng.random(n) < 0.5
            if not member.any():
                continue
            g = 0
            has_neg_in_g = np.any((labels == 0) & member)
            has_pos = np.any(labels == 1)
            if not (has_neg_in_g and has_pos):
                continue
            _, batch = make_batch(logits[:, None], labels[:, None], np.stack([member, ~member]))
            _, flipped = make_batch(
                -logits[:, None], (1.0 - labels)[:, None], np.stack([member, ~member])
            )
            a = margin_eo_minus(batch, 0, g).item()
            b = margin_eo_plus(flipped, 0, g).item()
            assert abs(a - b) <= 1e-12

    def test_monotonicity_in_logits(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=6)
        labels = np.array([1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
        member = np.array([True, True, False, True, False, False])
        bump = 0.3

        def margin(vals) -> float:
            _, batch = make_batch(vals[:, None], labels[:, None], np.stack([member, ~member]))
            return margin_eo_plus(batch, 0, 0).item()

        base = margin(logits)
        for i in np.flatnonzero((labels == 1) & member):  # worst-group positives
            up = logits.copy()
            up[i] += bump
            assert margin(up) <= base + 1e-12
        for i in np.flatnonzero(labels == 0):  # any negative
            up = logits.copy()
            up[i] += bump
            assert margin(up) >= base - 1e-12

    def test_empty_negative_pool_raises_and_total_loss_zeroes_it(self):
        # all-positive batch: Eq-4 negative pool empty
        tape, batch = make_batch(
            [[1.0], [2.0]], [[1.0], [1.0]], [[True, False], [False, True]]
        )
        from fairmargin.autodiff import EmptyPoolError

        with pytest.raises(EmptyPoolError):
            margin_eo_plus(batch, 0, 0)
        catalog = two_group_catalog(np.array([True, False]))
        parts = loss_parts(batch, FairLossConfig(1.0, 1.0), catalog)
        assert parts.eo_plus.item() == 0.0
        assert parts.eo_minus.item() == 0.0  # no negatives anywhere either
        assert parts.total.item() == pytest.approx(
            parts.bce.item(), abs=0.0
        )


# --- combined objective ------------------------------------------------------


class TestTotalLoss:
    def test_zero_lambdas_reduce_to_plain_bce_bitwise(self):
        rng = np.random.default_rng(3)
        logits_val = rng.normal(size=(6, 1))
        labels = (rng.random((6, 1)) < 0.5).astype(float)
        member = np.array([True, False, True, False, True, False])
        catalog = two_group_catalog(member)

        tape, batch = make_batch(logits_val, labels, catalog.membership)
        loss = total_loss(batch, FairLossConfig(0.0, 0.0), catalog)
        from fairmargin.autodiff import bce_with_logits, scale

        tape2 = Tape()
        logits2 = tape2.parameter(logits_val)
        reference = scale(bce_with_logits(logits2, labels, mask=np.ones(6, dtype=bool)), 1.0)
        assert loss.item() == reference.item()
        tape.backward(loss)
        tape2.backward(reference)
        assert_array_equal(batch.logits.grad, logits2.grad)

    def test_inactive_hinges_leave_exactly_bce(self):
        # hugely separated: all margins deeply negative, hinge clamps to zero
        logits = [[-20.0], [20.0], [-21.0], [22.0]]
        labels = [[0.0], [1.0], [0.0], [1.0]]
        member = np.array([True, True, False, False])
        catalog = two_group_catalog(member)
        _, batch = make_batch(logits, labels, catalog.membership)
        parts = loss_parts(batch, FairLossConfig(2.0, 3.0), catalog)
        assert parts.eo_plus.item() == 0.0 and parts.eo_minus.item() == 0.0
        assert parts.total.item() == parts.bce.item()

    def test_four_sample_scalar_oracle(self):
        """Hand-built K=1 batch against independent scalar arithmetic."""
        logits = np.array([0.8, -0.4, 0.1, -0.9])
        labels = np.array([1.0, 1.0, 0.0, 0.0])
        member = np.array([True, False, True, False])  # group a: samples 0, 2
        lam_p, lam_m = 0.7, 1.3
        catalog = two_group_catalog(member)
        _, batch = make_batch(logits[:, None], labels[:, None], catalog.membership)
        got = total_loss(batch, FairLossConfig(lam_p, lam_m), catalog)

        # worst groups by sigmoid means: positives a={0.8} vs b={-0.4};
        # negatives a={0.1} vs b={-0.9}
        sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
        assert sig(0.8) > sig(-0.4)
        worst_pos = [-0.4]  # group b
        worst_neg = [0.1]  # group a
        margin_p = ref_margin_plus([0.1, -0.9], worst_pos)
        margin_m = ref_margin_minus(worst_neg, [0.8, -0.4])
        expected = (
            ref_bce(logits, labels)
            + lam_p * max(0.0, margin_p)
            + lam_m * max(0.0, margin_m)
        )
        assert got.item() == pytest.approx(expected, abs=1e-10)

    def test_per_term_empty_pool_rule(self):
        # min_group_count=3 starves every positive pool (1 each) while group b
        # keeps 5 negatives, so only the EO+ term is zeroed for this class
        logits = np.array([1.2, 0.3, -0.5, 0.8, -0.2, 0.4, 0.6])
        labels = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        member = np.array([True, False, False, False, False, False, False])
        catalog = two_group_catalog(member)
        _, batch = make_batch(logits[:, None], labels[:, None], catalog.membership)
        parts = loss_parts(batch, FairLossConfig(1.0, 1.0, min_group_count=3), catalog)
        assert parts.worst_plus == [None]
        assert parts.eo_plus.item() == 0.0
        assert parts.worst_minus == [1]  # group b: 5 negatives
        assert parts.eo_minus.item() > 0.0

    def test_multilabel_averages_across_classes(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(8, 3))
        labels = (rng.random((8, 3)) < 0.5).astype(float)
        member = rng.random(8) < 0.5
        member[0] = True
        member[1] = False
        catalog = two_group_catalog(member)
        _, batch = make_batch(logits, labels, catalog.membership)
        parts = loss_parts(batch, FairLossConfig(1.0, 1.0), catalog)
        per_class = [ref_bce(logits[:, k], labels[:, k]) for k in range(3)]
        assert parts.bce.item() == pytest.approx(float(np.mean(per_class)), abs=1e-12)
        assert len(parts.worst_plus) == 3

    def test_shared_membership_contributes_to_both_groups(self):
        # two attributes whose groups coincide: identical pools, identical means
        probs = [0.9, 0.2, 0.6]
        logits = [[logit(p)] for p in probs]
        labels = [[1.0], [1.0], [0.0]]
        masks = np.array(
            [
                [True, False, True],
                [False, True, False],
                [True, False, True],  # attribute 2 mirrors attribute 1
                [False, True, False],
            ]
        )
        catalog = SubgroupCatalog(
            groups=(("a1", "x"), ("a1", "y"), ("a2", "x"), ("a2", "y")),
            membership=masks,
        )
        _, batch = make_batch(logits, labels, masks)
        mu_plus, mu_minus = group_means(batch, 0)
        assert mu_plus[0] == mu_plus[2] and mu_plus[1] == mu_plus[3]
        assert mu_minus[0] == mu_minus[2]

    def test_gradient_matches_finite_differences(self):
        for seed in range(8):
            params, compute, fair, catalog, features, labels = random_batch_problem(seed)

            tape, parts = compute(return_parts=True)
            tape.backward(parts.total)
            analytic = [t.grad.copy() for t in params.tensors()]
            fd = finite_diff_grads(lambda: compute(), params.arrays())
            assert max_rel_error(analytic, fd) < 1e-4, f"seed {seed}"


def test_fair_loss_config_validation():
    with pytest.raises(ValueError):
        FairLossConfig(lambda_plus=-0.1)
    with pytest.raises(ValueError):
        FairLossConfig(lambda_minus=float("nan"))
    with pytest.raises(ValueError):
        FairLossConfig(min_group_count=0)


def test_batch_view_validation():
    tape = Tape()
    logits = tape.constant(np.zeros((3, 1)))
    with pytest.raises(ValueError, match="labels"):
        BatchView(logits=logits, labels=np.zeros((2, 1)), group_masks=np.ones((1, 3), bool))
    with pytest.raises(ValueError, match="group_masks"):
        BatchView(logits=logits, labels=np.zeros((3, 1)), group_masks=np.ones((1, 2), bool))
