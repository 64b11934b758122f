import itertools
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_context, random_joint
from curlgauge.core import (
    LogitTable,
    LogitTableOracle,
    PartialContext,
    PerturbedConditionalModel,
    TabularJointModel,
    Vocabulary,
    apply_logit_shift,
    bayes_conditional,
    load_model,
    log_normalize,
    model_from_dict,
    perturbed_conditional,
    save_model,
)
from curlgauge.errors import ContractViolationError, DimensionError, SizeCapError
from curlgauge.pseudojoint import ExhaustivePlan, curl_local, ecirc_abs


class TestPartialContext:
    def test_rejects_overlap(self):
        with pytest.raises(ContractViolationError):
            PartialContext(observed={0: 1}, block=(0, 1))

    def test_rejects_duplicate_block(self):
        with pytest.raises(ContractViolationError):
            PartialContext(observed={}, block=(1, 1))

    def test_rejects_negative_time(self):
        with pytest.raises(ContractViolationError):
            PartialContext(observed={}, block=(0,), time=-1.0)

    def test_assign_moves_position(self):
        ctx = PartialContext(observed={0: 2}, block=(1, 2))
        out = ctx.assign(1, 0)
        assert out.observed == {0: 2, 1: 0}
        assert out.block == (2,)
        with pytest.raises(ContractViolationError):
            ctx.assign(0, 1)

    def test_dict_round_trip(self):
        ctx = PartialContext(observed={2: 1}, block=(0, 3), time=4.0)
        assert PartialContext.from_dict(ctx.to_dict()) == ctx


class TestBayesConditional:
    def test_uniform_symmetry(self):
        joint = TabularJointModel.uniform(2, 2)
        ctx = PartialContext(observed={}, block=(0, 1))
        assert bayes_conditional(joint, 0, 0, ctx) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_hand_marginalized_two_by_two(self, two_by_two):
        ctx = PartialContext(observed={0: 0}, block=(1,))
        assert bayes_conditional(two_by_two, 1, 0, ctx) == pytest.approx(math.log(0.8), abs=1e-12)

    def test_matches_brute_force_mass_ratio(self):
        joint = random_joint(5, positions=4, vocab=3)
        ctx = PartialContext(observed={0: 1, 3: 2}, block=(1,))
        table = np.exp(joint.log_mass_nd)
        num = table[1, :, :, 2][0, :].sum()
        den = table[1, :, :, 2].sum()
        assert joint.log_conditional(1, 0, ctx) == pytest.approx(math.log(num / den), abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_normalization(self, seed):
        joint = random_joint(seed, positions=3, vocab=4)
        ctx = random_context(seed, joint)
        for i in ctx.block:
            total = np.exp(joint.log_conditional_dist(i, ctx)).sum()
            assert abs(total - 1.0) < 1e-9

    def test_observed_position_is_contract_violation(self, two_by_two):
        ctx = PartialContext(observed={0: 0}, block=(1,))
        with pytest.raises(ContractViolationError):
            two_by_two.log_conditional(0, 0, ctx)

    def test_out_of_range_is_dimension_error(self, two_by_two):
        with pytest.raises(DimensionError):
            two_by_two.log_conditional(5, 0, PartialContext({}, (0, 1)))
        with pytest.raises(DimensionError):
            two_by_two.log_conditional(0, 7, PartialContext({}, (0, 1)))
        with pytest.raises(DimensionError):
            two_by_two.log_conditional(1, 0, PartialContext({0: 5}, (1,)))

    def test_size_caps(self):
        with pytest.raises(SizeCapError):
            TabularJointModel(9, 2, np.zeros(81))
        with pytest.raises(SizeCapError):
            TabularJointModel(2, 7, np.zeros(128))

    def test_positivity_floor(self):
        joint = TabularJointModel.from_probabilities(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert np.all(joint.log_mass > -np.inf)
        assert np.all(np.isfinite(joint.log_mass))

    def test_vocabulary_minimum(self):
        with pytest.raises(ContractViolationError):
            Vocabulary(1)

    def test_log_mass_is_normalized(self):
        joint = random_joint(11, positions=3, vocab=3)
        from scipy.special import logsumexp

        assert abs(logsumexp(joint.log_mass)) < 1e-9


class TestPerturbedModel:
    def test_delta_zero_matches_renormalized_base(self):
        joint = random_joint(7, positions=3, vocab=3)
        pert = PerturbedConditionalModel(joint, 0.0, 99)
        for assigned in ({}, {0: 1}, {0: 2, 2: 1}):
            i = 1
            assert np.array_equal(pert.log_dist(i, assigned), log_normalize(joint.log_dist(i, assigned)))

    def test_perturbed_is_normalized(self):
        joint = random_joint(8, positions=3, vocab=4)
        pert = PerturbedConditionalModel(joint, 0.5, 3)
        ctx = PartialContext({}, (0, 1, 2))
        for i in range(3):
            assert abs(np.exp(pert.log_conditional_dist(i, ctx)).sum() - 1.0) < 1e-9

    def test_bit_identical_across_constructions(self):
        joint = random_joint(9, positions=3, vocab=3)
        a = PerturbedConditionalModel(joint, 0.4, 17)
        b = PerturbedConditionalModel(joint, 0.4, 17)
        for assigned in ({}, {1: 2}, {0: 0, 1: 1}):
            assert np.array_equal(a.log_dist(2, assigned), b.log_dist(2, assigned))

    def test_negative_delta_rejected(self):
        joint = random_joint(1)
        with pytest.raises(ContractViolationError):
            PerturbedConditionalModel(joint, -0.1, 0)

    def test_mean_curl_nondecreasing_in_delta(self):
        # direction-only statistical expectation, over 20 seeds
        wins = 0
        trials = 20
        for seed in range(trials):
            joint = random_joint(300 + seed, positions=3, vocab=3)
            ctx = PartialContext({}, (0, 1, 2))
            means = [
                ecirc_abs(PerturbedConditionalModel(joint, delta, 500 + seed), ctx, ExhaustivePlan()).value
                for delta in (0.0, 0.1, 0.5)
            ]
            wins += means[0] <= means[1] <= means[2]
        assert wins >= 0.8 * trials

    def test_perturbed_conditional_wrapper(self):
        joint = random_joint(10)
        pert = PerturbedConditionalModel(joint, 0.3, 5)
        ctx = PartialContext({}, (0, 1, 2))
        assert perturbed_conditional(pert, 0, 1, ctx) == pert.log_conditional(0, 1, ctx)


class TestLogitShift:
    def test_zero_shift_is_identity(self):
        table = LogitTable.random(3, 3, seed=4)
        shifted = apply_logit_shift(table, 0.0)
        assert np.array_equal(shifted.logits, table.logits)

    def test_single_cell_shift_preserves_conditional(self):
        table = LogitTable.random(3, 3, seed=6)
        shifts = np.zeros((3, table.n_classes))
        shifts[1, 5] = 3.7
        before = LogitTableOracle(table)
        after = LogitTableOracle(apply_logit_shift(table, shifts))
        ctx = PartialContext({}, (0, 1, 2))
        for i in range(3):
            np.testing.assert_allclose(
                before.log_conditional_dist(i, ctx), after.log_conditional_dist(i, ctx), atol=1e-12
            )

    def test_curl_invariant_under_shift(self):
        table = LogitTable.random(3, 3, seed=14, scale=1.5)
        shifts = 4.0 * np.random.default_rng(3).standard_normal((3, table.n_classes))
        before = LogitTableOracle(table)
        after = LogitTableOracle(apply_logit_shift(table, shifts))
        ctx = PartialContext({}, (0, 1, 2))
        for i, j in itertools.combinations(range(3), 2):
            for a, b in itertools.product(range(3), repeat=2):
                s1 = curl_local(before, ctx, i, j, a, b)
                s2 = curl_local(after, ctx, i, j, a, b)
                assert abs(s1.value - s2.value) < 1e-10

    def test_non_finite_shift_rejected(self):
        table = LogitTable.random(3, 3, seed=2)
        with pytest.raises(ContractViolationError):
            apply_logit_shift(table, math.inf)


class TestModelFiles:
    def test_round_trip_bit_identical(self, tmp_path):
        joint = random_joint(21, positions=3, vocab=3)
        path = tmp_path / "model.json"
        save_model(joint, path)
        bundle = load_model(path)
        assert np.array_equal(bundle.joint.log_mass, joint.log_mass)
        assert bundle.oracle is bundle.joint

    def test_row_major_order_last_position_fastest(self):
        data = {"vocab_size": 2, "positions": 2, "log_mass": [math.log(p) for p in (0.4, 0.1, 0.2, 0.3)]}
        bundle = model_from_dict(data)
        nd = np.exp(bundle.joint.log_mass_nd)
        np.testing.assert_allclose(nd, [[0.4, 0.1], [0.2, 0.3]], atol=1e-12)

    def test_perturbation_section(self, tmp_path):
        joint = random_joint(22)
        pert = PerturbedConditionalModel(joint, 0.25, 77)
        path = tmp_path / "pert.json"
        save_model(pert, path)
        bundle = load_model(path)
        assert isinstance(bundle.oracle, PerturbedConditionalModel)
        assert bundle.oracle.delta == 0.25
        ctx = PartialContext({}, (0, 1, 2))
        assert np.array_equal(
            bundle.oracle.log_conditional_dist(0, ctx), pert.log_conditional_dist(0, ctx)
        )

    def test_unknown_model_field_rejected(self):
        with pytest.raises(DimensionError):
            model_from_dict({"vocab_size": 2, "positions": 1, "log_mass": [0.0, 0.0], "bogus": 1})


def test_concurrent_queries_match_sequential():
    joint = random_joint(31, positions=4, vocab=3)
    pert = PerturbedConditionalModel(joint, 0.3, 1)
    queries = [(i, {j: 1}) for i in range(4) for j in range(4) if i != j]
    expected = [pert.log_dist(i, asg).copy() for i, asg in queries]
    fresh = PerturbedConditionalModel(joint, 0.3, 1)
    with ThreadPoolExecutor(max_workers=8) as pool:
        results = list(pool.map(lambda q: fresh.log_dist(q[0], q[1]).copy(), queries))
    for got, want in zip(results, expected):
        assert np.array_equal(got, want)
