import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import behavior_outcomes, random_mdp, random_policy_pair
from offvar.bounds import (C_FLOOR, DeltaBudget, Interval, bound_mean, ci_lower_truncated, ci_upper_truncated,
                           clip_interval, control_variate_shift, expectation_offset, hcove_interval, hcove_lower,
                           hcove_upper, partition, propagate_square, select_threshold, shifted_samples)
from offvar.core import (Dataset, InsufficientData, InvalidInput, ReturnSpec, SeededRng, Step, TabularPolicy,
                         Trajectory, UnpaddedTrajectory, pad_trajectory)
from offvar.envs import counterexample_mdp, gridworld, mix_behavior, moment_dp, recommender, sample_dataset
from offvar.estimators import cdis_terms

nonneg = st.lists(st.floats(0, 10), min_size=2, max_size=60)


def _penalty(c, delta, n):
    return c * 7 * math.log(2 / delta) / (3 * (n - 1))


class TestTruncatedBound:
    @given(y=st.floats(0, 5), extra=st.floats(0, 5), n=st.integers(2, 500), delta=st.floats(0.001, 0.5))
    def test_all_equal_closed_form(self, y, extra, n, delta):
        c = y + extra + 1e-3
        got = ci_lower_truncated([y] * n, c, delta)
        assert got == pytest.approx(y - _penalty(c, delta, n), rel=1e-12, abs=1e-12)

    def test_all_zero_is_strictly_negative(self):
        assert ci_lower_truncated(np.zeros(10), 1.0, 0.05) < 0.0
        assert ci_upper_truncated(np.zeros(10), -1.0, 0.05) > 0.0

    @given(s=nonneg, c=st.floats(0.01, 20), delta=st.floats(0.001, 0.5))
    def test_mirror_symmetry(self, s, c, delta):
        s = np.array(s)
        assert ci_upper_truncated(-s, -c, delta) == -ci_lower_truncated(s, c, delta)

    def test_all_equal_upper(self):
        n, y, c, delta = 50, 0.7, -2.0, 0.1
        assert ci_upper_truncated([-y] * n, c, delta) == pytest.approx(-y + _penalty(2.0, delta, n), rel=1e-12)

    def test_pairwise_identity(self):
        rng = np.random.default_rng(0)
        y = rng.uniform(0, 1, 37)
        c = 0.8
        u = np.minimum(y, c) / c
        literal = sum((a - b) ** 2 for a in u for b in u)
        n = y.size
        want = (np.mean(np.minimum(y, c)) - _penalty(c, 0.05, n)
                - (c / n) * math.sqrt(math.log(2 / 0.05) / (n - 1) * literal))
        assert ci_lower_truncated(y, c, 0.05) == pytest.approx(want, rel=1e-12)

    def test_approaches_truncated_mean(self):
        rng = np.random.default_rng(1)
        gaps = []
        for n in (100, 10_000, 1_000_000):
            y = rng.uniform(0, 1, n)
            b = ci_lower_truncated(y, 0.9, 0.05)
            mean = np.mean(np.minimum(y, 0.9))
            assert b < mean
            gaps.append(mean - b)
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 2e-3

    @given(s=nonneg, delta=st.floats(0.001, 0.5))
    def test_valid_for_any_threshold(self, s, delta):
        # truncation only lowers the mean, and the penalties are nonnegative
        s = np.array(s)
        for c in (0.5, 5.0, 50.0):
            assert ci_lower_truncated(s, c, delta) <= np.mean(s) + 1e-12

    @pytest.mark.parametrize("args", [([1.0], 1.0, 0.05), ([1.0, -1.0], 1.0, 0.05), ([1.0, 2.0], 0.0, 0.05),
                                      ([1.0, 2.0], 1.0, 0.0), ([1.0, 2.0], 1.0, 0.6)])
    def test_lower_validation(self, args):
        with pytest.raises(InvalidInput):
            ci_lower_truncated(*args)

    def test_upper_validation(self):
        with pytest.raises(InvalidInput):
            ci_upper_truncated([1.0, -1.0], -1.0, 0.05)
        with pytest.raises(InvalidInput):
            ci_upper_truncated([-1.0, -1.0], 1.0, 0.05)


class TestThresholdSelection:
    def test_partition_sizes(self):
        pre, post = partition(100, np.random.default_rng(0))
        assert pre.size == 5 and post.size == 95
        assert sorted(np.concatenate([pre, post]).tolist()) == list(range(100))

    def test_identical_samples_pick_smallest_sufficient_c(self):
        plan = select_threshold(np.full(200, 3.5), 0.05, "lower", np.random.default_rng(0))
        assert plan.c == 3.5
        assert min(plan.grid) == C_FLOOR
        up = select_threshold(np.full(200, -3.5), 0.05, "upper", np.random.default_rng(0))
        assert up.c == -3.5

    def test_long_tail(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, 400)
        x[0] = 1e6
        pre = np.arange(20)
        post = np.arange(20, 400)
        plan = select_threshold(x, 0.05, "lower", split=(pre, post))
        assert plan.c <= 1.0
        assert 1e6 in plan.grid
        chosen = ci_lower_truncated(x[post], plan.c, 0.05)
        naive = ci_lower_truncated(x[post], 1e6, 0.05)
        assert chosen > naive + 1000

    def test_fallback_below_forty(self):
        x = np.linspace(0, 2, 39)
        with pytest.warns(UserWarning):
            plan = select_threshold(x, 0.05, "lower", np.random.default_rng(0))
        assert plan.fallback and plan.c == 2.0 and plan.n_post == 39
        with pytest.raises(InsufficientData):
            select_threshold(x, 0.05, "lower", np.random.default_rng(0), strict=True)

    def test_forty_is_enough(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            plan = select_threshold(np.linspace(0, 2, 40), 0.05, "lower", np.random.default_rng(0))
        assert not plan.fallback and plan.n_pre == 2

    def test_selection_uses_pre_only(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, 100)
        pre, post = np.arange(5), np.arange(5, 100)
        a = select_threshold(x, 0.05, "lower", split=(pre, post)).c
        y = x.copy()
        y[post] = 1000.0
        assert select_threshold(y, 0.05, "lower", split=(pre, post)).c == a

    def test_all_zero_pre_uses_floor(self):
        x = np.zeros(100)
        assert select_threshold(x, 0.05, "lower", np.random.default_rng(0)).c == C_FLOOR


class TestControlVariates:
    def test_sign_and_expectation_on_random_models(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            mdp = random_mdp(rng)
            pi, beta = random_policy_pair(rng, mdp)
            probs, pool = behavior_outcomes(mdp, beta)
            oracle = moment_dp(mdp, pi)
            for kind, direction, target in (("second_moment", "upper", oracle.second),
                                            ("second_moment", "lower", oracle.second),
                                            ("mean", "upper", oracle.mu), ("mean", "lower", oracle.mu)):
                v = shifted_samples(pool, pi, kind, direction)
                if direction == "upper":
                    assert np.all(v <= 0.0)
                else:
                    assert np.all(v >= 0.0)
                expect = float(probs @ v) + expectation_offset(kind, direction, mdp.spec)
                assert expect == pytest.approx(target, abs=1e-10)

    def test_on_policy_recovery_is_exact_per_dataset(self):
        m = gridworld()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, pi, 200, np.random.default_rng(2))
        x = shifted_samples(d, pi, "second_moment", "upper")
        assert np.mean(x) + m.spec.xi_g == pytest.approx(np.mean(cdis_terms(d, pi)), abs=1e-9)

    def test_single_trajectory_requires_padding(self):
        spec = ReturnSpec(1.0, 3, -1.0, 1.0)
        pi = TabularPolicy.uniform(1, 2)
        t = Trajectory((Step(0, 0, 0.5, 1.0),))
        with pytest.raises(UnpaddedTrajectory):
            control_variate_shift("mean", "upper", t, pi, spec)
        padded = pad_trajectory(t, spec)
        assert control_variate_shift("second_moment", "upper", padded, pi, spec) <= 0.0

    def test_rewards_at_max_on_policy_give_zero(self):
        spec = ReturnSpec(0.9, 2, -1.0, 1.0)
        pi = TabularPolicy(np.array([[0.4, 0.6]]))
        t = Trajectory((Step(0, 1, 0.6, 1.0), Step(0, 0, 0.4, 1.0)))
        assert control_variate_shift("mean", "upper", t, pi, spec) == 0.0

    def test_bound_uses_selected_threshold_post_slice(self):
        # the composed bound is the truncated bound on the post slice at the chosen threshold
        rng = np.random.default_rng(4)
        x = -rng.uniform(0, 2, 300)
        split = partition(300, rng)
        base = bound_mean(x, 0.05, "upper", split=split)
        plan = select_threshold(x, 0.05, "upper", split=split)
        assert base == ci_upper_truncated(x[plan.post_idx], plan.c, 0.05)

    def test_bad_kind(self):
        d = sample_dataset(counterexample_mdp(), TabularPolicy.uniform(4, 2), 5, np.random.default_rng(0))
        with pytest.raises(InvalidInput):
            shifted_samples(d, TabularPolicy.uniform(4, 2), "third", "upper")
        with pytest.raises(InvalidInput):
            shifted_samples(d, TabularPolicy.uniform(4, 2), "mean", "sideways")


class TestPropagation:
    @pytest.mark.parametrize("iv, want", [((-2, 3), (0, 9)), ((1, 3), (1, 9)), ((-3, -1), (1, 9)),
                                          ((0, 0), (0, 0)), ((-4, 0), (0, 16))])
    def test_examples(self, iv, want):
        out = propagate_square(Interval(*iv, 0.05))
        assert (out.lower, out.upper) == want

    @pytest.mark.parametrize("iv, want", [((-5, 2), (0, 2, False)), ((1, 100), (1, 9, False)),
                                          ((10, 20), (9, 9, True)), ((-20, -10), (0, 0, True))])
    def test_clip(self, iv, want):
        spec = ReturnSpec(1.0, 1, 0.0, 6.0)  # (6 - 0)^2 / 4 = 9
        out = clip_interval(Interval(*iv, 0.05), spec)
        assert (out.lower, out.upper, out.degenerate) == want

    def test_interval_order_enforced(self):
        with pytest.raises(InvalidInput):
            Interval(1.0, 0.0, 0.05)


class TestHcove:
    def test_budget(self):
        assert DeltaBudget.even(0.08).total == pytest.approx(0.08)
        assert DeltaBudget.one_sided(0.1).d3 == 0.05
        with pytest.raises(InvalidInput):
            DeltaBudget(0.1, 0.0, 0.1, 0.1)
        d = sample_dataset(gridworld(), gridworld().policy("uniform"), 100, np.random.default_rng(0))
        with pytest.raises(InvalidInput):
            hcove_interval(d, gridworld().policy("near_optimal"), 0.05, budget=DeltaBudget.one_sided(0.05))

    def test_counterexample_coverage(self):
        m = counterexample_mdp()
        pi = m.policy("det_a")
        d = sample_dataset(m, m.policy("uniform"), 4000, np.random.default_rng(0))
        assert hcove_upper(d, pi, 0.05, rng=np.random.default_rng(1)) >= 0.0
        assert hcove_lower(d, pi, 0.05, rng=np.random.default_rng(1)) <= 0.0

    def test_zero_rewards(self):
        m = counterexample_mdp()
        pi = m.policy("det_b")
        d = sample_dataset(m, m.policy("uniform"), 500, np.random.default_rng(0))
        assert np.all(d.rewards[d.actions == 1] == 0.0)
        assert hcove_lower(d, pi, 0.05, rng=np.random.default_rng(2)) <= 0.0

    def test_degenerate_closed_form(self):
        # pi = beta = always b: every X equals -xi_G and every Y is constant
        m = counterexample_mdp()
        pi = m.policy("det_b")
        n, delta = 400, 0.1
        d = sample_dataset(m, pi, n, np.random.default_rng(0))
        post = n - math.ceil(n / 20)
        want = 7 * math.log(2 / (delta / 2)) / (3 * (post - 1)) * m.spec.xi_g
        assert hcove_upper(d, pi, delta, rng=np.random.default_rng(0)) == pytest.approx(want, rel=1e-12)

    def test_monotone_in_delta(self):
        m = gridworld()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, mix_behavior(pi, 0.5), 800, np.random.default_rng(5))
        split = partition(len(d), np.random.default_rng(6))
        deltas = (0.01, 0.05, 0.1, 0.2)
        ups = [hcove_upper(d, pi, dl, split=split) for dl in deltas]
        los = [hcove_lower(d, pi, dl, split=split) for dl in deltas]
        assert all(a >= b for a, b in zip(ups, ups[1:]))
        assert all(a <= b for a, b in zip(los, los[1:]))

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(40, 400))
    def test_lower_below_upper(self, seed, n):
        m = recommender()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, mix_behavior(pi, 0.5), n, SeededRng(seed))
        split = partition(n, SeededRng(seed, 1))
        budget = DeltaBudget.even(0.05)
        lo = hcove_lower(d, pi, budget=budget, split=split)
        hi = hcove_upper(d, pi, budget=budget, split=split)
        assert lo <= hi

    def test_clipped_interval_within_popoviciu(self):
        m = gridworld()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, mix_behavior(pi, 0.5), 300, np.random.default_rng(8))
        iv = hcove_interval(d, pi, 0.05, rng=np.random.default_rng(9), clip=True)
        assert 0.0 <= iv.lower <= iv.upper <= m.spec.popoviciu

    def test_interval_reproducible(self):
        m = gridworld()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, mix_behavior(pi, 0.5), 300, np.random.default_rng(8))
        a = hcove_interval(d, pi, 0.05, rng=SeededRng(1))
        b = hcove_interval(d, pi, 0.05, rng=SeededRng(1))
        assert a == b

    def test_small_n_fallback_and_strict(self):
        m = recommender()
        pi = m.policy("near_optimal")
        d = sample_dataset(m, mix_behavior(pi, 0.5), 30, np.random.default_rng(0))
        with pytest.warns(UserWarning):
            iv = hcove_interval(d, pi, 0.05)
        assert iv.lower <= iv.upper
        with pytest.raises(InsufficientData):
            hcove_interval(d, pi, 0.05, strict=True)


def test_dataset_type_is_unchanged_by_bounds():
    d = Dataset.from_trajectories([Trajectory((Step(0, 0, 0.5, 1.0),))] * 3, counterexample_mdp().spec)
    before = d.rewards.copy()
    shifted_samples(d, counterexample_mdp().policy("det_a"), "mean", "upper")
    assert np.array_equal(d.rewards, before)
