"""Builder machinery: centering, correlation scores, greedy selection,
Monte Carlo gradients, projected reweighting, and the full loop."""

import itertools

import numpy as np
import pytest

from robustcoresets.builder import (
    BuildConfig,
    CoresetState,
    build,
    build_groups,
    center_f,
    column_sds,
    estimate_correlations,
    expand_state,
    mc_gradient,
    projected_step,
    reweight,
    select_next,
    uniform_baseline,
)
from robustcoresets.data import Dataset
from robustcoresets.exceptions import ConfigError
from robustcoresets.models import BetaConfig, DiscreteToyModel, GaussianModel


def _toy(rng, j=6, n=10):
    prior = rng.dirichlet(np.ones(j))
    return DiscreteToyModel(prior=prior, table=rng.standard_normal((j, n)))


def _toy_cfg(**kwargs):
    defaults = dict(iterations=5, batch_size=4, num_samples=10, inner_steps=5,
                    step_scale=0.1, beta=BetaConfig(1.0), seed=0)
    defaults.update(kwargs)
    return BuildConfig(**defaults)


class TestCenterF:
    def test_constant_across_samples_gives_zeros(self):
        model = DiscreteToyModel(prior=[0.5, 0.5], table=np.array([[2.0, -1.0], [2.0, -1.0]]))
        ds = model.as_dataset()
        out = center_f(np.array([0, 1, 0]), model, ds, [0, 1], BetaConfig(1.0))
        assert np.array_equal(out, np.zeros((3, 2)))

    def test_two_sample_case(self):
        model = DiscreteToyModel(prior=[0.5, 0.5], table=np.array([[1.0], [3.0]]))
        out = center_f(np.array([0, 1]), model, model.as_dataset(), [0], BetaConfig(1.0))
        assert np.array_equal(out[:, 0], [-1.0, 1.0])

    def test_column_means_vanish(self):
        rng = np.random.default_rng(0)
        model = _toy(rng, j=20, n=10)
        samples = rng.integers(0, 20, size=50)
        out = center_f(samples, model, model.as_dataset(), np.arange(10), BetaConfig(1.0))
        assert np.max(np.abs(out.mean(axis=0))) < 1e-12


class TestEstimateCorrelations:
    def test_hand_case(self):
        g = np.array([[-1.0], [0.0], [1.0]])
        g_prime = np.array([[-2.0], [0.0], [2.0]])
        corr, corr_prime = estimate_correlations(g, g_prime, np.zeros(1), 3, 3)
        expected = (4.0 / 3.0) / np.sqrt(2.0 / 3.0)
        assert np.isclose(corr[0], expected, atol=1e-12)
        assert np.isclose(corr_prime[0], (8.0 / 3.0) / np.sqrt(8.0 / 3.0), atol=1e-12)

    def test_column_equal_to_residual_scores_its_rms(self):
        rng = np.random.default_rng(1)
        r = rng.standard_normal(20)
        r -= r.mean()
        g = np.zeros((20, 0))
        g_prime = r[:, None]
        _, corr_prime = estimate_correlations(g, g_prime, np.zeros(0), 10, 10)
        assert np.isclose(corr_prime[0], np.linalg.norm(r) / np.sqrt(20), atol=1e-12)
        assert corr_prime[0] > 0

    def test_degenerate_column_guarded_to_zero(self):
        g = np.array([[0.0, -1.0], [0.0, 0.0], [0.0, 1.0]])
        corr, _ = estimate_correlations(g, g[:, 1:], np.zeros(2), 3, 3)
        assert corr[0] == 0.0


class TestSelectNext:
    def test_single_candidate(self):
        assert select_next(np.empty(0), np.array([-0.3]), [], [7]) == 7

    def test_new_points_use_signed_scores(self):
        chosen = select_next(np.empty(0), np.array([0.2, -5.0, 0.1]), [], [3, 4, 5])
        assert chosen == 3

    def test_support_uses_absolute_value(self):
        chosen = select_next(np.array([-3.0]), np.array([2.0]), [9], [4])
        assert chosen == 9

    def test_tie_breaks_to_smallest_index(self):
        chosen = select_next(np.empty(0), np.array([0.5, 0.5, 0.5]), [], [12, 3, 8])
        assert chosen == 3

    def test_batch_members_already_in_support_not_duplicated(self):
        # index 4 sits in the support; its minibatch column must be ignored
        chosen = select_next(np.array([0.1]), np.array([9.0, 0.2]), [4], [4, 6])
        assert chosen == 6

    def test_degenerate_candidates_lose(self):
        chosen = select_next(np.empty(0), np.array([5.0, 0.1]), [], [1, 2],
                             batch_valid=np.array([False, True]))
        assert chosen == 2

    def test_all_degenerate_falls_back_to_smallest(self):
        chosen = select_next(np.empty(0), np.array([0.0, 0.0]), [], [5, 2],
                             batch_valid=np.array([False, False]))
        assert chosen == 2

    def test_empty_candidates_error(self):
        with pytest.raises(ConfigError):
            select_next(np.empty(0), np.empty(0), [], [])


class TestMcGradient:
    def test_full_batch_unit_weights_give_zero(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((15, 8))
        g -= g.mean(axis=0)
        grad = mc_gradient(g, g, np.ones(8), 8, 8)
        assert np.allclose(grad, 0.0, atol=1e-12)

    def test_zero_matrices_give_zero(self):
        grad = mc_gradient(np.zeros((5, 3)), np.zeros((5, 2)), np.ones(3), 10, 2)
        assert np.array_equal(grad, np.zeros(3))

    def test_unbiased_against_enumeration(self):
        # smaller replica of the acceptance check: mean over many seeds
        # within 4 standard errors of the enumerated covariance gradient
        rng = np.random.default_rng(3)
        model = _toy(rng, j=5, n=6)
        ds = model.as_dataset()
        w = rng.uniform(0, 1.5, 6)
        exact = model.exact(w).grad
        runs, s, b = 3000, 6, 3
        mc_rng = np.random.default_rng(4)
        estimates = np.empty((runs, 6))
        for r in range(runs):
            thetas = model.sample_posterior(ds, np.arange(6), w, s, mc_rng)
            batch = mc_rng.choice(6, size=b, replace=False)
            g = center_f(thetas, model, ds, np.arange(6), BetaConfig(1.0))
            gp = center_f(thetas, model, ds, batch, BetaConfig(1.0))
            estimates[r] = mc_gradient(g, gp, w, 6, b)
        err = np.abs(estimates.mean(axis=0) - exact)
        se = estimates.std(axis=0, ddof=1) / np.sqrt(runs)
        assert np.all(err <= 4.0 * se)


class TestMinibatchUnbiasedness:
    def test_enumerated_minibatch_mean_matches_full_sum(self):
        # all size-5 minibatches of a 30-point dataset, enumerated exactly
        rng = np.random.default_rng(5)
        values = rng.standard_normal(30)
        n, b = 30, 5
        total = 0.0
        count = 0
        for batch in itertools.combinations(range(n), b):
            total += (n / b) * values[list(batch)].sum()
            count += 1
        assert np.isclose(total / count, values.sum(), atol=1e-9)


class TestProjectedStep:
    def test_projection_to_zero(self):
        out = projected_step(np.array([0.1]), np.array([1.0]), 1.0)
        assert out[0] == 0.0

    def test_plain_step_when_interior(self):
        out = projected_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.1)
        assert np.allclose(out, [0.95, 2.1])


class TestReweight:
    def test_zero_steps_is_identity(self):
        rng = np.random.default_rng(6)
        model = _toy(rng)
        state = CoresetState(indices=[2, 5], weights=[1.0, 0.5])
        out = reweight(state, model, model.as_dataset(), _toy_cfg(inner_steps=0))
        assert np.array_equal(out.indices, state.indices)
        assert np.array_equal(out.weights, state.weights)

    def test_exact_gradient_descent_never_increases_kl(self):
        rng = np.random.default_rng(7)
        model = _toy(rng, j=8, n=6)
        ds = model.as_dataset()
        state = CoresetState(indices=np.arange(6), weights=np.full(6, 0.3))
        kls = []

        def exact_grad(st):
            w_full = model.full_weight_vector(st.indices, st.weights)
            out = model.exact(w_full)
            kls.append(out.kl_to_full)
            return out.grad[st.indices]

        final = reweight(state, model, ds, _toy_cfg(inner_steps=50, step_scale=1e-2),
                         gradient_fn=exact_grad)
        kls.append(model.exact(model.full_weight_vector(final.indices, final.weights)).kl_to_full)
        drops = np.diff(kls)
        assert np.all(drops <= 1e-12)
        assert kls[-1] < kls[0]

    def test_weights_stay_nonnegative(self):
        rng = np.random.default_rng(8)
        model = _toy(rng)
        state = CoresetState(indices=np.arange(4), weights=np.full(4, 0.05))
        out = reweight(state, model, model.as_dataset(), _toy_cfg(inner_steps=30, step_scale=2.0))
        assert np.all(out.weights >= 0.0)

    def test_support_never_grows(self):
        rng = np.random.default_rng(9)
        model = _toy(rng)
        state = CoresetState(indices=[1, 3], weights=[0.1, 0.1])
        out = reweight(state, model, model.as_dataset(), _toy_cfg(inner_steps=10))
        assert np.array_equal(out.indices, [1, 3])

    def test_empty_support_rejected(self):
        rng = np.random.default_rng(10)
        model = _toy(rng)
        with pytest.raises(ConfigError):
            reweight(CoresetState(indices=[], weights=[]), model,
                     model.as_dataset(), _toy_cfg())


class TestBuild:
    def test_single_point_dataset(self):
        ds = Dataset(features=np.array([[0.4]]))
        model = GaussianModel(mu0=np.zeros(1), Sigma0=np.eye(1), Sigma=np.eye(1))
        cfg = BuildConfig(iterations=1, batch_size=1, num_samples=5, inner_steps=3,
                          beta=BetaConfig(0.5), seed=1)
        state, traces = build(ds, model, cfg)
        assert np.array_equal(state.indices, [0])
        assert state.weights[0] >= 0.0
        assert len(traces) == 1

    def test_identical_seed_identical_trace(self):
        rng = np.random.default_rng(11)
        model = _toy(rng, j=10, n=14)
        cfg = _toy_cfg(iterations=6, seed=23)
        s1, t1 = build(model.as_dataset(), model, cfg)
        s2, t2 = build(model.as_dataset(), model, cfg)
        assert np.array_equal(s1.indices, s2.indices)
        assert np.array_equal(s1.weights, s2.weights)
        assert [x.selected_index for x in t1] == [x.selected_index for x in t2]
        assert [x.weights_digest for x in t1] == [x.weights_digest for x in t2]

    def test_sparsity_bound_and_nonnegativity(self):
        rng = np.random.default_rng(12)
        model = _toy(rng, j=8, n=20)
        cfg = _toy_cfg(iterations=7, init_indices=(4, 9))
        state, traces = build(model.as_dataset(), model, cfg)
        assert np.all(state.weights >= 0.0)
        for t in traces:
            assert t.support_size <= t.iteration + 2
        assert state.nonzero_count() <= cfg.iterations + 2

    def test_reselection_keeps_support_stable(self):
        # a 2-point dataset over 6 iterations must reselect repeatedly
        rng = np.random.default_rng(13)
        model = _toy(rng, j=6, n=2)
        cfg = _toy_cfg(iterations=6, batch_size=2)
        state, traces = build(model.as_dataset(), model, cfg)
        assert state.support_size <= 2
        assert len(traces) == 6

    def test_checkpoint_callback_fires(self):
        rng = np.random.default_rng(14)
        model = _toy(rng, j=6, n=10)
        seen = []
        build(model.as_dataset(), model, _toy_cfg(iterations=5),
              checkpoint_every=2, checkpoint_fn=lambda it, st, m: seen.append(it))
        assert seen == [2, 4, 5]

    def test_first_selection_scale_invariant_end_to_end(self):
        # with w = 0 the sampling distribution is the prior, so scaling the
        # statistic table must not change the first greedy choice
        rng = np.random.default_rng(15)
        prior = rng.dirichlet(np.ones(6))
        table = rng.standard_normal((6, 12))
        cfg = _toy_cfg(iterations=1, inner_steps=0, seed=5)
        picks = []
        for c in (1.0, 7.3):
            model = DiscreteToyModel(prior=prior, table=c * table)
            _, traces = build(model.as_dataset(), model, cfg)
            picks.append(traces[0].selected_index)
        assert picks[0] == picks[1]

    def test_selection_scale_invariance_on_matrices(self):
        rng = np.random.default_rng(16)
        g = rng.standard_normal((30, 5))
        g -= g.mean(axis=0)
        gp = rng.standard_normal((30, 8))
        gp -= gp.mean(axis=0)
        w = rng.uniform(0, 2, 5)
        support = np.arange(5)
        batch = np.arange(5, 13)
        base = None
        for c in (1.0, 0.04, 250.0):
            corr, corrp = estimate_correlations(c * g, c * gp, w, 40, 8)
            chosen = select_next(corr, corrp, support, batch,
                                 support_valid=column_sds(c * g) >= 1e-12,
                                 batch_valid=column_sds(c * gp) >= 1e-12)
            if base is None:
                base = chosen
            assert chosen == base


class TestBuildGroups:
    def test_singleton_groups_reduce_to_pointwise(self):
        rng = np.random.default_rng(17)
        model = _toy(rng, j=8, n=12)
        ds_points = model.as_dataset()
        ds_groups = Dataset(features=ds_points.features, group_ids=np.arange(12))
        cfg = _toy_cfg(iterations=5, seed=31)
        s_point, t_point = build(ds_points, model, cfg)
        s_group, t_group = build_groups(ds_groups, model, cfg)
        assert np.array_equal(s_point.indices, s_group.indices)
        assert np.allclose(s_point.weights, s_group.weights)
        assert ([x.selected_index for x in t_point]
                == [x.selected_index for x in t_group])

    def test_duplicate_group_column_is_double_singleton(self):
        # full-batch run so candidate columns cover whole groups
        rng = np.random.default_rng(18)
        prior = rng.dirichlet(np.ones(5))
        table_single = rng.standard_normal((5, 3))
        table_dup = np.hstack([table_single, table_single[:, 2:]])
        model = DiscreteToyModel(prior=prior, table=table_dup)
        ds = Dataset(features=np.zeros((4, 1)), group_ids=np.array([0, 1, 2, 2]))
        from robustcoresets.builder import _Engine

        cfg = _toy_cfg(iterations=1, batch_size=4)
        engine = _Engine(ds, model, cfg, group_mode=True)
        state = CoresetState(indices=[], weights=[], group_mode=True)
        samples = np.array([0, 1, 2, 3, 4])
        g, gp, cand = engine.vectors(state, np.arange(4), samples)
        centered = model.table[samples] - model.table[samples].mean(axis=0)
        assert np.array_equal(cand, [0, 1, 2])
        assert np.allclose(gp[:, 2], 2.0 * centered[:, 2])

    def test_group_weight_applies_to_members(self):
        ds = Dataset(features=np.zeros((6, 1)), group_ids=np.array([0, 0, 1, 1, 1, 2]))
        state = CoresetState(indices=[1], weights=[2.5], group_mode=True)
        idx, w = expand_state(state, ds)
        assert np.array_equal(np.sort(idx), [2, 3, 4])
        assert np.allclose(w, 2.5)

    def test_iteration_budget_bounds_group_count(self):
        rng = np.random.default_rng(19)
        model = _toy(rng, j=8, n=30)
        ds = Dataset(features=np.zeros((30, 1)), group_ids=np.repeat(np.arange(10), 3))
        cfg = _toy_cfg(iterations=10, batch_size=15)
        state, _ = build_groups(ds, model, cfg)
        assert state.support_size <= 10
        assert set(state.indices) <= set(range(10))

    def test_missing_group_ids_rejected(self):
        rng = np.random.default_rng(20)
        model = _toy(rng)
        with pytest.raises(ConfigError):
            build_groups(model.as_dataset(), model, _toy_cfg())


class TestUniformBaseline:
    def test_full_size_unit_weights(self):
        ds = Dataset(features=np.zeros((12, 1)))
        state = uniform_baseline(ds, 12, seed=0)
        assert np.allclose(state.weights, 1.0)
        assert set(state.indices) == set(range(12))

    def test_single_point_carries_total_mass(self):
        ds = Dataset(features=np.zeros((12, 1)))
        state = uniform_baseline(ds, 1, seed=0)
        assert state.weights[0] == 12.0

    def test_same_seed_nested_subsets(self):
        ds = Dataset(features=np.zeros((20, 1)))
        small = uniform_baseline(ds, 5, seed=9)
        large = uniform_baseline(ds, 11, seed=9)
        assert set(small.indices) <= set(large.indices)


class TestGVectorsInvariant:
    def test_columns_centered_in_build_paths(self):
        rng = np.random.default_rng(21)
        model = _toy(rng, j=12, n=9)
        ds = model.as_dataset()
        samples = model.sample_posterior(ds, [], [], 40, rng)
        g = center_f(samples, model, ds, np.arange(9), BetaConfig(1.0))
        assert np.max(np.abs(g.mean(axis=0))) < 1e-10
