import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cssbl import vbem
from cssbl.datagen import generate, numerical_scenario
from cssbl.exceptions import DimensionMismatch, NonFiniteLogit, NotPositiveDefinite
from cssbl.model import (BlockStructure, CorrelationBlocks, Dataset, FaultQualityModel,
                         Hyperpriors, VbState, assemble_prior_precision)
from cssbl.vbem import (VbemConfig, block_quadratics, estimate_variances, floor_responsibilities,
                        group_logits, initialize, iterate, project_equicorrelation,
                        raw_correlation_estimate, responsibilities_from_logits, run,
                        update_alpha, update_correlation, update_gamma, update_posteriors,
                        update_responsibilities)


def scalar_state(mu, sigma, resp=((1.0,),), a=1.0, b=1.0):
    st_ = BlockStructure.independent(len(mu[0]))
    return VbState(mu=np.array(mu, dtype=float), sigma=np.array(sigma, dtype=float),
                   gamma_a=np.ones((len(resp[0]), st_.n_blocks)),
                   gamma_b=np.ones((len(resp[0]), st_.n_blocks)),
                   resp=np.array(resp, dtype=float), alpha_a=a, alpha_b=b,
                   corr=CorrelationBlocks.identity(st_))


@pytest.fixture(scope="module")
def small_problem():
    sc = numerical_scenario(0.6, seed=11, samples_per_group=10)
    model, data = generate(sc)
    return sc, model, data


class TestInitialize:
    def test_invariants(self, small_problem):
        sc, model, data = small_problem
        cfg = VbemConfig(init_seed=3)
        state = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(), cfg)
        np.testing.assert_allclose(state.resp.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(state.resp >= cfg.resp_floor)
        assert state.expected_alpha == 1.0
        np.testing.assert_array_equal(state.expected_gamma, 1.0)
        np.testing.assert_array_equal(state.corr.covariance_full(), np.eye(sc.N))
        np.linalg.cholesky(state.sigma)

    def test_single_group(self, small_problem):
        sc, model, data = small_problem
        state = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(),
                           VbemConfig(n_groups=1))
        np.testing.assert_array_equal(state.resp, 1.0)

    def test_seed_determinism(self, small_problem):
        sc, model, data = small_problem
        args = (model.permuted(sc.structure), data, sc.structure, Hyperpriors())
        r1 = initialize(*args, VbemConfig(init_seed=99)).resp
        r2 = initialize(*args, VbemConfig(init_seed=99)).resp
        r3 = initialize(*args, VbemConfig(init_seed=100)).resp
        assert r1.tobytes() == r2.tobytes()
        assert not np.array_equal(r1, r3)

    def test_dimension_mismatch(self, small_problem):
        sc, model, data = small_problem
        with pytest.raises(DimensionMismatch):
            initialize(model, Dataset(data.samples[:, :5]), sc.structure, Hyperpriors(), VbemConfig())


class TestUpdatePosteriors:
    def test_identity_design(self):
        state = scalar_state(mu=[[0.0, 0.0]], sigma=[np.eye(2)])
        update_posteriors(state, FaultQualityModel(np.eye(2)), Dataset([[1.0, 2.0]]))
        np.testing.assert_allclose(state.sigma[0], 0.5 * np.eye(2), atol=1e-15)
        np.testing.assert_allclose(state.mu[0], [0.5, 1.0], atol=1e-15)

    @pytest.mark.parametrize("alpha_a", [0.0, 1e-300])
    def test_no_data_limit(self, alpha_a):
        st_ = BlockStructure.from_lists(3, [[0, 1]])
        state = VbState(mu=np.ones((1, 3)), sigma=np.ones((1, 3, 3)),
                        gamma_a=np.array([[2.0, 4.0]]), gamma_b=np.ones((1, 2)),
                        resp=np.ones((1, 1)), alpha_a=alpha_a, alpha_b=1.0,
                        corr=CorrelationBlocks(st_, [0.3, 0.0]))
        update_posteriors(state, FaultQualityModel(np.ones((2, 3))), Dataset([[1.0, -1.0]]))
        prior_cov = np.linalg.inv(assemble_prior_precision(state, 0))
        np.testing.assert_allclose(state.mu, 0.0, atol=1e-250)
        np.testing.assert_allclose(state.sigma[0], prior_cov, atol=1e-14)

    @pytest.mark.parametrize("solver", ["woodbury", "dense"])
    def test_dense_oracle_m2_n3(self, solver):
        rng = np.random.default_rng(2)
        phi = rng.standard_normal((2, 3))
        st_ = BlockStructure.independent(3)
        state = VbState(mu=np.zeros((1, 3)), sigma=np.zeros((1, 3, 3)),
                        gamma_a=rng.uniform(1, 3, (1, 3)), gamma_b=rng.uniform(1, 3, (1, 3)),
                        resp=np.ones((1, 1)), alpha_a=3.0, alpha_b=2.0,
                        corr=CorrelationBlocks.identity(st_))
        Y = rng.standard_normal((1, 2))
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y), VbemConfig(solver=solver))
        mu, sigma = oracles.posteriors(phi, Y, st_.sizes, state.corr.coefficients,
                                       state.gamma_a, state.gamma_b, state.resp, 3.0, 2.0)
        assert np.max(np.abs(state.sigma - sigma)) <= 1e-8
        assert np.max(np.abs(state.mu - mu)) <= 1e-8

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.sampled_from(["woodbury", "dense"]))
    def test_matches_oracle(self, seed, G, solver):
        rng = np.random.default_rng(seed)
        phi, Y, st_, state = oracles.random_instance(rng, max_n=5, max_k=4, n_groups=G)
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y), VbemConfig(n_groups=G, solver=solver))
        mu, sigma = oracles.posteriors(phi, Y, st_.sizes, state.corr.coefficients, state.gamma_a,
                                       state.gamma_b, state.resp, state.alpha_a, state.alpha_b)
        np.testing.assert_allclose(state.sigma, sigma, atol=1e-8)
        np.testing.assert_allclose(state.mu, mu, atol=1e-8)
        np.testing.assert_array_equal(state.sigma, np.swapaxes(state.sigma, 1, 2))


class TestUpdateGamma:
    def test_scalar_example(self):
        state = scalar_state(mu=[[0.5]], sigma=[[[0.5]]])
        update_gamma(state, state.structure, Hyperpriors(1e-4, 1e-4))
        assert state.gamma_a[0, 0] == pytest.approx(2e-4, rel=1e-9)
        assert state.gamma_b[0, 0] == pytest.approx(0.7502, rel=1e-12)
        assert state.expected_gamma[0, 0] == pytest.approx(2.666e-4, rel=1e-3)

    def test_doubling_samples(self):
        one = scalar_state(mu=[[0.5]], sigma=[[[0.5]]])
        two = scalar_state(mu=[[0.5], [0.5]], sigma=[[[0.5]], [[0.5]]], resp=((1.0,), (1.0,)))
        h = Hyperpriors(1e-4, 1e-4)
        update_gamma(one, one.structure, h)
        update_gamma(two, two.structure, h)
        assert two.gamma_a[0, 0] - (2e-4 - 1) == pytest.approx(2 * (one.gamma_a[0, 0] - (2e-4 - 1)))
        assert two.gamma_b[0, 0] - 2e-4 == pytest.approx(2 * (one.gamma_b[0, 0] - 2e-4))

    def test_block_size_counts(self):
        st_ = BlockStructure.from_lists(3, [[0, 1, 2]])
        state = VbState(mu=np.zeros((1, 3)), sigma=np.array([np.eye(3)]), gamma_a=np.ones((1, 1)),
                        gamma_b=np.ones((1, 1)), resp=np.ones((1, 1)), alpha_a=1.0, alpha_b=1.0,
                        corr=CorrelationBlocks.identity(st_))
        update_gamma(state, st_, Hyperpriors(1e-4, 1e-4))
        assert state.gamma_a[0, 0] == pytest.approx(2e-4 - 1 + 3)

    def test_floor_on_empty_group(self):
        state = scalar_state(mu=[[0.0]], sigma=[[[0.0]]], resp=((1.0, 0.0),))
        update_gamma(state, state.structure, Hyperpriors(1e-4, 1e-4))
        assert state.gamma_a[1, 0] == vbem.POSITIVE_FLOOR

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_matches_oracle(self, seed, G):
        rng = np.random.default_rng(seed)
        phi, Y, st_, state = oracles.random_instance(rng, max_n=5, max_k=4, n_groups=G)
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y))
        h = Hyperpriors(0.7, 0.3)
        ga, gb = oracles.gamma_params(state.mu, state.sigma, state.resp, st_.sizes,
                                      state.corr.coefficients, h.a, h.b)
        update_gamma(state, st_, h)
        np.testing.assert_allclose(state.gamma_a, ga, atol=1e-10)
        np.testing.assert_allclose(state.gamma_b, gb, rtol=1e-10)


class TestResponsibilities:
    def test_single_group(self):
        state = scalar_state(mu=[[1.0], [2.0]], sigma=[[[1.0]], [[1.0]]], resp=((1.0,), (1.0,)))
        update_responsibilities(state, state.structure)
        np.testing.assert_array_equal(state.resp, 1.0)

    def test_known_logits(self):
        np.testing.assert_allclose(responsibilities_from_logits([[0.0, math.log(3)]]), [[0.25, 0.75]],
                                   atol=1e-15)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=5), st.floats(-1e4, 1e4))
    def test_shift_invariance(self, row, c):
        xi = np.array([row])
        np.testing.assert_allclose(responsibilities_from_logits(xi + c), responsibilities_from_logits(xi),
                                   atol=1e-12)

    def test_non_finite(self):
        with pytest.raises(NonFiniteLogit, match=r"\[\[0, 1\]\]"):
            responsibilities_from_logits([[0.0, np.nan]])

    @given(st.integers(0, 2**32 - 1))
    def test_floor(self, seed):
        rng = np.random.default_rng(seed)
        resp = rng.dirichlet(np.full(4, 0.05), size=6)
        out = floor_responsibilities(resp, 1e-3)
        assert np.all(out >= 1e-3 * (1 - 1e-12))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 3))
    def test_logits_match_oracle(self, seed, G):
        rng = np.random.default_rng(seed)
        phi, Y, st_, state = oracles.random_instance(rng, max_n=5, max_k=4, n_groups=G)
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y))
        xi = oracles.logits(state.mu, state.sigma, state.gamma_a, state.gamma_b, st_.sizes,
                            state.corr.coefficients)
        np.testing.assert_allclose(group_logits(state, st_), xi, atol=1e-9)
        update_responsibilities(state, st_, floor=1e-300)
        np.testing.assert_allclose(state.resp, oracles.softmax_rows(xi), atol=1e-12)


class TestUpdateAlpha:
    def test_exact_fit_example(self):
        state = scalar_state(mu=[[2.0]], sigma=[[[0.0]]])
        update_alpha(state, FaultQualityModel([[1.5]]), Dataset([[3.0]]), Hyperpriors())
        assert state.expected_alpha == pytest.approx(5001.0, rel=1e-12)

    def test_rate_at_least_prior(self):
        rng = np.random.default_rng(4)
        state = scalar_state(mu=rng.standard_normal((3, 2)), sigma=[np.eye(2)] * 3,
                             resp=((1.0,),) * 3)
        update_alpha(state, FaultQualityModel(rng.standard_normal((2, 2))),
                     Dataset(rng.standard_normal((3, 2))), Hyperpriors(b=0.5, d=0.5))
        assert state.alpha_b >= 0.5

    def test_more_noise_lowers_precision(self):
        out = []
        for noise in (0.1, 0.2):
            state = scalar_state(mu=[[1.0]], sigma=[[[0.01]]])
            update_alpha(state, FaultQualityModel([[1.0]]), Dataset([[1.0 + noise]]), Hyperpriors())
            out.append(state.expected_alpha)
        assert out[1] < out[0]

    @given(st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        phi, Y, st_, state = oracles.random_instance(rng, max_n=5, max_k=4)
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y))
        h = Hyperpriors(0.2, 0.4, 0.3, 0.9)
        a, b = oracles.alpha_params(phi, Y, state.mu, state.sigma, h.c, h.d)
        update_alpha(state, FaultQualityModel(phi), Dataset(Y), h)
        assert state.alpha_a == pytest.approx(a, rel=1e-14)
        assert state.alpha_b == pytest.approx(b, rel=1e-10)


class TestCorrelation:
    def test_fixed_point(self):
        raw = np.full((3, 3), 0.3)
        np.fill_diagonal(raw, 1.0)
        assert project_equicorrelation(raw) == pytest.approx(0.3, abs=1e-15)

    def test_two_by_two_example(self):
        assert project_equicorrelation(np.array([[2.0, 1.0], [1.0, 4.0]])) == pytest.approx(1 / 3, abs=1e-15)

    @pytest.mark.parametrize("raw,expected", [
        (np.ones((3, 3)), 1 - vbem.CORRELATION_MARGIN),
        (np.array([[1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]), -0.5 + vbem.CORRELATION_MARGIN),
    ])
    def test_clamped(self, raw, expected):
        assert project_equicorrelation(raw) == pytest.approx(expected, abs=1e-15)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 3))
    def test_matches_oracle(self, seed, G):
        rng = np.random.default_rng(seed)
        phi, Y, st_, state = oracles.random_instance(rng, max_n=5, max_k=4, n_groups=G)
        if st_.n_correlated == 0:
            return
        update_posteriors(state, FaultQualityModel(phi), Dataset(Y))
        raw = oracles.raw_correlation(state.mu, state.sigma, state.resp, state.gamma_a,
                                      state.gamma_b, st_.sizes, 0)
        np.testing.assert_allclose(raw_correlation_estimate(state, 0), raw, atol=1e-10)
        d = st_.sizes[0]
        expected = float(np.clip(oracles.project(raw), -1 / (d - 1) + 1e-6, 1 - 1e-6))
        update_correlation(state, st_, VbemConfig(n_groups=G))
        assert state.corr.coefficients[0] == pytest.approx(expected, abs=1e-10)

    def test_disabled_keeps_identity(self, small_problem):
        sc, model, data = small_problem
        state = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(), VbemConfig())
        update_correlation(state, sc.structure, VbemConfig(estimate_correlation=False))
        np.testing.assert_array_equal(state.corr.coefficients, 0.0)

    def test_denominator_is_sample_count(self, small_problem):
        sc, model, data = small_problem
        state = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(), VbemConfig())
        assert state.resp.sum() == pytest.approx(data.K, abs=1e-10)


class TestRun:
    def test_determinism(self, small_problem):
        sc, model, data = small_problem
        cfg = VbemConfig(max_iter=40, init_seed=7)
        s1, t1 = run(model, data, sc.structure, cfg=cfg)
        s2, t2 = run(model, data, sc.structure, cfg=cfg)
        assert t1.to_dict() == t2.to_dict()
        assert s1.mu.tobytes() == s2.mu.tobytes()

    def test_trace_contents(self, small_problem):
        sc, model, data = small_problem
        _, trace = run(model, data, sc.structure, cfg=VbemConfig(max_iter=25))
        assert trace.iterations == len(trace.expected_alpha) == len(trace.group_mass) == 25
        assert all(d >= 0 and math.isfinite(d) for d in trace.delta)
        assert not trace.converged

    def test_stops_at_first_delta_below_tol(self, small_problem):
        sc, model, data = small_problem
        _, full = run(model, data, sc.structure, cfg=VbemConfig(max_iter=60))
        tol = sorted(full.delta)[len(full.delta) // 2]
        first = next(i for i, d in enumerate(full.delta) if d < tol)
        _, trace = run(model, data, sc.structure, cfg=VbemConfig(max_iter=60, tol=tol))
        assert trace.converged and trace.iterations == first + 1

    def test_fixed_point_converges_in_one(self, small_problem):
        sc, model, data = small_problem
        cfg = VbemConfig(max_iter=2000, tol=1e-4)
        state, trace = run(model, data, sc.structure, cfg=cfg)
        assert trace.converged
        _, again = run(model, data, sc.structure, cfg=cfg, init_state=state)
        assert again.converged and again.iterations == 1

    def test_init_state_not_mutated(self, small_problem):
        sc, model, data = small_problem
        init = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(), VbemConfig())
        before = init.mu.copy()
        run(model, data, sc.structure, cfg=VbemConfig(max_iter=3), init_state=init)
        np.testing.assert_array_equal(init.mu, before)

    def test_label_permutation_equivariance(self, small_problem):
        sc, model, data = small_problem
        cfg = VbemConfig(max_iter=30, init_seed=5)
        init = initialize(model.permuted(sc.structure), data, sc.structure, Hyperpriors(), cfg)
        swapped = init.copy()
        swapped.resp = init.resp[:, ::-1].copy()
        a, _ = run(model, data, sc.structure, cfg=cfg, init_state=init)
        b, _ = run(model, data, sc.structure, cfg=cfg, init_state=swapped)
        np.testing.assert_allclose(b.gamma_a, a.gamma_a[::-1], rtol=1e-9)
        np.testing.assert_allclose(b.gamma_b, a.gamma_b[::-1], rtol=1e-9)
        np.testing.assert_allclose(b.resp, a.resp[:, ::-1], atol=1e-9)
        va, vb = estimate_variances(a, sc.structure), estimate_variances(b, sc.structure)
        np.testing.assert_allclose(np.sort(vb, axis=0), np.sort(va, axis=0), rtol=1e-9)

    def test_msbl_degeneracy(self, small_problem):
        sc, model, data = small_problem
        st_ = BlockStructure.independent(sc.N)
        cfg = VbemConfig(n_groups=1, estimate_correlation=False)
        state = initialize(model, data, st_, Hyperpriors(), cfg)
        for _ in range(15):
            iterate(state, model, data, st_, Hyperpriors(), cfg)
            P0 = assemble_prior_precision(state, 0)
            for k in range(1, data.K):
                np.testing.assert_array_equal(assemble_prior_precision(state, k), P0)
            np.testing.assert_allclose(state.sigma, np.broadcast_to(state.sigma[0], state.sigma.shape),
                                       atol=1e-12)
            np.testing.assert_array_equal(state.corr.coefficients, 0.0)

    def test_fewer_samples_than_groups(self, small_problem):
        sc, model, data = small_problem
        _, trace = run(model, Dataset(data.samples[:2]), sc.structure,
                       cfg=VbemConfig(n_groups=3, max_iter=5))
        assert trace.warnings and "K=2" in trace.warnings[0]

    def test_failure_reports_iteration(self, small_problem, monkeypatch):
        sc, model, data = small_problem
        calls = {"n": 0}
        original = vbem.update_alpha

        def failing(*args):
            calls["n"] += 1
            if calls["n"] == 3:
                raise NotPositiveDefinite("boom")
            return original(*args)

        monkeypatch.setattr(vbem, "update_alpha", failing)
        with pytest.raises(NotPositiveDefinite, match="iteration 3: boom"):
            run(model, data, sc.structure, cfg=VbemConfig(max_iter=10))

    @pytest.mark.xfail(strict=True, reason=(
        "the mu-change criterion at 1e-6 is not reached within 500 sweeps on this "
        "scenario: the noise precision keeps creeping upward on near noiseless data"))
    def test_convergence_rate_regression(self):
        converged = 0
        for t in range(20):
            sc = numerical_scenario(0.5, seed=1000 + t)
            model, data = generate(sc)
            _, trace = run(model, data, sc.structure, cfg=VbemConfig(init_seed=t))
            converged += trace.converged
        assert converged >= 18


class TestEstimateVariances:
    def test_reciprocal(self):
        state = scalar_state(mu=[[0.0]], sigma=[[[1.0]]])
        state.gamma_a[:] = 100.0
        np.testing.assert_allclose(estimate_variances(state, state.structure), [[0.01]])

    def test_identical_groups(self):
        st_ = BlockStructure.from_lists(4, [[1, 3]])
        state = VbState(mu=np.zeros((1, 4)), sigma=np.array([np.eye(4)]),
                        gamma_a=np.tile([[2.0, 3.0, 5.0]], (2, 1)), gamma_b=np.ones((2, 3)),
                        resp=np.array([[0.5, 0.5]]), alpha_a=1.0, alpha_b=1.0,
                        corr=CorrelationBlocks.identity(st_))
        v = estimate_variances(state, st_)
        np.testing.assert_array_equal(v[0], v[1])
        # user order: KCCs 1 and 3 share the list's variance
        np.testing.assert_allclose(v[0], [1 / 3, 1 / 2, 1 / 5, 1 / 2])

    def test_generative_recovery(self):
        rng = np.random.default_rng(8)
        phi = rng.standard_normal((2, 2))
        x = rng.standard_normal((200, 2)) * np.sqrt([1.0, 0.01])
        Y = x @ phi.T + 1e-3 * rng.standard_normal((200, 2))
        st_ = BlockStructure.independent(2)
        state, _ = run(FaultQualityModel(phi), Dataset(Y), st_,
                       cfg=VbemConfig(n_groups=1, estimate_correlation=False))
        ratio = estimate_variances(state, st_)[0] / np.array([1.0, 0.01])
        assert np.all((ratio > 1 / 3) & (ratio < 3))
