import numpy as np
import pytest

from ablaut import analysis, ctmc, lik, mcmc, model, regime, treeio
from ablaut.analysis import LooResult
from ablaut.lik import CharacterMatrix
from ablaut.mcmc import PosteriorPool, SamplerConfig
from ablaut.model import ModelKind

from conftest import random_rate_matrix


class TestHdi:
    def test_tie_breaks_to_first_window(self):
        lo, hi = analysis.hdi(np.arange(1, 101), 0.95)
        assert (lo, hi) == (1.0, 95.0)

    def test_normal_quantiles(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=100000)
        lo, hi = analysis.hdi(x, 0.95)
        assert lo == pytest.approx(-1.96, abs=0.03)
        assert hi == pytest.approx(1.96, abs=0.03)

    def test_constant_samples_zero_width(self):
        lo, hi = analysis.hdi(np.full(50, 3.2), 0.9)
        assert lo == hi == 3.2

    def test_minimal_width(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.exponential(size=200)
            lo, hi = analysis.hdi(x, 0.8)
            xs = np.sort(x)
            window = int(np.ceil(0.8 * 200))
            best = np.min(xs[window - 1:] - xs[:200 - window + 1])
            assert (hi - lo) == pytest.approx(best, rel=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            analysis.hdi(np.arange(5), 0.9)


def make_pool_from_mu(mu_draws, log_delta=None, kind=ModelKind.FLAT):
    """Assemble a minimal flat pool whose hypermean draws are given."""
    d = mu_draws.shape[0]
    if log_delta is None:
        log_delta = np.full(d, -3.0)
    draws = np.hstack([log_delta[:, None], mu_draws.reshape(d, -1)])
    half = d // 2
    return PosteriorPool(
        kind=kind, param_names=model.param_names(kind), verb_ids=(),
        draws=draws, pointwise=np.zeros((d, 0)), logpost=np.zeros(d),
        tree_ids=np.zeros(d, dtype=np.int32),
        chain_ids=np.repeat(np.arange(2, dtype=np.int32), [half, d - half]))


class TestRegimeDifferences:
    def test_identical_regimes_contain_zero(self):
        rng = np.random.default_rng(7)
        base = rng.normal(-0.5, 0.3, (200, 20))
        mu = np.stack([base, base], axis=1)   # E == N draw by draw
        summary = analysis.regime_differences(make_pool_from_mu(mu))
        assert summary.n_excluded == 0
        assert np.allclose(summary.d_stationary, 0.0, atol=1e-12)
        for name in analysis.QUANTITIES:
            assert not summary.decisive[0.95][name].any()
            los, his = summary.hdis[0.95][name][:, 0], summary.hdis[0.95][name][:, 1]
            assert np.all(los <= 0) and np.all(his >= 0)

    def test_two_draw_pool_hand_computed(self):
        rng = np.random.default_rng(11)
        mu = rng.normal(0, 0.4, (12, 2, 20))
        pool = make_pool_from_mu(mu)
        summary = analysis.regime_differences(pool, levels=(0.8,))
        q = ctmc.build_rate_matrix(np.exp(mu[3]), np.exp(-3.0))
        pi_e = ctmc.stationary_distribution(q[0])
        pi_n = ctmc.stationary_distribution(q[1])
        assert np.allclose(summary.d_stationary[3], pi_e - pi_n, atol=1e-9)
        exit_e = np.array([ctmc.exit_rate(q[0], s) for s in range(5)])
        exit_n = np.array([ctmc.exit_rate(q[1], s) for s in range(5)])
        assert np.allclose(summary.d_exit[3], exit_e - exit_n, atol=1e-9)
        entry_e = np.array([ctmc.entry_rate(q[0], s, pi_e) for s in range(5)])
        entry_n = np.array([ctmc.entry_rate(q[1], s, pi_n) for s in range(5)])
        assert np.allclose(summary.d_entry[3], entry_e - entry_n, atol=1e-9)

    def test_simplex_mass_conservation(self):
        rng = np.random.default_rng(13)
        mu = rng.normal(0, 0.6, (100, 2, 20))
        summary = analysis.regime_differences(make_pool_from_mu(mu))
        assert np.max(np.abs(summary.d_stationary.sum(axis=1))) < 1e-9

    def test_reducible_draws_excluded(self):
        mu = np.zeros((20, 2, 20))
        mu[5, 0, :] = -200.0   # E regime rates collapse to ~0: reducible
        pool = make_pool_from_mu(mu)
        summary = analysis.regime_differences(pool)
        assert summary.n_excluded == 1
        assert summary.d_stationary.shape[0] == 19


class TestReconstruction:
    def setup_case(self, rng, states, rates_scale=1.0):
        tree = treeio.parse_newick("((A:1,B:1):1,C:2):0;")
        painted = regime.paint_all(tree)
        data = CharacterMatrix(
            tuple(f"v{i}" for i in range(states.shape[0])), ("A", "B", "C"), states)
        return painted, data

    def make_pool(self, rng, data, n_draws=40, mu_loc=-1.0):
        names = model.param_names(ModelKind.HIERARCHICAL, data.verbs)
        v = data.n_verbs
        cols = model.expected_parameter_count(ModelKind.HIERARCHICAL, v)
        draws = np.empty((n_draws, cols))
        draws[:, 0] = -3.0
        draws[:, 1:41] = rng.normal(mu_loc, 0.1, (n_draws, 40))
        draws[:, 41:81] = -2.0
        draws[:, 81:] = rng.normal(mu_loc, 0.1, (n_draws, v * 40))
        half = n_draws // 2
        return PosteriorPool(
            kind=ModelKind.HIERARCHICAL, param_names=names, verb_ids=data.verbs,
            draws=draws, pointwise=np.zeros((n_draws, v)), logpost=np.zeros(n_draws),
            tree_ids=np.zeros(n_draws, dtype=np.int32),
            chain_ids=np.repeat(np.arange(2, dtype=np.int32), [half, n_draws - half]))

    def test_saturated_signal_recovers_tip_state(self):
        rng = np.random.default_rng(5)
        states = np.full((2, 3), int(ctmc.PatternState.ABB), dtype=np.int8)
        painted, data = self.setup_case(rng, states)
        pool = self.make_pool(rng, data, mu_loc=-2.5)
        recon = analysis.reconstruct_all_roots(pool, data, painted, seed=1)
        for r in recon:
            assert r.modal_state == int(ctmc.PatternState.ABB)
            assert r.frequencies.sum() == pytest.approx(1.0, abs=1e-12)

    def test_epsilon_tree_single_tip(self):
        # near-zero branches: the root distribution collapses onto the
        # observed tip state
        tree = treeio.parse_newick("(A:1e-9,B:1e-9):0;")
        painted = regime.paint_all(tree)
        states = np.array([[2, lik.MISSING]], dtype=np.int8)
        data = CharacterMatrix(("v0",), ("A", "B"), states)
        rng = np.random.default_rng(9)
        pool = self.make_pool(rng, data, mu_loc=0.0)
        r = analysis.reconstruct_root(pool, "v0", data, painted, seed=2)
        assert r.modal_state == 2
        assert r.frequencies[2] > 0.999

    def test_single_matches_all(self):
        rng = np.random.default_rng(31)
        states = np.array([[3, 3, 3], [0, 0, 0]], dtype=np.int8)
        painted, data = self.setup_case(rng, states)
        pool = self.make_pool(rng, data, mu_loc=-2.0)
        all_recon = analysis.reconstruct_all_roots(pool, data, painted, seed=3)
        single = analysis.reconstruct_root(pool, "v1", data, painted, seed=3)
        assert single.modal_state == all_recon[1].modal_state


class TestPsisLoo:
    def test_single_draw(self):
        ll = np.array([[-1.0, -2.0, -0.5]])
        res = analysis.psis_loo(ll)
        assert res.elpd == pytest.approx(-3.5)
        assert np.all(np.isneginf(res.k_hat))
        assert res.flags

    def test_equal_loglik_across_draws(self):
        ll = np.tile(np.array([-1.2, -0.7]), (200, 1))
        res = analysis.psis_loo(ll)
        assert res.elpd == pytest.approx(-1.9, abs=1e-12)
        assert np.all(np.isneginf(res.k_hat))

    def test_unsmoothed_equals_naive_is_loo(self):
        rng = np.random.default_rng(3)
        ll = rng.normal(-2, 0.8, size=(500, 7))
        res = analysis.psis_loo(ll, smooth=False)
        for v in range(7):
            naive = -(np.log(np.mean(np.exp(-ll[:, v]))))
            assert res.pointwise[v] == pytest.approx(naive, rel=1e-10)

    def test_smoothing_changes_heavy_tails_only_modestly(self):
        rng = np.random.default_rng(4)
        ll = rng.normal(-2, 0.6, size=(1000, 5))
        smoothed = analysis.psis_loo(ll)
        naive = analysis.psis_loo(ll, smooth=False)
        assert np.all(np.isfinite(smoothed.k_hat))
        assert abs(smoothed.elpd - naive.elpd) < 1.0

    def test_se_formula(self):
        rng = np.random.default_rng(6)
        ll = rng.normal(-2, 0.5, size=(400, 9))
        res = analysis.psis_loo(ll)
        assert res.se == pytest.approx(
            np.sqrt(9 * np.var(res.pointwise, ddof=1)))

    def test_gpd_fit_recovers_shape(self):
        # exceedances drawn from a known GPD: the estimator should land
        # near the true shape
        rng = np.random.default_rng(8)
        k_true, sigma_true = 0.3, 1.5
        u = rng.random(4000)
        x = sigma_true / k_true * ((1 - u) ** -k_true - 1)
        k_hat, sigma_hat = analysis.fit_generalized_pareto(x)
        assert k_hat == pytest.approx(k_true, abs=0.05)
        assert sigma_hat == pytest.approx(sigma_true, rel=0.1)


class TestCompare:
    def test_identical_results_zero(self):
        pw = np.array([-1.0, -2.0, -0.8])
        a = LooResult(pw.sum(), pw, 0.1, np.zeros(3))
        assert analysis.compare(a, a) == (0.0, 0.0)

    def test_constant_shift(self):
        pw = np.array([-1.0, -2.0, -0.8, -1.4])
        a = LooResult(pw.sum(), pw, 0.1, np.zeros(4))
        b = LooResult(pw.sum() - 4 * 0.3, pw - 0.3, 0.1, np.zeros(4))
        delta, se = analysis.compare(a, b)
        assert delta == pytest.approx(4 * 0.3)
        assert se == pytest.approx(0.0, abs=1e-12)

    def test_mismatched_sizes_rejected(self):
        a = LooResult(-1.0, np.array([-1.0]), 0.0, np.zeros(1))
        b = LooResult(-3.0, np.array([-1.0, -2.0]), 0.0, np.zeros(2))
        with pytest.raises(ValueError):
            analysis.compare(a, b)


class TestExactLooOracle:
    def test_psis_matches_refit_loo_small_flat_model(self):
        # V=6 verbs on a two-tip tree, flat model: exact leave-one-out
        # refits are cheap enough to run for every verb
        rng = np.random.default_rng(20)
        tree = treeio.parse_newick("(A:1.0,B:1.0):0;")
        painted = regime.paint_all(tree)
        states = rng.integers(0, 5, size=(6, 2)).astype(np.int8)
        data = CharacterMatrix(tuple(f"v{i}" for i in range(6)), ("A", "B"), states)
        cfg = SamplerConfig(iterations=1500, warmup=500, chains=2, seed=21)
        pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg)
        res = analysis.psis_loo(pool.pointwise)

        kernel = lik.PaintedKernel(painted, data.taxa)
        tips = lik.tip_likelihoods(data)
        exact = np.empty(6)
        for v in range(6):
            keep = [i for i in range(6) if i != v]
            sub = data.subset(keep)
            refit = mcmc.sample(ModelKind.FLAT, sub, [painted], cfg)
            # held-out log predictive: log E_post[-v] p(x_v | theta)
            mu = refit.mu_draws()
            delta = np.exp(refit.log_delta_draws())
            lls = np.empty(refit.n_draws)
            for d in range(refit.n_draws):
                q = ctmc.build_rate_matrix(np.exp(mu[d]), delta[d])
                lls[d] = kernel.loglik(q[0], q[1], tips[v:v + 1], lik.uniform_root_prior())[0]
            exact[v] = analysis._logsumexp(lls) - np.log(len(lls))
        assert abs(res.elpd - exact.sum()) <= 2 * max(res.se, 0.5)
