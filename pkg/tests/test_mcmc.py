import numpy as np
import pytest

from ablaut import ctmc, lik, mcmc, model, regime, treeio
from ablaut.lik import CharacterMatrix
from ablaut.mcmc import PosteriorPool, SamplerConfig
from ablaut.model import ModelKind


def two_tip_case(n_verbs=1, states=((1, 0),)):
    tree = treeio.parse_newick("(A:1.0,B:1.0):0;")
    painted = regime.paint_all(tree)
    data = CharacterMatrix(
        tuple(f"v{i}" for i in range(n_verbs)), ("A", "B"),
        np.array(states, dtype=np.int8))
    return painted, data


def empty_case():
    tree = treeio.parse_newick("(A:1.0,B:1.0):0;")
    painted = regime.paint_all(tree)
    data = CharacterMatrix((), ("A", "B"), np.zeros((0, 2), dtype=np.int8))
    return painted, data


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(iterations=100, warmup=100)
        with pytest.raises(ValueError):
            SamplerConfig(iterations=100, warmup=50, chains=1)
        with pytest.raises(ValueError):
            SamplerConfig(iterations=100, warmup=50, block_mode="weird")

    def test_n_keep(self):
        assert SamplerConfig(iterations=100, warmup=40).n_keep == 60


class TestInitialize:
    def test_three_seeds_three_distinct_inits(self):
        painted, data = two_tip_case()
        seen = set()
        for seed in (1, 2, 3):
            p = mcmc.initialize(ModelKind.HIERARCHICAL, data, painted,
                                np.random.default_rng(seed))
            assert np.isfinite(model.log_posterior(
                ModelKind.HIERARCHICAL, p, data, painted))
            seen.add(float(p.log_delta))
        assert len(seen) == 3

    def test_zero_vector_always_finite(self):
        painted, data = two_tip_case()
        p = model.unpack(ModelKind.HIERARCHICAL, np.zeros(121), 1)
        assert np.isfinite(model.log_posterior(ModelKind.HIERARCHICAL, p, data, painted))


class TestNormalOracle:
    def test_prior_only_sampling_is_standard_normal(self):
        # 0 verbs: the flat posterior reduces to iid N(0,1) over all 41
        # coordinates, so the machinery can be checked against the target
        painted, data = empty_case()
        cfg = SamplerConfig(iterations=10000, warmup=2000, chains=4, seed=11)
        pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg)
        assert pool.n_draws == 4 * 8000
        for name in ("log_delta", pool.param_names[1], pool.param_names[17],
                     pool.param_names[40]):
            col = pool.column(name)
            assert abs(col.mean()) < 0.05
            assert abs(col.std() - 1.0) < 0.03

    def test_stored_logpost_matches_recomputation(self):
        painted, data = two_tip_case()
        cfg = SamplerConfig(iterations=60, warmup=30, chains=2, seed=3)
        pool = mcmc.sample(ModelKind.HIERARCHICAL, data, [painted], cfg)
        for i in range(0, pool.n_draws, 7):
            p = pool.params_at(i)
            lp = model.log_posterior(ModelKind.HIERARCHICAL, p, data, painted)
            assert lp == pytest.approx(pool.logpost[i], abs=1e-8)
            ll = lik.pointwise_loglik(p, data, painted)
            assert np.allclose(ll, pool.pointwise[i], atol=1e-8)


class TestQuadratureOracle:
    def test_flat_two_free_rates_match_grid_integration(self):
        # Flat model, one verb, two-tip tree painted all-N.  Every
        # parameter except two N-regime rates is pinned, so the posterior
        # is 2-dimensional and dense grid integration is exact enough to
        # check the sampler's posterior means.
        painted, data = two_tip_case(states=((1, 0),))   # A=AAB, B=AAA
        names = model.param_names(ModelKind.FLAT)
        free = ("mu[N][AAA>AAB]", "mu[N][AAB>AAA]")
        fixed = {}
        for name in names:
            if name in free:
                continue
            if name == "log_delta":
                fixed[name] = np.log(0.05)
            elif "[N]" in name:
                fixed[name] = np.log(0.3)
            else:
                fixed[name] = 0.0   # E rates never used on an all-N painting
        cfg = SamplerConfig(iterations=4000, warmup=1000, chains=4, seed=5,
                            fixed=fixed)
        pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg)

        # dense grid oracle over the 2 free coordinates
        grid = np.linspace(-5.5, 3.5, 181)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        rates = np.full((xx.size, 20), 0.3)
        i_ab = names.index(free[0]) - 1 - 20   # N-regime column offsets
        i_ba = names.index(free[1]) - 1 - 20
        rates[:, i_ab] = np.exp(xx.ravel())
        rates[:, i_ba] = np.exp(yy.ravel())
        q = ctmc.build_rate_matrix(rates, 0.05)
        p1 = ctmc.expm(q * 1.0)
        tipa = np.zeros(6); tipa[1] = 1.0
        tipb = np.zeros(6); tipb[0] = 1.0
        like = ((p1 @ tipa) * (p1 @ tipb)) @ lik.uniform_root_prior()
        logw = np.log(like) - 0.5 * xx.ravel() ** 2 - 0.5 * yy.ravel() ** 2
        w = np.exp(logw - logw.max())
        mean_x = float((w * xx.ravel()).sum() / w.sum())
        mean_y = float((w * yy.ravel()).sum() / w.sum())

        got_x = pool.column(free[0]).mean()
        got_y = pool.column(free[1]).mean()
        assert got_x == pytest.approx(mean_x, abs=0.08)
        assert got_y == pytest.approx(mean_y, abs=0.08)
        # fixed coordinates really were pinned
        assert np.all(pool.column("log_delta") == np.log(0.05))


class TestDeterminismAndPooling:
    def test_bit_identical_given_seed(self):
        painted, data = two_tip_case(n_verbs=2, states=((1, 0), (3, 3)))
        cfg = SamplerConfig(iterations=80, warmup=40, chains=2, seed=9)
        p1 = mcmc.sample(ModelKind.HIERARCHICAL, data, [painted], cfg)
        p2 = mcmc.sample(ModelKind.HIERARCHICAL, data, [painted], cfg)
        assert np.array_equal(p1.draws, p2.draws)
        assert np.array_equal(p1.pointwise, p2.pointwise)
        assert np.array_equal(p1.logpost, p2.logpost)

    def test_parallel_equals_serial(self):
        painted, data = two_tip_case()
        serial = SamplerConfig(iterations=60, warmup=30, chains=2, seed=4, n_processes=1)
        parallel = SamplerConfig(iterations=60, warmup=30, chains=2, seed=4, n_processes=2)
        p1 = mcmc.sample(ModelKind.FLAT, data, [painted], serial)
        p2 = mcmc.sample(ModelKind.FLAT, data, [painted], parallel)
        assert np.array_equal(p1.draws, p2.draws)

    def test_pooling_counts_and_provenance(self):
        painted, data = two_tip_case()
        cfg = SamplerConfig(iterations=50, warmup=20, chains=2, seed=1)
        pool = mcmc.sample(ModelKind.FLAT, data, [painted, painted], cfg)
        assert pool.n_draws == 2 * 2 * 30
        for t in (0, 1):
            assert int((pool.tree_ids == t).sum()) == 2 * 30
        assert set(zip(pool.tree_ids.tolist(), pool.chain_ids.tolist())) == {
            (0, 0), (0, 1), (1, 0), (1, 1)}


class TestRhat:
    def make_pool(self, draws_by_chain):
        chains = len(draws_by_chain)
        n = len(draws_by_chain[0])
        draws = np.concatenate(draws_by_chain)[:, None]
        return PosteriorPool(
            kind=ModelKind.FLAT, param_names=("x",), verb_ids=(),
            draws=draws, pointwise=np.zeros((chains * n, 0)),
            logpost=np.zeros(chains * n),
            tree_ids=np.zeros(chains * n, dtype=np.int32),
            chain_ids=np.repeat(np.arange(chains, dtype=np.int32), n))

    def test_identical_chains_give_one(self):
        rng = np.random.default_rng(0)
        series = rng.normal(size=200)
        pool = self.make_pool([series, series.copy()])
        assert mcmc.rhat(pool, "x") == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_constant_chains_diverge(self):
        pool = self.make_pool([np.zeros(100), np.ones(100)])
        value, flagged = mcmc.rhat_table(pool, ["x"])["x"]
        assert value > 100 or np.isinf(value)

    def test_zero_variance_flagged_as_one(self):
        pool = self.make_pool([np.ones(50), np.ones(50)])
        value, flagged = mcmc.rhat_table(pool, ["x"])["x"]
        assert value == 1.0 and flagged

    def test_independent_normals_near_one(self):
        rng = np.random.default_rng(12)
        pool = self.make_pool([rng.normal(size=1000) for _ in range(4)])
        assert mcmc.rhat(pool, "x") < 1.01

    def test_too_few_draws_rejected(self):
        pool = self.make_pool([np.arange(8.0), np.arange(8.0)])
        with pytest.raises(ValueError):
            mcmc.rhat(pool, "x")


class TestStore:
    def test_save_load_round_trip(self, tmp_path):
        painted, data = two_tip_case()
        cfg = SamplerConfig(iterations=40, warmup=20, chains=2, seed=2)
        pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg)
        mcmc.save_pool(pool, tmp_path / "store")
        loaded = mcmc.load_pool(tmp_path / "store")
        assert loaded.kind == pool.kind
        assert loaded.param_names == pool.param_names
        assert np.array_equal(loaded.draws, pool.draws)
        assert np.array_equal(loaded.pointwise, pool.pointwise)

    def test_streaming_chunks_written(self, tmp_path):
        painted, data = two_tip_case()
        cfg = SamplerConfig(iterations=60, warmup=20, chains=2, seed=2,
                            stream_every=10)
        store = tmp_path / "store"
        pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg, store_dir=str(store))
        stream = store / "stream-t000-c00.bin"
        assert stream.exists()
        raw = np.fromfile(stream).reshape(40, -1)
        sel = (pool.tree_ids == 0) & (pool.chain_ids == 0)
        assert np.array_equal(raw, pool.draws[sel])
        loaded = mcmc.load_pool(store)
        assert np.array_equal(loaded.draws, pool.draws)


def test_rhat_warnings_attached():
    painted, data = two_tip_case()
    cfg = SamplerConfig(iterations=60, warmup=30, chains=2, seed=8)
    pool = mcmc.sample(ModelKind.FLAT, data, [painted], cfg)
    assert "rhat_max_hyper" in pool.meta
