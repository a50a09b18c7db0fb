"""Posterior sampling, adaptation, convergence diagnostics, and pooling.

The sampler is an adaptive random-walk Metropolis-within-Gibbs scheme
over parameter blocks: per-verb rate blocks, hypermean blocks, hyper-
scale blocks, and the death rate.  Hierarchical models are explored in
the non-centered parameterization (z = (log rho - mu) / sigma), which
sidesteps the funnel that a centered random walk stalls in when verbs
are weakly informed; draws are stored and reported on the centered
scale.  Proposal scales adapt per block during warmup toward a target
acceptance rate and freeze afterwards.

Chains run independently with seed-derived private RNG streams, so a
(seed, config, data, trees) tuple reproduces the pooled posterior
bit-for-bit regardless of how many worker processes execute it.  Pools
across trees concatenate per-tree posteriors with equal weight per
tree; per-tree marginal likelihoods are not reweighted, matching the
aggregation scheme the rest of the package expects.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lik, model
from .ctmc import N_TRANSITIONS
from .model import ModelKind

N_COLS = 2 * N_TRANSITIONS        # 40 regime-by-transition rate coordinates


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int
    warmup: int
    chains: int = 4
    seed: int = 0
    target_accept: float = 0.3
    n_processes: int = 1
    block_mode: str = "row"        # "row": per (regime, from-state); "regime"
    stream_every: int = 500
    init_spread: float = 2.0
    fixed: dict = None             # param name -> value, for oracle tests

    def __post_init__(self):
        if not 0 < self.warmup < self.iterations:
            raise ValueError("need 0 < warmup < iterations")
        if self.chains < 2:
            raise ValueError("need >= 2 chains for convergence diagnostics")
        if not 0.1 <= self.target_accept <= 0.6:
            raise ValueError("target acceptance should be a sane MH rate")
        if self.block_mode not in ("row", "regime"):
            raise ValueError("block_mode must be 'row' or 'regime'")

    @property
    def n_keep(self):
        return self.iterations - self.warmup


@dataclass
class PosteriorPool:
    """Retained draws pooled across chains and trees.

    draws rows are centered parameter vectors in ``param_names`` order;
    pointwise rows are per-verb log-likelihoods for that draw.
    """

    kind: ModelKind
    param_names: tuple
    verb_ids: tuple
    draws: np.ndarray          # (D, P)
    pointwise: np.ndarray      # (D, V)
    logpost: np.ndarray        # (D,)
    tree_ids: np.ndarray       # (D,)
    chain_ids: np.ndarray      # (D,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.draws.shape[0]
        if not (self.pointwise.shape[0] == self.logpost.shape[0]
                == self.tree_ids.shape[0] == self.chain_ids.shape[0] == d):
            raise ValueError("pool arrays disagree on the number of draws")
        if self.pointwise.shape[1] != len(self.verb_ids):
            raise ValueError("pointwise matrix must be draws x verbs")
        if not np.all(np.isfinite(self.logpost)):
            raise ValueError("retained draws must have finite log-posterior")

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def column(self, param):
        if isinstance(param, str):
            return self.draws[:, self.param_names.index(param)]
        return self.draws[:, param]

    def params_at(self, i):
        n_verbs = len(self.verb_ids) if self.kind is not ModelKind.FLAT else 0
        return model.unpack(self.kind, self.draws[i], n_verbs)

    def mu_draws(self):
        """(D, 2, 20) hypermean draws."""
        cols = [i for i, n in enumerate(self.param_names) if n.startswith("mu[")]
        return self.draws[:, cols].reshape(-1, 2, N_TRANSITIONS)

    def log_delta_draws(self):
        return self.draws[:, self.param_names.index("log_delta")]


# ---------------------------------------------------------------------------
# Blocks and moves
# ---------------------------------------------------------------------------

def _rate_blocks(mode):
    """Coordinate blocks over the 40 rate columns, as (regime, cols)."""
    blocks = []
    if mode == "regime":
        for r in range(2):
            blocks.append((r, np.arange(N_TRANSITIONS) + r * N_TRANSITIONS))
    else:
        for r in range(2):
            for row in range(5):
                start = r * N_TRANSITIONS + 4 * row
                blocks.append((r, np.arange(start, start + 4)))
    return blocks


def _half_normal_logpdf_terms(ls):
    # HalfNormal(0,1) on sigma = exp(ls), plus the transform Jacobian
    return 0.5 * np.log(2.0 / np.pi) - 0.5 * np.exp(2.0 * ls) + ls


class _Adapt:
    """Robbins-Monro proposal-scale adaptation toward a target rate."""

    def __init__(self, shape, initial, target):
        self.log_scale = np.full(shape, np.log(initial))
        self.target = target
        self.step = 0

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def update(self, accept_prob, index=None):
        self.step += 1
        gamma = (self.step + 10.0) ** -0.6
        delta = gamma * (accept_prob - self.target)
        if index is None:
            self.log_scale += delta
        else:
            self.log_scale[index] += delta
        np.clip(self.log_scale, -15.0, 5.0, out=self.log_scale)


def _fixed_assignments(kind, cfg, verb_ids):
    """Map fixed parameter names onto internal state slots."""
    if not cfg.fixed:
        return {}
    names = model.param_names(kind, verb_ids)
    out = {}
    for name, value in cfg.fixed.items():
        if name not in names:
            raise ValueError(f"unknown parameter {name!r}")
        if name.startswith("log_rho"):
            raise ValueError("fixing verb-level rates is not supported")
        idx = names.index(name)
        if name == "log_delta":
            out[("delta", 0)] = float(value)
        elif name.startswith("mu["):
            out[("mu", idx - 1)] = float(value)
        else:
            out[("sigma", idx - 1 - N_COLS)] = float(value)
    return out


class _ChainRun:
    """One chain of the Metropolis-within-Gibbs sampler."""

    def __init__(self, kind, data, painted, cfg, root_prior, rng):
        self.kind = kind
        self.cfg = cfg
        self.rng = rng
        self.n_verbs = data.n_verbs
        self.hier = kind is not ModelKind.FLAT
        self.kernel = lik.PaintedKernel(painted, data.taxa)
        self.tips = lik.tip_likelihoods(data)
        self.root_prior = np.asarray(
            lik.uniform_root_prior() if root_prior is None else root_prior, dtype=float)
        self.blocks = _rate_blocks(cfg.block_mode)
        self.fixed = _fixed_assignments(kind, cfg, data.verbs)
        self.use_fast = lik._kernels.HAVE_NUMBA and self.hier and self.n_verbs > 0

        self.mu = np.zeros(N_COLS)
        self.ld = 0.0
        if self.hier:
            self.ls = np.zeros(N_COLS)
            self.z = np.zeros((self.n_verbs, N_COLS))
        self._apply_fixed()

        n_blocks = len(self.blocks)
        tgt = cfg.target_accept
        self.adapt_mu = _Adapt(n_blocks, 0.1, tgt)
        self.adapt_delta = _Adapt((), 0.2, tgt)
        if self.hier:
            self.adapt_z = _Adapt((self.n_verbs, n_blocks), 0.5, tgt)
            self.adapt_sigma = _Adapt(n_blocks, 0.2, tgt)
            self.adapt_mu_c = _Adapt(n_blocks, 0.3, tgt)
            self.adapt_sigma_c = _Adapt(n_blocks, 0.3, tgt)

        if self.use_fast:
            self.cur_cache = self.kernel.new_cache(self.n_verbs)
            self.prop_cache = self.kernel.new_cache(self.n_verbs)

    # -- state plumbing -------------------------------------------------

    def _apply_fixed(self):
        for (slot, idx), value in self.fixed.items():
            if slot == "delta":
                self.ld = value
            elif slot == "mu":
                self.mu[idx] = value
            elif slot == "sigma":
                if not self.hier:
                    raise ValueError("flat model has no sigma parameters")
                self.ls[idx] = value

    def _free_mask(self, slot, cols):
        mask = np.ones(len(cols), dtype=bool)
        for k, c in enumerate(cols):
            if (slot, c) in self.fixed:
                mask[k] = False
        return mask

    def log_rho(self, mu=None, ls=None, z=None):
        mu = self.mu if mu is None else mu
        ls = self.ls if ls is None else ls
        z = self.z if z is None else z
        return mu[None, :] + np.exp(ls)[None, :] * z

    def _build_q(self, rate_cols, log_delta):
        from . import ctmc
        rates = np.exp(rate_cols).reshape(-1, 2, N_TRANSITIONS)
        return ctmc.build_rate_matrix(rates, np.exp(log_delta))

    def _loglik_state(self):
        """Per-verb log-likelihood of the current state (fresh evaluation)."""
        if self.n_verbs == 0:
            return np.zeros(0)
        if self.hier:
            q = self._build_q(self.log_rho(), self.ld)
            if self.use_fast:
                self.kernel.update_cache(self.cur_cache, q)
                return self.kernel.loglik_cached(self.cur_cache, self.tips, self.root_prior)
            return self.kernel.loglik(q[:, 0], q[:, 1], self.tips, self.root_prior)
        q = self._build_q(self.mu[None, :], self.ld)[0]
        return self.kernel.loglik(q[0], q[1], self.tips, self.root_prior)

    def _loglik_proposal(self, rate_cols, log_delta, regimes):
        """Likelihood of proposed rates, reusing cached segment matrices
        for the regimes a move did not touch."""
        if self.n_verbs == 0:
            return np.zeros(0)
        if self.hier:
            q = self._build_q(rate_cols, log_delta)
            if self.use_fast:
                self.prop_cache[...] = self.cur_cache
                self.kernel.update_cache(self.prop_cache, q, regimes=regimes)
                return self.kernel.loglik_cached(self.prop_cache, self.tips, self.root_prior)
            return self.kernel.loglik(q[:, 0], q[:, 1], self.tips, self.root_prior)
        q = self._build_q(rate_cols, log_delta)[0]
        return self.kernel.loglik(q[0], q[1], self.tips, self.root_prior)

    def _accept_rows(self, rows):
        if self.use_fast:
            self.cur_cache[rows] = self.prop_cache[rows]

    def _accept_all(self):
        if self.use_fast:
            self.cur_cache, self.prop_cache = self.prop_cache, self.cur_cache

    # -- initialization ---------------------------------------------------

    def init_state(self):
        spread = self.cfg.init_spread
        for attempt in range(100):
            self.mu = self.rng.uniform(-spread, spread, N_COLS)
            self.ld = float(self.rng.uniform(-spread, spread))
            if self.hier:
                self.ls = self.rng.uniform(-spread, spread, N_COLS)
                self.z = self.rng.uniform(-spread, spread, (self.n_verbs, N_COLS))
            self._apply_fixed()
            self.cur_ll = self._loglik_state()
            if np.isfinite(self._log_target()):
                return
        raise RuntimeError("no finite-posterior initialization in 100 tries")

    def _log_target(self):
        """Non-centered log target of the current state."""
        out = float(np.sum(-0.5 * self.mu ** 2)) - 0.5 * self.ld ** 2
        if self.hier:
            out += float(np.sum(_half_normal_logpdf_terms(self.ls)))
            out += float(np.sum(-0.5 * self.z ** 2))
        return out + float(np.sum(self.cur_ll))

    # -- moves -------------------------------------------------------------

    def _move_z(self, block_id, regime, cols, adapting):
        scale = self.adapt_z.scale[:, block_id]
        eps = self.rng.standard_normal((self.n_verbs, len(cols))) * scale[:, None]
        z_prop = self.z.copy()
        z_prop[:, cols] += eps
        ll_prop = self._loglik_proposal(self.log_rho(z=z_prop), self.ld, (regime,))
        dprior = 0.5 * np.sum(self.z[:, cols] ** 2 - z_prop[:, cols] ** 2, axis=1)
        logr = (ll_prop - self.cur_ll) + dprior
        with np.errstate(over="ignore"):
            apr = np.minimum(1.0, np.exp(logr))
        accept = np.log(self.rng.random(self.n_verbs)) < logr
        if np.any(accept):
            self.z[accept] = z_prop[accept]
            self.cur_ll[accept] = ll_prop[accept]
            self._accept_rows(accept)
        if adapting:
            self.adapt_z.update(apr, index=(slice(None), block_id))

    def _move_mu(self, block_id, regime, cols, adapting):
        free = self._free_mask("mu", cols)
        if not free.any():
            return
        eps = self.rng.standard_normal(len(cols)) * self.adapt_mu.scale[block_id]
        eps[~free] = 0.0
        mu_prop = self.mu.copy()
        mu_prop[cols] += eps
        if self.hier:
            ll_prop = self._loglik_proposal(self.log_rho(mu=mu_prop), self.ld, (regime,))
        else:
            ll_prop = self._loglik_proposal(mu_prop[None, :], self.ld, (regime,))
        dprior = 0.5 * float(np.sum(self.mu[cols] ** 2 - mu_prop[cols] ** 2))
        logr = float(np.sum(ll_prop - self.cur_ll)) + dprior
        apr = min(1.0, np.exp(min(logr, 0.0)))
        if np.log(self.rng.random()) < logr:
            self.mu = mu_prop
            self.cur_ll = ll_prop
            self._accept_all()
        if adapting:
            self.adapt_mu.update(apr, index=block_id)

    def _move_sigma(self, block_id, regime, cols, adapting):
        free = self._free_mask("sigma", cols)
        if not free.any():
            return
        eps = self.rng.standard_normal(len(cols)) * self.adapt_sigma.scale[block_id]
        eps[~free] = 0.0
        ls_prop = self.ls.copy()
        ls_prop[cols] += eps
        ll_prop = self._loglik_proposal(self.log_rho(ls=ls_prop), self.ld, (regime,))
        dprior = float(np.sum(_half_normal_logpdf_terms(ls_prop[cols])
                              - _half_normal_logpdf_terms(self.ls[cols])))
        logr = float(np.sum(ll_prop - self.cur_ll)) + dprior
        apr = min(1.0, np.exp(min(logr, 0.0)))
        if np.log(self.rng.random()) < logr:
            self.ls = ls_prop
            self.cur_ll = ll_prop
            self._accept_all()
        if adapting:
            self.adapt_sigma.update(apr, index=block_id)

    def _move_mu_centered(self, block_id, cols, adapting):
        """Shift mu with log_rho held fixed (z absorbs the shift).

        The likelihood is untouched, so this is a free move that mixes
        the hypermeans through their conditional given the verb rates;
        interleaving it with the non-centered moves avoids the classic
        funnel stalls in either parameterization.
        """
        free = self._free_mask("mu", cols)
        if not free.any():
            return
        eps = self.rng.standard_normal(len(cols)) * self.adapt_mu_c.scale[block_id]
        eps[~free] = 0.0
        mu_prop = self.mu.copy()
        mu_prop[cols] += eps
        z_prop_cols = self.z[:, cols] - eps[None, :] / np.exp(self.ls[cols])[None, :]
        logr = 0.5 * float(np.sum(self.mu[cols] ** 2 - mu_prop[cols] ** 2))
        logr += 0.5 * float(np.sum(self.z[:, cols] ** 2 - z_prop_cols ** 2))
        apr = min(1.0, np.exp(min(logr, 0.0)))
        if np.log(self.rng.random()) < logr:
            self.mu = mu_prop
            self.z[:, cols] = z_prop_cols
        if adapting:
            self.adapt_mu_c.update(apr, index=block_id)

    def _move_sigma_centered(self, block_id, cols, adapting):
        """Rescale sigma with log_rho held fixed (z absorbs the change);
        the z-Jacobian of the rescaling enters the acceptance ratio."""
        free = self._free_mask("sigma", cols)
        if not free.any():
            return
        eps = self.rng.standard_normal(len(cols)) * self.adapt_sigma_c.scale[block_id]
        eps[~free] = 0.0
        ls_prop = self.ls.copy()
        ls_prop[cols] += eps
        z_prop_cols = self.z[:, cols] * np.exp(-eps)[None, :]
        logr = float(np.sum(_half_normal_logpdf_terms(ls_prop[cols])
                            - _half_normal_logpdf_terms(self.ls[cols])))
        logr += 0.5 * float(np.sum(self.z[:, cols] ** 2 - z_prop_cols ** 2))
        logr += -self.n_verbs * float(np.sum(eps))
        apr = min(1.0, np.exp(min(logr, 0.0)))
        if np.log(self.rng.random()) < logr:
            self.ls = ls_prop
            self.z[:, cols] = z_prop_cols
        if adapting:
            self.adapt_sigma_c.update(apr, index=block_id)

    def _move_delta(self, adapting):
        if ("delta", 0) in self.fixed:
            return
        ld_prop = self.ld + float(self.rng.standard_normal()) * float(self.adapt_delta.scale)
        rate_cols = self.log_rho() if self.hier else self.mu[None, :]
        ll_prop = self._loglik_proposal(rate_cols, ld_prop, (0, 1))
        dprior = 0.5 * (self.ld ** 2 - ld_prop ** 2)
        logr = float(np.sum(ll_prop - self.cur_ll)) + dprior
        apr = min(1.0, np.exp(min(logr, 0.0)))
        if np.log(self.rng.random()) < logr:
            self.ld = ld_prop
            self.cur_ll = ll_prop
            self._accept_all()
        if adapting:
            self.adapt_delta.update(apr)

    def _sweep(self, adapting):
        for block_id, (regime, cols) in enumerate(self.blocks):
            if self.hier:
                self._move_z(block_id, regime, cols, adapting)
            self._move_mu(block_id, regime, cols, adapting)
            if self.hier:
                self._move_sigma(block_id, regime, cols, adapting)
                self._move_mu_centered(block_id, cols, adapting)
                self._move_sigma_centered(block_id, cols, adapting)
        self._move_delta(adapting)

    # -- public -------------------------------------------------------------

    def centered_params(self):
        if self.hier:
            log_rho = self.log_rho().reshape(self.n_verbs, 2, N_TRANSITIONS)
            return model.ModelParams(
                self.ld, self.mu.reshape(2, N_TRANSITIONS).copy(),
                self.ls.reshape(2, N_TRANSITIONS).copy(), log_rho)
        return model.ModelParams(self.ld, self.mu.reshape(2, N_TRANSITIONS).copy())

    def run(self, stream_path=None):
        cfg = self.cfg
        self.init_state()
        n_keep = cfg.n_keep
        n_params = model.expected_parameter_count(
            ModelKind.FLAT if not self.hier else ModelKind.HIERARCHICAL, self.n_verbs)
        draws = np.empty((n_keep, n_params))
        pointwise = np.empty((n_keep, self.n_verbs))
        logpost = np.empty(n_keep)
        streamed = 0
        for it in range(cfg.iterations):
            self._sweep(adapting=it < cfg.warmup)
            if it < cfg.warmup:
                continue
            k = it - cfg.warmup
            params = self.centered_params()
            draws[k] = model.pack(params)
            pointwise[k] = self.cur_ll
            logpost[k] = model.log_prior(self.kind, params) + float(np.sum(self.cur_ll))
            if stream_path and (k + 1) % cfg.stream_every == 0:
                with open(stream_path, "ab") as fh:
                    draws[streamed:k + 1].tofile(fh)
                streamed = k + 1
        if stream_path and streamed < n_keep:
            with open(stream_path, "ab") as fh:
                draws[streamed:].tofile(fh)
        return draws, pointwise, logpost


def initialize(kind, data, painted, rng, root_prior=None, spread=2.0):
    """Draw a random finite-posterior starting point (centered scale).

    Every unconstrained coordinate is Uniform(-spread, spread); redraws
    until the log-posterior is finite, failing after 100 attempts.
    """
    n_verbs = data.n_verbs if kind is not ModelKind.FLAT else 0
    n = model.expected_parameter_count(kind, n_verbs)
    kernel = lik.PaintedKernel(painted, data.taxa)
    for _ in range(100):
        params = model.unpack(kind, rng.uniform(-spread, spread, n), n_verbs)
        if np.isfinite(model.log_posterior(kind, params, data, painted,
                                           root_prior, kernel)):
            return params
    raise RuntimeError("no finite-posterior initialization in 100 tries")


# ---------------------------------------------------------------------------
# Top-level sampling across trees and chains
# ---------------------------------------------------------------------------

def _chain_job(args):
    (kind, data, painted, cfg, root_prior, tree_idx, chain_idx, store_dir) = args
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, tree_idx, chain_idx]))
    chain = _ChainRun(kind, data, painted, cfg, root_prior, rng)
    stream_path = None
    if store_dir is not None:
        stream_path = os.path.join(store_dir, f"stream-t{tree_idx:03d}-c{chain_idx:02d}.bin")
        open(stream_path, "wb").close()
    draws, pointwise, logpost = chain.run(stream_path)
    return tree_idx, chain_idx, draws, pointwise, logpost


def sample(kind, data, painted_trees, cfg, root_prior=None, store_dir=None):
    """Run ``cfg.chains`` chains per painted tree and pool the draws.

    Each tree contributes exactly (iterations - warmup) * chains draws;
    pooling is a plain concatenation in (tree, chain) order.  R-hat for
    hypermeans and the death rate is computed per tree and attached to
    ``pool.meta['rhat_warnings']`` when any exceeds 1.05 (a warning, not
    a failure).
    """
    painted_trees = list(painted_trees)
    if not painted_trees:
        raise ValueError("need at least one painted tree")
    if store_dir is not None:
        os.makedirs(store_dir, exist_ok=True)
    jobs = [
        (kind, data, painted, cfg, root_prior, t, c, store_dir)
        for t, painted in enumerate(painted_trees)
        for c in range(cfg.chains)
    ]
    if cfg.n_processes > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_processes) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))

    draws = np.concatenate([r[2] for r in results], axis=0)
    pointwise = np.concatenate([r[3] for r in results], axis=0)
    logpost = np.concatenate([r[4] for r in results], axis=0)
    n_keep = cfg.n_keep
    tree_ids = np.concatenate([np.full(n_keep, r[0], dtype=np.int32) for r in results])
    chain_ids = np.concatenate([np.full(n_keep, r[1], dtype=np.int32) for r in results])

    verb_ids = data.verbs
    names = model.param_names(kind, verb_ids)
    pool = PosteriorPool(
        kind=kind, param_names=names, verb_ids=verb_ids, draws=draws,
        pointwise=pointwise, logpost=logpost, tree_ids=tree_ids,
        chain_ids=chain_ids,
        meta={"config": {"iterations": cfg.iterations, "warmup": cfg.warmup,
                         "chains": cfg.chains, "seed": cfg.seed,
                         "target_accept": cfg.target_accept,
                         "block_mode": cfg.block_mode},
              "n_trees": len(painted_trees)},
    )
    watch = [n for n in names if n == "log_delta" or n.startswith("mu[")]
    table = rhat_table(pool, watch)
    worst = max(v for v, _ in table.values())
    pool.meta["rhat_max_hyper"] = worst
    warnings = sorted(n for n, (v, _) in table.items() if v > 1.05)
    if warnings:
        pool.meta["rhat_warnings"] = warnings
    if store_dir is not None:
        save_pool(pool, store_dir)
    return pool


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def _split_rhat(series_list):
    """Split-Rhat over a list of equal-length chain series."""
    halves = []
    for s in series_list:
        n = len(s) // 2
        halves += [s[:n], s[n:2 * n]]
    mat = np.asarray(halves)
    m, n = mat.shape
    if n < 5:
        raise ValueError("need at least 10 draws per chain")
    means = mat.mean(axis=1)
    variances = mat.var(axis=1, ddof=1)
    w = variances.mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return (1.0, True) if b == 0 else (np.inf, True)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w)), False


def rhat(pool, param):
    """Split potential-scale-reduction factor for one parameter.

    Chains are compared within each tree (pooling across trees mixes
    genuinely different per-tree posteriors); the worst tree's value is
    returned.  Zero-variance parameters report 1.0 (flagged in
    rhat_table).
    """
    return rhat_table(pool, [param if isinstance(param, str)
                             else pool.param_names[param]])[
        param if isinstance(param, str) else pool.param_names[param]][0]


def rhat_table(pool, params=None):
    """{param: (rhat, zero_variance_flag)} over the requested parameters."""
    if params is None:
        params = pool.param_names
    groups = {}
    for t in np.unique(pool.tree_ids):
        sel_t = pool.tree_ids == t
        chains = np.unique(pool.chain_ids[sel_t])
        if len(chains) < 2:
            raise ValueError("need >= 2 chains per tree for R-hat")
        groups[t] = [(sel_t) & (pool.chain_ids == c) for c in chains]
    out = {}
    for name in params:
        col = pool.column(name)
        worst, flagged = 1.0, False
        for t, sels in groups.items():
            value, flag = _split_rhat([col[s] for s in sels])
            flagged = flagged or flag
            if value > worst:
                worst = value
        out[name] = (worst, flagged)
    return out


# ---------------------------------------------------------------------------
# Draw storage
# ---------------------------------------------------------------------------

def save_pool(pool, directory):
    """Columnar binary store: one .npy per array plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    np.save(os.path.join(directory, "draws.npy"), pool.draws)
    np.save(os.path.join(directory, "pointwise.npy"), pool.pointwise)
    np.save(os.path.join(directory, "logpost.npy"), pool.logpost)
    np.save(os.path.join(directory, "tree_ids.npy"), pool.tree_ids)
    np.save(os.path.join(directory, "chain_ids.npy"), pool.chain_ids)
    manifest = {
        "kind": pool.kind.value,
        "param_names": list(pool.param_names),
        "verb_ids": list(pool.verb_ids),
        "n_draws": int(pool.n_draws),
        "meta": pool.meta,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_pool(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    return PosteriorPool(
        kind=ModelKind(manifest["kind"]),
        param_names=tuple(manifest["param_names"]),
        verb_ids=tuple(manifest["verb_ids"]),
        draws=np.load(os.path.join(directory, "draws.npy")),
        pointwise=np.load(os.path.join(directory, "pointwise.npy")),
        logpost=np.load(os.path.join(directory, "logpost.npy")),
        tree_ids=np.load(os.path.join(directory, "tree_ids.npy")),
        chain_ids=np.load(os.path.join(directory, "chain_ids.npy")),
        meta=manifest["meta"],
    )
