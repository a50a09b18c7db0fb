"""Posterior summaries: regime differences, reconstructions, model comparison.

Regime contrasts are computed from the hypermean-expected rate matrices
exp(mu) per regime (not per-verb averages): for every retained draw we
build both regimes' expected generators, take stationary / entry / exit
rates on the living block, and difference them (extended minus
non-extended).  A contrast is "decisive" when its HDI excludes zero.

PSIS-LOO follows the Pareto-smoothed importance sampling recipe: raw
importance ratios 1/p per draw, a generalized Pareto fit (the published
optimizer-free quantile/empirical-Bayes estimator) to the largest 20%
of ratios, tail replacement by expected order statistics truncated at
the raw maximum, and the usual ELPD / SE aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ctmc, lik, model
from .ctmc import N_LIVING, N_TRANSITIONS, STATE_NAMES
from .model import ModelKind

LIVING_NAMES = STATE_NAMES[:N_LIVING]
QUANTITIES = ("stationary", "entry", "exit")


def hdi(samples, mass=0.95):
    """Shortest contiguous sample window holding ceil(mass * n) points.

    Ties between equally short windows break toward the lowest start
    index.  Requires at least 10 samples.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 samples for an HDI")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    window = int(np.ceil(mass * n))
    if window >= n:
        return float(x[0]), float(x[-1])
    widths = x[window - 1:] - x[:n - window + 1]
    start = int(np.argmin(widths))          # first minimum wins
    assert widths[start] <= widths.min()    # minimal-width guarantee
    return float(x[start]), float(x[start + window - 1])


@dataclass
class RegimeDiffSummary:
    """Posterior differences (E minus N) per living state.

    d_* arrays are (valid draws, 5); hdis and decisive are keyed by
    level then quantity ("stationary" / "entry" / "exit").
    """

    states: tuple
    d_stationary: np.ndarray
    d_entry: np.ndarray
    d_exit: np.ndarray
    hdis: dict
    decisive: dict
    n_excluded: int = 0

    def quantity(self, name):
        return {"stationary": self.d_stationary, "entry": self.d_entry,
                "exit": self.d_exit}[name]


def regime_differences(pool, levels=(0.95,)):
    """Stationary/entry/exit contrasts from hypermean-expected matrices.

    Draws whose expected generator has a reducible living block in either
    regime are excluded and counted in ``n_excluded``.
    """
    mu = pool.mu_draws()                       # (D, 2, 20)
    rates = np.exp(mu)
    delta = np.exp(pool.log_delta_draws())
    q = ctmc.build_rate_matrix(rates, delta[:, None])   # (D, 2, 6, 6)
    pi, ok = ctmc.stationary_many(q)
    valid = ok.all(axis=1)
    q = q[valid]
    pi = pi[valid]
    exit_rates = ctmc.exit_rates_all(q)
    entry_rates = ctmc.entry_rates_all(q, pi)
    summary = RegimeDiffSummary(
        states=LIVING_NAMES,
        d_stationary=pi[:, 0] - pi[:, 1],
        d_entry=entry_rates[:, 0] - entry_rates[:, 1],
        d_exit=exit_rates[:, 0] - exit_rates[:, 1],
        hdis={}, decisive={},
        n_excluded=int((~valid).sum()),
    )
    for level in levels:
        summary.hdis[level] = {}
        summary.decisive[level] = {}
        for name in QUANTITIES:
            diffs = summary.quantity(name)
            bounds = np.array([hdi(diffs[:, s], level) for s in range(N_LIVING)])
            summary.hdis[level][name] = bounds
            summary.decisive[level][name] = (bounds[:, 0] > 0) | (bounds[:, 1] < 0)
    return summary


# ---------------------------------------------------------------------------
# Ancestral state reconstruction
# ---------------------------------------------------------------------------

@dataclass
class RootReconstruction:
    verb: str
    frequencies: np.ndarray      # (6,) posterior frequency of sampled states
    modal_state: int
    tied: bool


def _draw_rate_columns(pool, n_verbs):
    """Per-draw (V, 2, 20) log rates: log_rho columns, or mu for flat."""
    if pool.kind is ModelKind.FLAT:
        mu = pool.mu_draws()
        return np.broadcast_to(mu[:, None], (mu.shape[0], n_verbs, 2, N_TRANSITIONS))
    k = 1 + 4 * N_TRANSITIONS
    return pool.draws[:, k:].reshape(-1, n_verbs, 2, N_TRANSITIONS)


def reconstruct_all_roots(pool, data, painted, seed=0, root_prior=None):
    """Root-state reconstructions for every verb from every retained draw.

    For each draw, the root state distribution is proportional to
    root_prior(s) * L_v(s); one state is sampled per (draw, verb) and
    the per-verb sampling frequencies are reported along with the modal
    state (lexicographic tie-break, flagged).
    """
    if root_prior is None:
        root_prior = lik.uniform_root_prior()
    root_prior = np.asarray(root_prior, dtype=float)
    kernel = lik.PaintedKernel(painted, data.taxa)
    tips = lik.tip_likelihoods(data)
    n_verbs = data.n_verbs
    log_rates = _draw_rate_columns(pool, n_verbs)
    delta = np.exp(pool.log_delta_draws())
    rng = np.random.default_rng(seed)
    counts = np.zeros((n_verbs, 6))
    use_fast = lik._kernels.HAVE_NUMBA
    cache = kernel.new_cache(n_verbs) if use_fast else None
    for d in range(pool.n_draws):
        q = ctmc.build_rate_matrix(np.exp(log_rates[d]), delta[d])
        if use_fast:
            kernel.update_cache(cache, q)
            root, scale = kernel.root_partials_cached(cache, tips)
        else:
            root, scale = kernel.root_partials(q[:, 0], q[:, 1], tips)
        weights = root * root_prior
        totals = weights.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            dist = np.where(totals > 0, weights / totals, 0.0)
        picks = _sample_categorical(dist, rng)
        counts[np.arange(n_verbs), picks] += 1
    freqs = counts / pool.n_draws
    out = []
    for i, verb in enumerate(data.verbs):
        top = freqs[i].max()
        winners = np.where(freqs[i] == top)[0]
        out.append(RootReconstruction(
            verb=verb, frequencies=freqs[i],
            modal_state=int(winners[0]), tied=len(winners) > 1))
    return out


def _sample_categorical(dist, rng):
    cdf = np.cumsum(dist, axis=1)
    u = rng.random((dist.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((u > cdf[:, :-1]).sum(axis=1), dist.shape[1] - 1)


def reconstruct_root(pool, verb, data, painted, seed=0, root_prior=None):
    """Reconstruction for a single verb (see reconstruct_all_roots)."""
    idx = data.verb_index(verb)
    sub = data.subset([idx])
    if pool.kind is ModelKind.FLAT:
        results = reconstruct_all_roots(pool, sub, painted, seed, root_prior)
        return results[0]
    # build a single-verb view of the pool's rate columns
    k = 1 + 4 * N_TRANSITIONS
    cols = slice(k + idx * 2 * N_TRANSITIONS, k + (idx + 1) * 2 * N_TRANSITIONS)
    view = _SingleVerbPool(pool, cols)
    return reconstruct_all_roots(view, sub, painted, seed, root_prior)[0]


class _SingleVerbPool:
    """Minimal pool view exposing one verb's rate columns."""

    def __init__(self, pool, cols):
        self.kind = pool.kind
        self.n_draws = pool.n_draws
        head = pool.draws[:, :1 + 4 * N_TRANSITIONS]
        self.draws = np.hstack([head, pool.draws[:, cols]])
        self._pool = pool

    def mu_draws(self):
        return self._pool.mu_draws()

    def log_delta_draws(self):
        return self._pool.log_delta_draws()


# ---------------------------------------------------------------------------
# PSIS-LOO model comparison
# ---------------------------------------------------------------------------

@dataclass
class LooResult:
    elpd: float
    pointwise: np.ndarray        # (V,) per-observation ELPD
    se: float
    k_hat: np.ndarray            # (V,) Pareto shape diagnostics
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("SE must be >= 0")
        if self.k_hat.shape != self.pointwise.shape:
            raise ValueError("k_hat must align with pointwise ELPD")


def fit_generalized_pareto(exceedances):
    """(k, sigma) by the optimizer-free quantile/empirical-Bayes estimator
    (Zhang & Stephens 2009), with the standard weak prior pull on k."""
    y = np.sort(np.asarray(exceedances, dtype=float))
    n = y.size
    if n < 5 or y[-1] <= 0:
        raise ValueError("need >= 5 positive exceedances")
    m = 30 + int(np.sqrt(n))
    j = np.arange(1, m + 1)
    quartile = y[(n - 2) // 4]
    b = 1.0 / y[-1] + (1.0 - np.sqrt(m / (j - 0.5))) / (3.0 * quartile)
    with np.errstate(divide="ignore", invalid="ignore"):
        k_b = np.mean(np.log1p(-b[:, None] * y), axis=1)
        profile = n * (np.log(-b / k_b) - k_b - 1.0)
    profile[~np.isfinite(profile)] = -np.inf
    w = np.exp(profile - profile.max())
    b_star = float(np.sum(b * w) / np.sum(w))
    k_star = float(np.mean(np.log1p(-b_star * y)))
    sigma = -k_star / b_star
    k_star = (n * k_star + 5.0) / (n + 10.0)
    return k_star, sigma


def _gpd_quantile(p, k, sigma):
    if abs(k) < 1e-12:
        return -sigma * np.log1p(-p)
    return sigma / k * ((1.0 - p) ** -k - 1.0)


def smooth_log_ratios(log_ratios):
    """Pareto-smooth one observation's log importance ratios.

    Fits the GPD to the ceil(0.2 S) largest ratios, replaces them with
    expected order statistics of the fit, truncates at the raw maximum,
    and returns (smoothed log ratios, k_hat).  Degenerate tails (all
    equal, or too few draws) are returned unsmoothed with k_hat = -inf.
    """
    lr = np.asarray(log_ratios, dtype=float)
    s = lr.size
    m = int(np.ceil(0.2 * s))
    if m < 5:
        return lr, -np.inf
    shift = lr.max()
    ratios = np.exp(lr - shift)
    order = np.argsort(ratios, kind="stable")
    tail_idx = order[-m:]
    cut = ratios[order[-m - 1]] if m < s else 0.0
    exceed = ratios[tail_idx] - cut
    if exceed[-1] <= 0 or np.all(exceed == exceed[0]):
        return lr, -np.inf
    try:
        k_hat, sigma = fit_generalized_pareto(exceed)
    except ValueError:
        return lr, -np.inf
    ranks = np.arange(1, m + 1)
    smoothed = cut + _gpd_quantile((ranks - 0.5) / m, k_hat, sigma)
    smoothed = np.minimum(smoothed, ratios.max())
    out = lr.copy()
    with np.errstate(divide="ignore"):
        out[tail_idx] = np.log(smoothed) + shift
    return out, float(k_hat)


def _logsumexp(x):
    top = np.max(x)
    if not np.isfinite(top):
        return top
    return float(top + np.log(np.sum(np.exp(x - top))))


def psis_loo(pointwise, smooth=True):
    """PSIS-LOO expected log pointwise predictive density.

    ``pointwise`` is the (draws, V) log-likelihood matrix from a
    posterior pool.  With ``smooth=False`` this reduces exactly to naive
    importance-sampling LOO.
    """
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim != 2:
        raise ValueError("pointwise log-likelihood must be draws x observations")
    n_draws, n_obs = ll.shape
    elpd_i = np.empty(n_obs)
    k_hat = np.empty(n_obs)
    flags = {}
    for v in range(n_obs):
        lr = -ll[:, v]
        if n_draws == 1:
            elpd_i[v] = ll[0, v]
            k_hat[v] = -np.inf
            flags[v] = "single draw; no smoothing possible"
            continue
        if smooth:
            lw, k = smooth_log_ratios(lr)
            if not np.isfinite(k):
                flags[v] = "degenerate Pareto fit; tail left unsmoothed"
        else:
            lw, k = lr, np.nan
        elpd_i[v] = _logsumexp(lw + ll[:, v]) - _logsumexp(lw)
        k_hat[v] = k
    se = float(np.sqrt(n_obs * np.var(elpd_i, ddof=1))) if n_obs > 1 else 0.0
    return LooResult(float(elpd_i.sum()), elpd_i, se, k_hat, flags)


def compare(a, b):
    """(ELPD_a - ELPD_b, SE of the difference) over shared observations."""
    if a.pointwise.shape != b.pointwise.shape:
        raise ValueError("LOO results cover different observation sets")
    diffs = a.pointwise - b.pointwise
    delta = float(diffs.sum())
    se = float(np.sqrt(diffs.size * np.var(diffs, ddof=1))) if diffs.size > 1 else 0.0
    return delta, se
