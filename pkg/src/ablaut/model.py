"""Model variants: flat, hierarchical, and ancestry-constrained.

All parameters live on the unconstrained (log) scale: ``log_delta`` for
the global death rate, hypermeans ``mu`` and log scales ``log_sigma``
per (regime, transition), and per-verb log rates ``log_rho`` for the
hierarchical variants.  ``log_prior`` is the log density of this
unconstrained parameterization, i.e. the textbook priors

    delta ~ LogNormal(0, 1)      rho ~ LogNormal(mu, sigma)
    mu    ~ Normal(0, 1)         sigma ~ HalfNormal(0, 1)

with the log-transform Jacobians for delta, sigma, and rho folded in
(so e.g. the delta term reduces to Normal(0,1) on log_delta).

The ancestry-constrained variant is the hierarchical model evaluated on
a tree with a short root-attached pseudo-branch whose tip pins each
verb to its expert Proto-Germanic reconstruction; ``constrain_root``
performs that surgery on the painted tree and the character matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import lik, treeio
from .ctmc import N_TRANSITIONS, STATE_NAMES, TRANSITIONS, state_from_name
from .regime import REGIME_N, REGIMES, PaintedTree

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)

#: Taxon label of the pseudo-tip added by the ancestry-constrained model.
CONSTRAINT_TAXON = "PROTO_GERMANIC_EXPERT"


class ModelKind(Enum):
    FLAT = "flat"
    HIERARCHICAL = "hierarchical"
    ANCESTRY_CONSTRAINED = "constrained"

    @property
    def has_verb_rates(self):
        return self is not ModelKind.FLAT


TRANSITION_LABELS = tuple(
    f"{STATE_NAMES[i]}>{STATE_NAMES[j]}" for i, j in TRANSITIONS
)


@dataclass(frozen=True)
class ModelParams:
    """One point in parameter space (unconstrained scale).

    mu and log_sigma have shape (2, 20) indexed (regime, transition);
    log_rho is (V, 2, 20) and present only for verb-rate models.
    """

    log_delta: float
    mu: np.ndarray
    log_sigma: np.ndarray = None
    log_rho: np.ndarray = None

    def __post_init__(self):
        if self.mu.shape != (2, N_TRANSITIONS):
            raise ValueError(f"mu must be (2, {N_TRANSITIONS})")
        if (self.log_sigma is None) != (self.log_rho is None):
            raise ValueError("log_sigma and log_rho must be given together")
        if self.log_rho is not None:
            if self.log_sigma.shape != (2, N_TRANSITIONS):
                raise ValueError("log_sigma must be (2, 20)")
            if self.log_rho.ndim != 3 or self.log_rho.shape[1:] != (2, N_TRANSITIONS):
                raise ValueError("log_rho must be (V, 2, 20)")
        assert self.n_parameters == expected_parameter_count(
            ModelKind.FLAT if self.log_rho is None else ModelKind.HIERARCHICAL,
            0 if self.log_rho is None else self.log_rho.shape[0])

    @property
    def sigma(self):
        return None if self.log_sigma is None else np.exp(self.log_sigma)

    @property
    def n_verbs(self):
        return 0 if self.log_rho is None else self.log_rho.shape[0]

    @property
    def n_parameters(self):
        n = 1 + self.mu.size
        if self.log_rho is not None:
            n += self.log_sigma.size + self.log_rho.size
        return n


def expected_parameter_count(kind, n_verbs):
    """41 for the flat model; 41 + 40 + 40 V for verb-rate models."""
    base = 1 + 2 * N_TRANSITIONS
    if kind is ModelKind.FLAT:
        return base
    return base + 2 * N_TRANSITIONS + n_verbs * 2 * N_TRANSITIONS


def param_names(kind, verb_ids=()):
    names = ["log_delta"]
    for r in REGIMES:
        names += [f"mu[{r}][{t}]" for t in TRANSITION_LABELS]
    if kind is not ModelKind.FLAT:
        for r in REGIMES:
            names += [f"log_sigma[{r}][{t}]" for t in TRANSITION_LABELS]
        for verb in verb_ids:
            for r in REGIMES:
                names += [f"log_rho[{verb}][{r}][{t}]" for t in TRANSITION_LABELS]
    return tuple(names)


def pack(params):
    parts = [np.array([params.log_delta]), params.mu.ravel()]
    if params.log_rho is not None:
        parts += [params.log_sigma.ravel(), params.log_rho.ravel()]
    return np.concatenate(parts)


def unpack(kind, vector, n_verbs=0):
    vector = np.asarray(vector, dtype=float)
    if vector.size != expected_parameter_count(kind, n_verbs):
        raise ValueError(
            f"expected {expected_parameter_count(kind, n_verbs)} parameters, got {vector.size}")
    log_delta = float(vector[0])
    mu = vector[1:1 + 2 * N_TRANSITIONS].reshape(2, N_TRANSITIONS)
    if kind is ModelKind.FLAT:
        return ModelParams(log_delta, mu)
    k = 1 + 2 * N_TRANSITIONS
    log_sigma = vector[k:k + 2 * N_TRANSITIONS].reshape(2, N_TRANSITIONS)
    k += 2 * N_TRANSITIONS
    log_rho = vector[k:].reshape(n_verbs, 2, N_TRANSITIONS)
    return ModelParams(log_delta, mu, log_sigma, log_rho)


def _std_normal_logpdf(x):
    return -HALF_LOG_2PI - 0.5 * np.square(x)


def log_prior(kind, params):
    """Log prior density on the unconstrained scale (Jacobians included)."""
    if kind is ModelKind.FLAT and params.log_rho is not None:
        raise ValueError("flat model has no verb-level rates")
    if kind is not ModelKind.FLAT and params.log_rho is None:
        raise ValueError(f"{kind.value} model needs verb-level rates")
    out = float(np.sum(_std_normal_logpdf(params.mu)))
    out += float(_std_normal_logpdf(params.log_delta))
    if params.log_rho is not None:
        sigma = params.sigma
        if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be positive and finite")
        # HalfNormal(0,1) density of sigma plus the log|d sigma/d log_sigma|
        out += float(np.sum(0.5 * np.log(2.0 / np.pi) - 0.5 * sigma ** 2
                            + params.log_sigma))
        z = (params.log_rho - params.mu) / sigma
        out += float(np.sum(_std_normal_logpdf(z) - params.log_sigma))
    return out


def log_posterior(kind, params, data, painted, root_prior=None, kernel=None):
    """log_prior + sum of per-verb log-likelihoods; -inf signals rejection."""
    prior = log_prior(kind, params)
    if not np.isfinite(prior):
        return -np.inf
    if data.n_verbs == 0:
        return prior
    ll = lik.pointwise_loglik(params, data, painted, root_prior, kernel)
    total = prior + float(ll.sum())
    return total if np.isfinite(total) else -np.inf


# ---------------------------------------------------------------------------
# Expert root reconstructions and the ancestry-constrained variant
# ---------------------------------------------------------------------------

def read_expert_roots_csv(path):
    """CSV ``verb,state`` with the expert Proto-Germanic pattern per verb."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if [c.strip().lower() for c in row[:2]] == ["verb", "state"]:
                continue
            out[row[0].strip()] = int(state_from_name(row[1].strip()))
    return out


def write_expert_roots_csv(states, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["verb", "state"])
        for verb, state in states.items():
            w.writerow([verb, STATE_NAMES[int(state)]])


def constrain_root(painted, data, verb_root_states, epsilon=None):
    """Pin each verb's root state with a short root-attached pseudo-branch.

    Returns (painted tree with the pseudo-tip, character matrix with the
    matching pseudo-taxon column).  The pseudo-branch sits in the N
    regime (the root regime) and defaults to 1e-6 of the tree height.
    Every verb in ``data`` must appear in ``verb_root_states``.
    """
    tree = painted.tree
    if epsilon is None:
        epsilon = 1e-6 * tree.height()
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    missing = [v for v in data.verbs if v not in verb_root_states]
    if missing:
        raise KeyError(f"verbs missing from the expert root table: {missing}")

    parent = list(tree.parent) + [tree.root]
    lengths = list(tree.lengths) + [float(epsilon)]
    labels = list(tree.labels) + [CONSTRAINT_TAXON]
    new_tree = treeio.TimedTree.build(parent, lengths, labels)
    segments = tuple(painted.segments) + (((float(epsilon), REGIME_N),),)
    new_painted = PaintedTree(new_tree, segments)

    column = np.array([verb_root_states[v] for v in data.verbs], dtype=data.states.dtype)
    return new_painted, data.with_taxon(CONSTRAINT_TAXON, column)
