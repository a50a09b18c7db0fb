"""Pruning likelihood of pattern data over painted trees.

One verb's tip patterns are scored against a pair of regime generators
(Q_E, Q_N): each branch segment contributes exp(Q^regime * length), a
multi-segment branch multiplies its segment matrices rootward to
tipward, and partial likelihoods accumulate tipward-to-root with
per-node rescaling so deep trees cannot underflow.

``prune_verb`` is the readable single-verb reference; ``PaintedKernel``
evaluates all verbs at once on precomputed index arrays and is what the
sampler uses.  The two are cross-checked in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels, ctmc
from .ctmc import DEAD, N_STATES, PatternState

MISSING = -1

_CELL_CODES = {s.name: int(s) for s in PatternState}
_CELL_CODES["?"] = MISSING


def uniform_root_prior(include_dead=True):
    """The 1/|S| root prior; optionally restricted to living states."""
    if include_dead:
        return np.full(N_STATES, 1.0 / N_STATES)
    prior = np.full(N_STATES, 1.0 / ctmc.N_LIVING)
    prior[DEAD] = 0.0
    return prior


@dataclass(frozen=True)
class CharacterMatrix:
    """Verbs x taxa grid of pattern states; MISSING (-1) marks gaps."""

    verbs: tuple
    taxa: tuple
    states: np.ndarray

    def __post_init__(self):
        v, k = len(self.verbs), len(self.taxa)
        if self.states.shape != (v, k):
            raise ValueError(f"states must be {v}x{k}")
        if len(set(self.verbs)) != v or len(set(self.taxa)) != k:
            raise ValueError("verb ids and taxon labels must be unique")
        if self.states.size and (self.states.min() < MISSING or self.states.max() >= N_STATES):
            raise ValueError("states must be -1 (missing) or valid state indices")
        observed = (self.states != MISSING).sum(axis=1)
        if np.any(observed == 0):
            bad = [self.verbs[i] for i in np.where(observed == 0)[0]]
            raise ValueError(f"verbs with no observed value: {bad}")

    @property
    def n_verbs(self):
        return len(self.verbs)

    def verb_index(self, verb):
        try:
            return self.verbs.index(verb)
        except ValueError:
            raise KeyError(f"unknown verb {verb!r}") from None

    def subset(self, verb_indices):
        idx = list(verb_indices)
        return CharacterMatrix(
            tuple(self.verbs[i] for i in idx), self.taxa, self.states[idx].copy())

    def with_taxon(self, taxon, column):
        """Append one taxon column (used by the root-constrained variant)."""
        col = np.asarray(column, dtype=self.states.dtype).reshape(-1, 1)
        return CharacterMatrix(
            self.verbs, self.taxa + (taxon,), np.hstack([self.states, col]))


def read_characters_csv(path):
    """CSV with header ``verb,taxon1,...``; cells in {AAA..ABC, DEAD, ?}."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0].strip().lower() != "verb":
        raise ValueError("character CSV must start with a 'verb,<taxa...>' header")
    taxa = tuple(c.strip() for c in rows[0][1:])
    verbs, data = [], []
    for row in rows[1:]:
        if len(row) != len(taxa) + 1:
            raise ValueError(f"row for {row[0]!r} has {len(row) - 1} cells, expected {len(taxa)}")
        verbs.append(row[0].strip())
        try:
            data.append([_CELL_CODES[c.strip()] for c in row[1:]])
        except KeyError as e:
            raise ValueError(f"bad state {e} in row for {row[0]!r}") from None
    return CharacterMatrix(tuple(verbs), taxa, np.array(data, dtype=np.int8).reshape(len(verbs), len(taxa)))


def write_characters_csv(matrix, path):
    names = {v: k for k, v in _CELL_CODES.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["verb"] + list(matrix.taxa))
        for i, verb in enumerate(matrix.verbs):
            w.writerow([verb] + [names[int(s)] for s in matrix.states[i]])


def tip_likelihoods(matrix):
    """(V, K, 6) state likelihood vectors: one-hot observed, all-ones missing."""
    v, k = matrix.states.shape
    out = np.zeros((v, k, N_STATES))
    miss = matrix.states == MISSING
    out[miss] = 1.0
    vi, ki = np.where(~miss)
    out[vi, ki, matrix.states[vi, ki].astype(int)] = 1.0
    return out


# ---------------------------------------------------------------------------
# Reference single-verb pruning
# ---------------------------------------------------------------------------

def branch_matrix(segments, q_e, q_n):
    """Transition matrix over a whole branch: ordered product of segment
    matrices, rootward segment first (rows index the parent state)."""
    out = np.eye(N_STATES)
    for length, reg in segments:
        q = q_e if reg == 0 else q_n
        out = out @ ctmc.expm(q * length)
    return out


def prune_verb(painted, q_e, q_n, tips, root_prior):
    """Log-likelihood of one verb's tip data on a painted tree.

    ``tips`` maps taxon label -> length-6 likelihood vector.  Partial
    likelihoods are rescaled by their max at every internal node and the
    log scalers accumulated, so the result is exact in log space.
    """
    tree = painted.tree
    root_prior = np.asarray(root_prior, dtype=float)
    if root_prior.shape != (N_STATES,) or abs(root_prior.sum() - 1.0) > 1e-9:
        raise ValueError("root prior must be a length-6 distribution")
    partial = {}
    logscale = 0.0
    for v in tree.postorder():
        if tree.is_tip(v):
            vec = np.asarray(tips[tree.labels[v]], dtype=float)
            if vec.shape != (N_STATES,):
                raise ValueError(f"tip vector for {tree.labels[v]!r} must have length 6")
            partial[v] = vec
        else:
            acc = np.ones(N_STATES)
            for c in tree.children[v]:
                acc = acc * (branch_matrix(painted.segments[c], q_e, q_n) @ partial[c])
            top = acc.max()
            if top <= 0:
                return -np.inf
            partial[v] = acc / top
            logscale += np.log(top)
    like = float(root_prior @ partial[tree.root])
    if like <= 0:
        return -np.inf
    result = np.log(like) + logscale
    if not np.isfinite(result):
        raise FloatingPointError("non-finite log-likelihood")
    return result


# ---------------------------------------------------------------------------
# Vectorized kernel
# ---------------------------------------------------------------------------

class PaintedKernel:
    """Flattened painted-tree structure for batched likelihood evaluation.

    Built once per (painted tree, taxon order); evaluation then costs one
    batched expm over all segments plus ~2 small matmuls per node.
    """

    def __init__(self, painted, taxa):
        tree = painted.tree
        self.painted = painted
        self.tree = tree
        self.taxa = tuple(taxa)
        labels = {tree.labels[i]: i for i in tree.tips()}
        missing = [t for t in self.taxa if t not in labels]
        extra = [tree.labels[i] for i in tree.tips() if tree.labels[i] not in self.taxa]
        if missing or extra:
            raise ValueError(
                f"taxa do not match tree tips (missing from tree: {missing}, "
                f"unmatched tips: {extra})")
        self.tip_node = np.array([labels[t] for t in self.taxa])
        self.node_tip_col = {labels[t]: k for k, t in enumerate(self.taxa)}

        seg_len, seg_regime, seg_node = [], [], []
        self.node_segs = {}
        for v in range(tree.n_nodes):
            if v == tree.root:
                continue
            start = len(seg_len)
            for length, reg in painted.segments[v]:
                seg_len.append(length)
                seg_regime.append(reg)
                seg_node.append(v)
            self.node_segs[v] = (start, len(seg_len))
        self.seg_len = np.array(seg_len)
        self.seg_regime = np.array(seg_regime, dtype=np.intp)
        self.n_segments = len(seg_len)
        self.postorder = tree.postorder()
        self.internal = [v for v in self.postorder if not tree.is_tip(v)]

        # flat arrays for the compiled kernel
        ptr = np.zeros(tree.n_nodes + 1, dtype=np.intp)
        for v in range(tree.n_nodes):
            ptr[v + 1] = ptr[v] + (self.node_segs[v][1] - self.node_segs[v][0]
                                   if v in self.node_segs else 0)
        # node_segs slices are assigned in node-id order, so ptr matches
        self._node_seg_ptr = ptr
        self._post_nodes = np.array(self.postorder, dtype=np.intp)
        self._post_is_tip = np.array([tree.is_tip(v) for v in self.postorder])
        self._parent = np.array([p if p is not None else -1 for p in tree.parent],
                                dtype=np.intp)
        tipcol = np.full(tree.n_nodes, -1, dtype=np.intp)
        for node, col in self.node_tip_col.items():
            tipcol[node] = col
        self._tip_col = tipcol

    def segment_matrices(self, q_e, q_n):
        """exp(Q^r * len) for every segment; batched over leading axes of Q."""
        q = np.stack([q_e, q_n], axis=-3)       # (..., 2, 6, 6)
        qs = q[..., self.seg_regime, :, :]      # (..., S, 6, 6)
        return ctmc.expm(qs * self.seg_len[..., :, None, None])

    def branch_matrices(self, seg_mats):
        """Per-node branch matrices from segment matrices (rootward first)."""
        out = {}
        for v, (start, stop) in self.node_segs.items():
            if stop == start + 1:
                out[v] = seg_mats[..., start, :, :]
            else:
                mat = seg_mats[..., start, :, :]
                for s in range(start + 1, stop):
                    mat = mat @ seg_mats[..., s, :, :]
                out[v] = mat
        return out

    def root_partials(self, q_e, q_n, tips):
        """Rescaled root partial likelihoods and their log scalers.

        ``tips`` is (V, K, 6) in kernel taxon order; Q may be shared
        (shape (6, 6)) or per-verb ((V, 6, 6)).  Returns (root (V, 6),
        logscale (V,)).
        """
        tips = np.asarray(tips, dtype=float)
        n_verbs = tips.shape[0]
        seg_mats = self.segment_matrices(q_e, q_n)
        shared = seg_mats.ndim == 3
        branch = self.branch_matrices(seg_mats)
        partial = {}
        logscale = np.zeros(n_verbs)
        tree = self.tree
        with np.errstate(divide="ignore", invalid="ignore"):
            for v in self.postorder:
                if tree.is_tip(v):
                    partial[v] = tips[:, self.node_tip_col[v], :]
                    continue
                acc = np.ones((n_verbs, N_STATES))
                for c in tree.children[v]:
                    b = branch[c]
                    if shared:
                        acc = acc * np.einsum("ij,vj->vi", b, partial[c])
                    else:
                        acc = acc * np.einsum("vij,vj->vi", b, partial[c])
                    del partial[c]
                top = acc.max(axis=1)
                partial[v] = acc / top[:, None]
                logscale = logscale + np.log(top)
        return partial[tree.root], logscale

    def loglik(self, q_e, q_n, tips, root_prior):
        """Per-verb log-likelihoods, batched; -inf where the data has
        probability zero."""
        root, logscale = self.root_partials(q_e, q_n, tips)
        like = root @ np.asarray(root_prior, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(like) + logscale
        out[~np.isfinite(out)] = -np.inf
        return out

    # -- compiled per-verb path (numba), used by the sampler ------------

    def new_cache(self, n_verbs):
        """Scratch for per-(verb, segment) transition matrices."""
        return np.empty((n_verbs, self.n_segments, N_STATES, N_STATES))

    def update_cache(self, cache, q, regimes=(0, 1)):
        """Recompute exp(Q^r len) into ``cache`` for the given regimes.

        q is (V, 2, 6, 6); untouched regimes keep their cached matrices,
        which is what makes single-regime sampler moves cheap.
        """
        mask = np.zeros(2, dtype=bool)
        for r in regimes:
            mask[r] = True
        _kernels.segment_expms(np.ascontiguousarray(q), self.seg_regime,
                               self.seg_len, cache, mask)

    def loglik_cached(self, cache, tips, root_prior):
        return _kernels.prune_batch(
            cache, self._node_seg_ptr, self._post_nodes, self._post_is_tip,
            self._parent, self._tip_col, tips, np.asarray(root_prior, dtype=float))

    def root_partials_cached(self, cache, tips):
        return _kernels.root_partials_batch(
            cache, self._node_seg_ptr, self._post_nodes, self._post_is_tip,
            self._parent, self._tip_col, tips)

    def loglik_per_verb(self, q, tips, root_prior, cache=None):
        """Per-verb-rate likelihood via the compiled kernel.

        q is (V, 2, 6, 6).  Falls back to the numpy path without numba.
        """
        if not _kernels.HAVE_NUMBA:
            return self.loglik(q[:, 0], q[:, 1], tips, root_prior)
        if cache is None:
            cache = self.new_cache(q.shape[0])
        self.update_cache(cache, q)
        return self.loglik_cached(cache, tips, root_prior)


def pointwise_loglik(params, data, painted, root_prior=None, kernel=None):
    """Per-verb log-likelihoods under flat or hierarchical parameters.

    ``params`` carries ``log_delta``, hypermeans ``mu`` (2, 20) and, for
    hierarchical models, per-verb ``log_rho`` (V, 2, 20); verbs evolve by
    exp(log_rho) when present, otherwise all share exp(mu).
    """
    if root_prior is None:
        root_prior = uniform_root_prior()
    if kernel is None:
        kernel = PaintedKernel(painted, data.taxa)
    tips = tip_likelihoods(data)
    death = np.exp(params.log_delta)
    log_rho = getattr(params, "log_rho", None)
    if log_rho is not None:
        if log_rho.shape[0] != data.n_verbs:
            raise ValueError("per-verb rates do not match the number of verbs")
        q = ctmc.build_rate_matrix(np.exp(log_rho), death)  # (V, 2, 6, 6)
        return kernel.loglik_per_verb(q, tips, root_prior)
    q = ctmc.build_rate_matrix(np.exp(params.mu), death)    # (2, 6, 6)
    return kernel.loglik(q[0], q[1], tips, root_prior)
