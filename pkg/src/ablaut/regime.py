"""Fit the binary TAM character and paint E/N regimes onto branches.

The TAM character ("was the perfect construction extended to narrative
past?") is observed at the tips and fixed to N at the root.  A 2-state
all-rates-different Mk model is fitted by maximum likelihood; exact
marginal probabilities of state E at any point on any branch then drive
a deterministic painting: a point is in the E regime iff P(E) exceeds
the threshold (default 50%).

Regime indices used across the package: 0 = E (extended), 1 = N.
Internally the 2-state Mk chain is ordered (N, E) so the root prior is
the first unit vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.optimize

REGIMES = ("E", "N")
REGIME_E = 0
REGIME_N = 1

RATE_FLOOR = 1e-8
RATE_CEIL = 1e4


class TamError(ValueError):
    pass


class MkFitError(RuntimeError):
    """The 2-parameter rate optimizer failed to converge."""


@dataclass(frozen=True)
class TamObservation:
    """Taxon -> 'E'/'N' map covering every tip; the root is always N."""

    states: dict

    def __post_init__(self):
        bad = {k: v for k, v in self.states.items() if v not in ("E", "N")}
        if bad:
            raise TamError(f"TAM states must be 'E' or 'N', got {bad}")

    def require_tips(self, tree):
        missing = [lb for lb in tree.tip_labels() if lb not in self.states]
        if missing:
            raise TamError(f"TAM observation missing taxa: {missing}")

    def is_extended(self, taxon):
        return self.states[taxon] == "E"


def read_tam_csv(path):
    """Two-column CSV ``taxon,state`` with state in {E, N}."""
    states = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if [c.strip().lower() for c in row[:2]] == ["taxon", "state"]:
                continue
            if len(row) < 2:
                raise TamError(f"malformed TAM row: {row}")
            states[row[0].strip()] = row[1].strip()
    return TamObservation(states)


def write_tam_csv(obs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["taxon", "state"])
        for taxon in sorted(obs.states):
            w.writerow([taxon, obs.states[taxon]])


# ---------------------------------------------------------------------------
# Binary Mk likelihood machinery (states ordered N=0, E=1)
# ---------------------------------------------------------------------------

ROOT_PRIOR_N = np.array([1.0, 0.0])


def mk_transition(rate_ne, rate_en, t):
    """Closed-form 2x2 transition matrix; t may be an array."""
    t = np.asarray(t, dtype=float)
    s = rate_ne + rate_en
    if s == 0:
        return np.broadcast_to(np.eye(2), t.shape + (2, 2)).copy()
    decay = np.exp(-s * t)
    p = np.empty(t.shape + (2, 2))
    p[..., 0, 0] = (rate_en + rate_ne * decay) / s
    p[..., 0, 1] = (rate_ne - rate_ne * decay) / s
    p[..., 1, 0] = (rate_en - rate_en * decay) / s
    p[..., 1, 1] = (rate_ne + rate_en * decay) / s
    return p


def _tip_vectors(tree, obs):
    vec = np.ones((tree.n_nodes, 2))
    for i in tree.tips():
        vec[i] = (0.0, 1.0) if obs.is_extended(tree.labels[i]) else (1.0, 0.0)
    return vec


def _downward(tree, rates, tips):
    """Partial likelihoods L[v] of the tip data below v, with log scalers."""
    rate_ne, rate_en = rates
    partial = tips.copy()
    logscale = 0.0
    for v in tree.postorder():
        if tree.is_tip(v):
            continue
        acc = np.ones(2)
        for c in tree.children[v]:
            acc = acc * (mk_transition(rate_ne, rate_en, tree.lengths[c]) @ partial[c])
        top = acc.max()
        if top <= 0:
            return partial, -np.inf
        partial[v] = acc / top
        logscale += np.log(top)
    return partial, logscale


def mk_loglik(tree, obs, rates):
    """Pruning log-likelihood with the root fixed at N."""
    obs.require_tips(tree)
    partial, logscale = _downward(tree, rates, _tip_vectors(tree, obs))
    if not np.isfinite(logscale):
        return -np.inf
    like = float(ROOT_PRIOR_N @ partial[tree.root])
    return np.log(like) + logscale if like > 0 else -np.inf


def fit_binary_mk(tree, obs, floor=RATE_FLOOR):
    """Maximum-likelihood (rate N->E, rate E->N) for the TAM character.

    L-BFGS-B on log rates from a small deterministic multistart, with the
    rates floored at ``floor`` to keep the chain irreducible.  No-signal
    data puts the likelihood on a flat ridge (e.g. all tips N: any point
    with negligible E exposure has likelihood ~1); ties within numerical
    tolerance are resolved toward the floor so such fits report the rate
    as absent rather than an arbitrary ridge point.
    """
    obs.require_tips(tree)
    tips = _tip_vectors(tree, obs)

    def objective(x):
        rates = np.exp(x)
        partial, logscale = _downward(tree, rates, tips)
        like = float(ROOT_PRIOR_N @ partial[tree.root])
        if like <= 0 or not np.isfinite(logscale):
            return 1e10
        return -(np.log(like) + logscale)

    bounds = [(np.log(floor), np.log(RATE_CEIL))] * 2
    starts = [(-1.0, -1.0), (0.5, -2.0), (-2.5, 0.5), (1.5, 1.5)]
    best = None
    for x0 in starts:
        res = scipy.optimize.minimize(
            objective, np.array(x0), method="L-BFGS-B", bounds=bounds,
            options={"ftol": 1e-14, "gtol": 1e-10, "maxfun": 20000})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise MkFitError("binary Mk fit did not converge")
    x = best.x.copy()
    tol = 1e-9 * max(1.0, abs(best.fun)) + 1e-9
    for mask in ((True, True), (True, False), (False, True)):
        snapped = np.where(mask, np.log(floor), x)
        if objective(snapped) <= best.fun + tol:
            x = snapped
            break
    return float(np.exp(x[0])), float(np.exp(x[1]))


def _messages(tree, rates, tips):
    """Downward partials L and rootward messages A for every non-root node.

    A[v][s] is the joint likelihood of all data outside v's subtree and
    state s at v's parent (up to a shared scale); the marginal at any
    point on the branch above v combines A[v] and L[v].
    """
    rate_ne, rate_en = rates
    partial, _ = _downward(tree, rates, tips)
    rootward = np.zeros((tree.n_nodes, 2))
    upmsg = np.zeros((tree.n_nodes, 2))
    upmsg[tree.root] = ROOT_PRIOR_N
    for u in tree.preorder():
        kids = tree.children[u]
        if not kids:
            continue
        down = {c: mk_transition(rate_ne, rate_en, tree.lengths[c]) @ partial[c] for c in kids}
        for c in kids:
            acc = upmsg[u].copy()
            for w in kids:
                if w != c:
                    acc = acc * down[w]
            top = acc.max()
            rootward[c] = acc / top if top > 0 else acc
            upmsg[c] = rootward[c] @ mk_transition(rate_ne, rate_en, tree.lengths[c])
    return partial, rootward


class _Painter:
    """Shared up/down messages for repeated marginal queries on one tree."""

    def __init__(self, tree, rates, obs):
        obs.require_tips(tree)
        self.tree = tree
        self.rates = rates
        self.partial, self.rootward = _messages(tree, rates, _tip_vectors(tree, obs))

    def marginals(self, branch, fractions):
        """P(E) at distances fraction*length from the parent end."""
        if branch == self.tree.root:
            raise ValueError("the root has no branch; pick a child branch")
        fractions = np.asarray(fractions, dtype=float)
        length = self.tree.lengths[branch]
        d = fractions * length
        rate_ne, rate_en = self.rates
        above = np.einsum("s,gst->gt", self.rootward[branch],
                          mk_transition(rate_ne, rate_en, d))
        below = np.einsum("gst,t->gs", mk_transition(rate_ne, rate_en, length - d),
                          self.partial[branch])
        joint = above * below
        return joint[:, 1] / joint.sum(axis=1)


def marginal_regime_probability(tree, rates, obs, branch, fraction):
    """Exact P(state = E) at one point on a branch, given all tip data.

    ``branch`` is the child-end node id of the branch; ``fraction`` in
    [0, 1] measures from the parent (0) to the child (1).
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must be in [0, 1]")
    return float(_Painter(tree, rates, obs).marginals(branch, [fraction])[0])


# ---------------------------------------------------------------------------
# Painted trees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PaintedTree:
    """A timed tree whose branches carry ordered (length, regime) segments.

    Segments run rootward to tipward.  All lengths are positive and sum
    to the branch length (a zero-length branch gets one zero-length
    segment); consecutive segments alternate regimes.
    """

    tree: object
    segments: tuple   # per node: tuple of (length, regime index) or () for root

    def __post_init__(self):
        t = self.tree
        if len(self.segments) != t.n_nodes:
            raise ValueError("one segment list per node required")
        for v in range(t.n_nodes):
            segs = self.segments[v]
            if v == t.root:
                if segs:
                    raise ValueError("root carries no segments")
                continue
            if not segs:
                raise ValueError(f"node {v} has no segments")
            total = sum(ln for ln, _ in segs)
            if abs(total - t.lengths[v]) > 1e-9:
                raise ValueError(f"segments of node {v} sum to {total}, branch is {t.lengths[v]}")
            for ln, reg in segs:
                if reg not in (REGIME_E, REGIME_N):
                    raise ValueError(f"bad regime {reg}")
                if ln <= 0 and not (t.lengths[v] == 0 and len(segs) == 1):
                    raise ValueError(f"non-positive segment on node {v}")
            for (_, r1), (_, r2) in zip(segs, segs[1:]):
                if r1 == r2:
                    raise ValueError("consecutive segments must alternate regimes")

    def total_regime_length(self, regime):
        return sum(ln for segs in self.segments for ln, r in segs if r == regime)

    def tip_regime_set(self, regime=REGIME_E):
        """Tip labels whose terminal branch contains the given regime."""
        t = self.tree
        return frozenset(
            t.labels[i] for i in t.tips()
            if any(r == regime for _, r in self.segments[i])
        )


def paint_all(tree, regime=REGIME_N):
    """Trivial painting: every branch a single segment of one regime."""
    segs = []
    for v in range(tree.n_nodes):
        segs.append(() if v == tree.root else ((tree.lengths[v], regime),))
    return PaintedTree(tree, tuple(segs))


def paint_regimes(tree, rates, obs, grid_points_per_branch=100, threshold=0.5,
                  sticky_e=False):
    """Deterministic E/N painting by thresholded marginal probability.

    Each branch is split into ``grid_points_per_branch`` equal intervals;
    an interval is E iff P(E) at its midpoint exceeds ``threshold``.
    Adjacent same-regime intervals merge, and each switch point is placed
    by linear interpolation of P(E) between the two midpoints that
    bracket the crossing.  With ``sticky_e`` the E regime persists once
    entered: descendants of any crossing stay E.
    """
    m = int(grid_points_per_branch)
    if m < 2:
        raise ValueError("need at least 2 grid points per branch")
    painter = _Painter(tree, rates, obs)
    segments = [() for _ in range(tree.n_nodes)]
    crossed = {tree.root: False}

    for v in tree.preorder():
        if v == tree.root:
            continue
        length = tree.lengths[v]
        if sticky_e and crossed[tree.parent[v]]:
            segments[v] = ((length, REGIME_E),)
            crossed[v] = True
            continue
        if length == 0:
            prob = painter.marginals(v, np.array([1.0]))[0]
            reg = REGIME_E if prob > threshold else REGIME_N
            segments[v] = ((0.0, reg),)
            crossed[v] = crossed[tree.parent[v]] or reg == REGIME_E
            continue
        mids = (np.arange(m) + 0.5) / m
        probs = painter.marginals(v, mids)
        labels = probs > threshold
        # crossing positions between consecutive midpoints with differing labels
        cuts = []
        cut_pre_label = []   # label of the piece ending at each cut
        for k in range(m - 1):
            if labels[k] != labels[k + 1]:
                x0, x1 = mids[k] * length, mids[k + 1] * length
                p0, p1 = probs[k], probs[k + 1]
                cuts.append(x0 + (threshold - p0) * (x1 - x0) / (p1 - p0))
                cut_pre_label.append(labels[k])
        piece_labels = [bool(lb) for lb in cut_pre_label] + [bool(labels[-1])]
        bounds = [0.0] + cuts + [length]
        segs = [
            [bounds[k + 1] - bounds[k], REGIME_E if piece_labels[k] else REGIME_N]
            for k in range(len(piece_labels))
        ]
        if sticky_e:
            first_e = next((k for k, (_, r) in enumerate(segs) if r == REGIME_E), None)
            if first_e is not None:
                segs = segs[:first_e] + [[length - bounds[first_e], REGIME_E]]
        merged = []
        for seg_len, reg in segs:
            if seg_len <= 0:
                continue   # exact-threshold degeneracy
            if merged and merged[-1][1] == reg:
                merged[-1][0] += seg_len
            else:
                merged.append([seg_len, reg])
        segments[v] = tuple((float(ln), int(r)) for ln, r in merged)
        crossed[v] = crossed[tree.parent[v]] or any(r == REGIME_E for _, r in merged)

    return PaintedTree(tree, tuple(segments))


# ---------------------------------------------------------------------------
# Painted-tree serialization (extended Newick with [&regime=...] comments)
# ---------------------------------------------------------------------------

def write_painted_newick(painted):
    from . import treeio

    def comment(v):
        if v == painted.tree.root:
            return None
        parts = ",".join(f"{REGIMES[r]}:{ln!r}" for ln, r in painted.segments[v])
        return f"&regime={parts}"

    comments = tuple(comment(v) for v in range(painted.tree.n_nodes))
    return treeio.write_newick(painted.tree, node_comments=comments)


def read_painted_newick(text):
    from . import treeio

    tree, comments = treeio.parse_newick(text, keep_comments=True)
    segments = [() for _ in range(tree.n_nodes)]
    for v in range(tree.n_nodes):
        if v == tree.root:
            continue
        c = comments[v]
        if not c or not c.startswith("&regime="):
            raise ValueError(f"node {v} lacks a [&regime=...] annotation")
        segs = []
        for item in c[len("&regime="):].split(","):
            name, _, value = item.partition(":")
            if name not in REGIMES:
                raise ValueError(f"bad regime name {name!r}")
            segs.append((float(value), REGIMES.index(name)))
        segments[v] = tuple(segs)
    return PaintedTree(tree, tuple(segments))
