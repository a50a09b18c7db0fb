"""Compiled inner loops for the batched pruning likelihood.

The sampler evaluates ~1e5 likelihoods per chain; the numpy kernel
spends most of that in per-call overhead on 6x6 matrices.  These numba
routines do the segment matrix exponentials (Pade-13 with per-matrix
scaling) and the pruning recursion in one compiled pass.  Everything
here is exercised against the pure-numpy reference in the test suite;
if numba is unavailable the package falls back to that reference.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap if not (args and callable(args[0])) else args[0]


_B = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


@njit(cache=True)
def _matmul6(a, b, out):
    for i in range(6):
        for j in range(6):
            s = 0.0
            for k in range(6):
                s += a[i, k] * b[k, j]
            out[i, j] = s


@njit(cache=True)
def _solve6(a, b):
    """In-place Gaussian elimination with partial pivoting; result in b."""
    for col in range(6):
        piv = col
        best = abs(a[col, col])
        for r in range(col + 1, 6):
            if abs(a[r, col]) > best:
                best = abs(a[r, col])
                piv = r
        if piv != col:
            for j in range(6):
                tmp = a[col, j]; a[col, j] = a[piv, j]; a[piv, j] = tmp
                tmp = b[col, j]; b[col, j] = b[piv, j]; b[piv, j] = tmp
        inv = 1.0 / a[col, col]
        for r in range(col + 1, 6):
            f = a[r, col] * inv
            if f != 0.0:
                for j in range(col, 6):
                    a[r, j] -= f * a[col, j]
                for j in range(6):
                    b[r, j] -= f * b[col, j]
    for col in range(5, -1, -1):
        inv = 1.0 / a[col, col]
        for j in range(6):
            s = b[col, j]
            for k in range(col + 1, 6):
                s -= a[col, k] * b[k, j]
            b[col, j] = s * inv
    return b


@njit(cache=True)
def _expm6(a, out, work):
    """Pade-13 scaling-and-squaring for one 6x6 matrix."""
    norm = 0.0
    for i in range(6):
        row = 0.0
        for j in range(6):
            row += abs(a[i, j])
        if row > norm:
            norm = row
    s = 0
    if norm > _THETA13:
        s = int(np.ceil(np.log2(norm / _THETA13)))
    scale = 0.5 ** s
    asc = work[0]
    for i in range(6):
        for j in range(6):
            asc[i, j] = a[i, j] * scale
    a2, a4, a6 = work[1], work[2], work[3]
    _matmul6(asc, asc, a2)
    _matmul6(a2, a2, a4)
    _matmul6(a2, a4, a6)
    tmp1, tmp2, u, v = work[4], work[5], work[6], work[7]
    # u = asc @ (a6 @ (b13 a6 + b11 a4 + b9 a2) + b7 a6 + b5 a4 + b3 a2 + b1 I)
    for i in range(6):
        for j in range(6):
            tmp1[i, j] = _B[13] * a6[i, j] + _B[11] * a4[i, j] + _B[9] * a2[i, j]
    _matmul6(a6, tmp1, tmp2)
    for i in range(6):
        for j in range(6):
            tmp2[i, j] += _B[7] * a6[i, j] + _B[5] * a4[i, j] + _B[3] * a2[i, j]
        tmp2[i, i] += _B[1]
    _matmul6(asc, tmp2, u)
    for i in range(6):
        for j in range(6):
            tmp1[i, j] = _B[12] * a6[i, j] + _B[10] * a4[i, j] + _B[8] * a2[i, j]
    _matmul6(a6, tmp1, v)
    for i in range(6):
        for j in range(6):
            v[i, j] += _B[6] * a6[i, j] + _B[4] * a4[i, j] + _B[2] * a2[i, j]
        v[i, i] += _B[0]
    # solve (v - u) x = (v + u)
    for i in range(6):
        for j in range(6):
            tmp1[i, j] = v[i, j] - u[i, j]
            tmp2[i, j] = v[i, j] + u[i, j]
    _solve6(tmp1, tmp2)
    for _ in range(s):
        _matmul6(tmp2, tmp2, tmp1)
        for i in range(6):
            for j in range(6):
                tmp2[i, j] = tmp1[i, j]
    for i in range(6):
        for j in range(6):
            out[i, j] = tmp2[i, j]


@njit(cache=True)
def expm_batch(mats):
    """expm of a (N, 6, 6) stack, per-matrix scaling."""
    n = mats.shape[0]
    out = np.empty_like(mats)
    work = np.empty((8, 6, 6))
    for k in range(n):
        _expm6(mats[k], out[k], work)
    return out


@njit(cache=True)
def segment_expms(q, seg_regime, seg_len, out, regime_mask):
    """out[v, s] = expm(q[v, regime(s)] * len(s)) for unmasked regimes.

    q: (V, 2, 6, 6); out: (V, S, 6, 6) updated in place.  regime_mask
    selects which regimes to recompute (stale cache rows are skipped).
    """
    n_verbs = q.shape[0]
    n_segs = seg_regime.shape[0]
    work = np.empty((8, 6, 6))
    scaled = np.empty((6, 6))
    for v in range(n_verbs):
        for s in range(n_segs):
            r = seg_regime[s]
            if not regime_mask[r]:
                continue
            for i in range(6):
                for j in range(6):
                    scaled[i, j] = q[v, r, i, j] * seg_len[s]
            _expm6(scaled, out[v, s], work)


@njit(cache=True)
def root_partials_batch(seg_mats, node_seg_ptr, post_nodes, post_is_tip,
                        parent, tip_col, tips):
    """Rescaled root partial likelihoods per verb, with log scalers.

    seg_mats: (V, S, 6, 6) segment transition matrices (rootward first
    within each node's slice node_seg_ptr[n]:node_seg_ptr[n+1]).
    post_nodes: all node ids in postorder (root last).  Partial
    likelihoods are rescaled by their max per node; a verb whose data
    has probability zero gets logscale -inf.
    """
    n_verbs = seg_mats.shape[0]
    n_nodes = node_seg_ptr.shape[0] - 1
    out_root = np.zeros((n_verbs, 6))
    out_scale = np.empty(n_verbs)
    partial = np.empty((n_nodes, 6))
    branch = np.empty((6, 6))
    tmp = np.empty((6, 6))
    root = post_nodes[post_nodes.shape[0] - 1]
    for v in range(n_verbs):
        logscale = 0.0
        dead = False
        # children fold into their parent before the parent is visited,
        # so internal partials start at 1 up front
        for node in range(n_nodes):
            for i in range(6):
                partial[node, i] = 1.0
        for idx in range(post_nodes.shape[0]):
            node = post_nodes[idx]
            if post_is_tip[idx]:
                for i in range(6):
                    partial[node, i] = tips[v, tip_col[node], i]
            if idx == post_nodes.shape[0] - 1:
                break
            # fold this node's partial into its parent through the branch
            start, stop = node_seg_ptr[node], node_seg_ptr[node + 1]
            for i in range(6):
                for j in range(6):
                    branch[i, j] = seg_mats[v, start, i, j]
            for s in range(start + 1, stop):
                _matmul6(branch, seg_mats[v, s], tmp)
                for i in range(6):
                    for j in range(6):
                        branch[i, j] = tmp[i, j]
            # rescale the completed node before propagating
            top = 0.0
            for i in range(6):
                if partial[node, i] > top:
                    top = partial[node, i]
            if top <= 0.0:
                dead = True
                break
            logscale += np.log(top)
            par = parent[node]
            for i in range(6):
                s = 0.0
                for j in range(6):
                    s += branch[i, j] * partial[node, j]
                partial[par, i] *= s / top
        if dead:
            out_scale[v] = -np.inf
            for i in range(6):
                out_root[v, i] = 0.0
            continue
        out_scale[v] = logscale
        for i in range(6):
            out_root[v, i] = partial[root, i]
    return out_root, out_scale


@njit(cache=True)
def prune_batch(seg_mats, node_seg_ptr, post_nodes, post_is_tip, parent,
                tip_col, tips, root_prior):
    """Per-verb log-likelihoods over the painted tree."""
    root, logscale = root_partials_batch(
        seg_mats, node_seg_ptr, post_nodes, post_is_tip, parent, tip_col, tips)
    n_verbs = seg_mats.shape[0]
    out = np.empty(n_verbs)
    for v in range(n_verbs):
        like = 0.0
        for i in range(6):
            like += root_prior[i] * root[v, i]
        if like > 0.0 and np.isfinite(logscale[v]):
            out[v] = np.log(like) + logscale[v]
        else:
            out[v] = -np.inf
    return out
