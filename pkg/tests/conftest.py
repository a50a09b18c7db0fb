import numpy as np
import pytest

from ablaut import ctmc, treeio


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


def random_rate_matrix(rng, scale=1.0, death=None):
    """Random irreducible generator with lognormal living rates."""
    rates = scale * rng.lognormal(0.0, 0.7, size=ctmc.N_TRANSITIONS)
    if death is None:
        death = float(rng.uniform(0.0, 0.3))
    return ctmc.build_rate_matrix(rates, death)


def random_timed_tree(rng, n_tips, max_len=2.0):
    """Random rooted binary tree by sequential tip attachment."""
    if n_tips == 1:
        return treeio.TimedTree.build([-1], [0.0], ["t0"])
    parent = [-1, 0, 0]
    lengths = [0.0, rng.uniform(0.05, max_len), rng.uniform(0.05, max_len)]
    labels = [None, "t0", "t1"]
    tips = [1, 2]
    for k in range(2, n_tips):
        host = tips[rng.integers(len(tips))]
        split = len(parent)
        parent.append(parent[host])
        lengths.append(rng.uniform(0.05, lengths[host]) if lengths[host] > 0.05 else lengths[host] / 2)
        labels.append(None)
        new = len(parent)
        parent.append(split)
        lengths.append(rng.uniform(0.05, max_len))
        labels.append(f"t{k}")
        lengths[host] = max(lengths[host] - lengths[split], 0.01)
        parent[host] = split
        tips.append(new)
    return treeio.TimedTree.build(parent, lengths, labels)
