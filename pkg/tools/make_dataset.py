#!/usr/bin/env python3
"""Build the shipped Germanic dataset (trees, patterns, TAM, expert roots).

The real verb codings are not redistributable inputs of this project, so
the repository ships a synthetic stand-in with the same shape: 14
Germanic taxa on a timed phylogeny (Old Saxon and Low German grafted, as
their data postdate the tree sample), 107 cognate verbs coded for
stem-alternation patterns with language-realistic missingness, a binary
TAM character, and the generating root states as the expert
reconstruction file.  Verb histories are simulated under the package's
own CTM machinery with a strong conserving effect on the ABB pattern in
the extended regime, so the pipeline's headline contrasts are
recoverable from the shipped files.

Run from the repo root:  python3 tools/make_dataset.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from ablaut import ctmc, lik, model, regime, treeio
from ablaut.ctmc import TRANSITIONS, PatternState

SEED = 20250817

# node ages in millennia before present
BASE_AGES = {
    "root": 2.30, "nw": 2.05,
    "north": 1.80, "insular": 1.05, "continental_n": 1.10, "dan_nor": 0.75,
    "west": 1.90, "anglo_frisian": 1.50, "oe_eng": 1.10,
    "cwg": 1.55, "hg": 1.20,
}
TIP_AGES = {
    "Gothic": 1.65, "Old_English": 1.05, "Old_High_German": 1.15,
    "Icelandic": 0.0, "Faroese": 0.0, "Norwegian": 0.0, "Danish": 0.0,
    "Swedish": 0.0, "English": 0.0, "West_Frisian": 0.0, "Dutch": 0.0,
    "German": 0.0,
}
# (node, parent) edges of the 12-taxon backbone before grafting
TOPOLOGY = {
    "nw": "root", "Gothic": "root",
    "north": "nw", "west": "nw",
    "insular": "north", "continental_n": "north",
    "Icelandic": "insular", "Faroese": "insular",
    "Swedish": "continental_n", "dan_nor": "continental_n",
    "Danish": "dan_nor", "Norwegian": "dan_nor",
    "anglo_frisian": "west", "cwg": "west",
    "West_Frisian": "anglo_frisian", "oe_eng": "anglo_frisian",
    "Old_English": "oe_eng", "English": "oe_eng",
    "Dutch": "cwg", "hg": "cwg",
    "Old_High_German": "hg", "German": "hg",
}

TAM_STATES = {
    "German": "E", "Dutch": "E", "Old_High_German": "E", "Low_German": "E",
    "West_Frisian": "E",
    "English": "N", "Old_English": "N", "Gothic": "N", "Old_Saxon": "N",
    "Icelandic": "N", "Faroese": "N", "Norwegian": "N", "Danish": "N",
    "Swedish": "N",
}

# missing cells per language, out of 107 (minority and archaic languages
# are patchier)
MISSING_COUNTS = {
    "West_Frisian": 50, "Old_High_German": 39, "Gothic": 34, "Low_German": 34,
    "Faroese": 21, "Danish": 14, "Old_Saxon": 11, "Icelandic": 6,
    "Norwegian": 5, "German": 4, "Swedish": 4, "Old_English": 2,
    "Dutch": 1, "English": 0,
}

VERBS = """
bake bear beat bid bide bind bite blow break brew burst carve choose
cleave climb cling come creep deal delve dig draw drink drive
eat fall fare fight find flee fling fly forget forsake freeze give glide
grind grip grow hang heave help hew hide hold kneel knead know
lade leap let lie lose melt mow ride ring rise row seethe
shake shape shave shear shine shoot shove shrink sing sink sit slay
sleep slide sling slink slit smite sow speak spin spring stand starve
steal stick sting stink stride strike strive swear swell swim swing tear
thrive tread wade wash weave weep win wind wring write
""".split()

# Proto-Germanic root pattern mix (ABC-dominant)
ROOT_MIX = {PatternState.ABC: 58, PatternState.ABB: 22, PatternState.ABA: 17,
            PatternState.AAA: 6, PatternState.AAB: 4}

# N-regime transition rates per millennium (leveling-flavored dynamics)
BASE_RATES = {
    (4, 3): 0.22, (4, 0): 0.10, (4, 2): 0.08, (4, 1): 0.02,   # from ABC
    (3, 0): 0.30, (3, 4): 0.05, (3, 2): 0.06, (3, 1): 0.03,   # from ABB
    (2, 0): 0.25, (2, 3): 0.18, (2, 4): 0.05, (2, 1): 0.04,   # from ABA
    (1, 0): 0.35, (1, 3): 0.25, (1, 2): 0.05, (1, 4): 0.05,   # from AAB
    (0, 3): 0.07, (0, 2): 0.03, (0, 1): 0.02, (0, 4): 0.03,   # from AAA
}
DEATH_RATE = 0.03
VERB_SIGMA = 0.5             # lognormal dispersion of verb-level rates
ABB_EXIT_MULTIPLIER = 0.10   # E-regime conservation of the ABB pattern
N_TREES = 50
GRID_POINTS = 100


def base_rate_vector():
    return np.array([BASE_RATES[(i, j)] for i, j in TRANSITIONS])


def backbone_tree(ages):
    """TimedTree for the 12 pre-graft taxa given node ages."""
    names = list(ages)
    index = {n: k for k, n in enumerate(names)}
    parent, lengths, labels = [], [], []
    for name in names:
        if name == "root":
            parent.append(-1)
            lengths.append(0.0)
        else:
            par = TOPOLOGY[name]
            parent.append(index[par])
            lengths.append(ages[par] - ages[name])
        labels.append(name if name in TIP_AGES else None)
    return treeio.TimedTree.build(parent, lengths, labels)


def _descendant_tip_ages():
    out = {}
    for tip, age in TIP_AGES.items():
        node = tip
        while node != "root":
            node = TOPOLOGY_PARENT[node]
            out[node] = max(out.get(node, 0.0), age)
    return out


def jittered_ages(rng):
    """Internal ages scaled and locally jittered; tips stay at their
    attested ages, and parent > child > oldest-descendant-tip ordering is
    enforced top-down."""
    deepest_tip = _descendant_tip_ages()
    ages = {}
    scale = rng.uniform(0.93, 1.07)
    order = ["root", "nw", "north", "west", "insular", "continental_n",
             "dan_nor", "anglo_frisian", "oe_eng", "cwg", "hg"]
    for name in order:
        lo = deepest_tip[name] + 0.02
        proposed = BASE_AGES[name] * scale * rng.uniform(0.96, 1.04)
        if name != "root":
            hi = ages[TOPOLOGY_PARENT[name]] - 0.02
            proposed = min(max(proposed, lo), hi)
        else:
            proposed = max(proposed, lo)
        ages[name] = proposed
    return ages


TOPOLOGY_PARENT = dict(TOPOLOGY)


def graft_saxon_low_german(tree, rng=None, fixed=False):
    """Attach Old Saxon (sister to the High German clade) and Low German
    (near-direct descendant of Old Saxon), as the tree sample lacks them."""
    if fixed:
        os_age = TIP_AGES["Old_High_German"]
        attach = None       # midpoint of the branch above MRCA(OHG, German)
        spec = treeio.GraftSpec("Old_Saxon", sister_of=("Old_High_German", "German"),
                                tip_age=os_age, attach_age=attach)
        tree = treeio.graft_taxon(tree, spec)
        tree = treeio.graft_taxon(tree, treeio.GraftSpec(
            "Low_German", child_of="Old_Saxon", tip_age=0.0))
        return tree
    ages = tree.ages()
    hg_node = tree.mrca("Old_High_German", "German")
    lo, hi = ages[hg_node], ages[tree.parent[hg_node]]
    attach = lo + rng.uniform(0.35, 0.65) * (hi - lo)
    spec = treeio.GraftSpec("Old_Saxon", sister_of=("Old_High_German", "German"),
                            age_like="Old_High_German", age_jitter=0.1,
                            attach_age=attach)
    tree = treeio.graft_taxon(tree, spec, rng=rng)
    ages = tree.ages()
    saxon = tree.tip_index("Old_Saxon")
    lo, hi = ages[saxon], ages[tree.parent[saxon]]
    attach = lo + rng.uniform(0.35, 0.65) * (hi - lo)
    tree = treeio.graft_taxon(tree, treeio.GraftSpec(
        "Low_German", child_of="Old_Saxon", tip_age=0.0, attach_age=attach))
    return tree


def build_trees(rng):
    mcc = graft_saxon_low_german(backbone_tree(_base_age_map()), fixed=True)
    sample = []
    for _ in range(N_TREES):
        ages = jittered_ages(rng)
        tree = backbone_tree({**ages, **TIP_AGES})
        sample.append(graft_saxon_low_german(tree, rng=rng))
    return mcc, treeio.TreeSample(tuple(sample), provenance="jittered Germanic sample")


def _base_age_map():
    return {**BASE_AGES, **TIP_AGES}


def regime_rate_pair():
    base = base_rate_vector()
    e_rates = base.copy()
    for t, (i, _) in enumerate(TRANSITIONS):
        if i == int(PatternState.ABB):
            e_rates[t] *= ABB_EXIT_MULTIPLIER
    return np.stack([e_rates, base])     # regime order (E, N)


def simulate_verbs(painted, rng):
    """107 verb histories down the painted MCC tree with verb-level
    lognormal rate dispersion around the regime hypermeans."""
    tree = painted.tree
    hyper = np.log(regime_rate_pair())           # (2, 20) log-scale means
    roots = []
    for state, count in ROOT_MIX.items():
        roots += [int(state)] * count
    roots = np.array(roots)
    rng.shuffle(roots)
    tip_order = list(tree.tips())
    rows = np.empty((len(VERBS), len(tip_order)), dtype=np.int8)
    root_states = {}
    for v, verb in enumerate(VERBS):
        log_rho = hyper + VERB_SIGMA * rng.standard_normal((2, 20))
        q = ctmc.build_rate_matrix(np.exp(log_rho), DEATH_RATE)
        state = {tree.root: int(roots[v])}
        for node in tree.preorder():
            if node == tree.root:
                continue
            s = state[tree.parent[node]]
            for length, reg in painted.segments[node]:
                if length > 0 and s != ctmc.DEAD:
                    s = ctmc.simulate_path(q[reg], s, length, rng)[-1][0]
            state[node] = s
        rows[v] = [state[i] for i in tip_order]
        root_states[verb] = int(roots[v])
    taxa = tuple(tree.labels[i] for i in tip_order)
    return lik.CharacterMatrix(tuple(VERBS), taxa, rows), root_states


def apply_missingness(data, rng):
    """Blank out per-language cell counts, never leaving a verb with no
    observed value."""
    states = data.states.copy()
    for taxon, count in MISSING_COUNTS.items():
        col = data.taxa.index(taxon)
        candidates = rng.permutation(len(data.verbs))
        blanked = 0
        for v in candidates:
            if blanked == count:
                break
            masked = states[v] == lik.MISSING
            if (~masked).sum() <= 1:
                continue
            states[v, col] = lik.MISSING
            blanked += 1
    return lik.CharacterMatrix(data.verbs, data.taxa, states)


def main(outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)

    assert len(VERBS) == 107 and len(set(VERBS)) == 107
    mcc, sample = build_trees(rng)

    obs = regime.TamObservation(TAM_STATES)
    obs.require_tips(mcc)
    rates = regime.fit_binary_mk(mcc, obs)
    painted = regime.paint_regimes(mcc, rates, obs, GRID_POINTS)

    data, root_states = simulate_verbs(painted, rng)
    data = apply_missingness(data, rng)

    with open(outdir / "mcc.nwk", "w") as fh:
        fh.write(treeio.write_newick(mcc) + "\n")
    treeio.write_tree_sample(sample, outdir / "trees.nwk")
    regime.write_tam_csv(obs, outdir / "tam.csv")
    lik.write_characters_csv(data, outdir / "patterns.csv")
    model.write_expert_roots_csv(root_states, outdir / "expert_roots.csv")
    e_tips = sorted(painted.tip_regime_set(regime.REGIME_E))
    with open(outdir / "e_lineages.txt", "w") as fh:
        fh.write("# tips whose terminal branch carries the extended regime\n")
        for tip in e_tips:
            fh.write(tip + "\n")
    print("MCC painting: Mk rates =", np.round(rates, 4))
    print("E tips:", e_tips)
    print("E length:", painted.total_regime_length(regime.REGIME_E))
    dead = (data.states == int(PatternState.DEAD)).sum()
    missing = (data.states == lik.MISSING).sum()
    print(f"cells: dead={dead}, missing={missing} / {data.states.size}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/ablaut/data")
