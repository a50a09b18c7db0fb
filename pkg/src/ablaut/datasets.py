"""Access to the shipped Germanic dataset.

The package bundles a 14-taxon timed tree sample (Old Saxon and Low
German grafted), a 107-verb stem-alternation character matrix with
language-realistic missingness, the binary TAM character, expert root
reconstructions, and the audited list of extended-regime lineages.  See
tools/make_dataset.py for how these files are produced.
"""

from importlib.resources import files

from . import lik, model, regime, treeio


def data_path(name):
    return files("ablaut").joinpath("data", name)


def mcc_tree():
    return treeio.parse_newick(data_path("mcc.nwk").read_text().strip())


def tree_sample():
    trees = tuple(treeio.parse_newick(line)
                  for line in data_path("trees.nwk").read_text().splitlines()
                  if line.strip())
    return treeio.TreeSample(trees, provenance="shipped Germanic sample")


def characters():
    return lik.read_characters_csv(data_path("patterns.csv"))


def tam():
    return regime.read_tam_csv(data_path("tam.csv"))


def expert_roots():
    return model.read_expert_roots_csv(data_path("expert_roots.csv"))


def audited_e_lineages():
    """Tip taxa whose terminal branch is expected to carry the E regime."""
    lines = data_path("e_lineages.txt").read_text().splitlines()
    return frozenset(l.strip() for l in lines
                     if l.strip() and not l.startswith("#"))
