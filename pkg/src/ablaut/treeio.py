"""Timed phylogeny container, Newick parsing/writing, and tree surgery.

Trees are rooted, store one branch length per non-root node, and are
immutable after construction; node ids are contiguous integers.  Node
"ages" are measured back from the most recent tip (the deepest point of
the tree sits at age 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NewickError(ValueError):
    """Newick syntax or validation error, carrying the byte offset."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class TreeStructureError(ValueError):
    pass


class GraftError(ValueError):
    pass


@dataclass(frozen=True)
class TimedTree:
    """Rooted tree with branch lengths, immutable after construction.

    parent[i] is -1 for the root; lengths[i] is the branch above node i
    (0.0 for the root); labels[i] is None for unlabeled nodes.
    """

    parent: tuple
    lengths: tuple
    labels: tuple
    children: tuple = field(repr=False, default=())
    root: int = 0

    @staticmethod
    def build(parent, lengths, labels):
        n = len(parent)
        if not (len(lengths) == len(labels) == n) or n == 0:
            raise TreeStructureError("parent/lengths/labels must be equal nonempty length")
        roots = [i for i, p in enumerate(parent) if p == -1]
        if len(roots) != 1:
            raise TreeStructureError(f"tree must have exactly one root, found {len(roots)}")
        root = roots[0]
        kids = [[] for _ in range(n)]
        for i, p in enumerate(parent):
            if i == root:
                continue
            if not (0 <= p < n) or p == i:
                raise TreeStructureError(f"node {i} has invalid parent {p}")
            kids[p].append(i)
        # Acyclicity: every node must reach the root by parent hops.
        for i in range(n):
            seen, j = 0, i
            while j != root:
                j = parent[j]
                seen += 1
                if seen > n:
                    raise TreeStructureError("parent pointers contain a cycle")
        for i, ln in enumerate(lengths):
            if i == root:
                continue
            if not np.isfinite(ln) or ln < 0:
                raise TreeStructureError(f"branch length of node {i} is {ln}; must be finite and >= 0")
        tip_labels = [labels[i] for i in range(n) if not kids[i]]
        if any(lb is None for lb in tip_labels):
            raise TreeStructureError("every tip must carry a taxon label")
        if len(set(tip_labels)) != len(tip_labels):
            dupes = sorted({lb for lb in tip_labels if tip_labels.count(lb) > 1})
            raise TreeStructureError(f"duplicate tip labels: {dupes}")
        return TimedTree(
            parent=tuple(parent),
            lengths=tuple(float(x) for x in lengths),
            labels=tuple(labels),
            children=tuple(tuple(k) for k in kids),
            root=root,
        )

    # -- basic queries ------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.parent)

    def is_tip(self, i):
        return not self.children[i]

    def tips(self):
        return tuple(i for i in range(self.n_nodes) if not self.children[i])

    def tip_labels(self):
        return tuple(self.labels[i] for i in self.tips())

    def tip_index(self, label):
        for i in self.tips():
            if self.labels[i] == label:
                return i
        raise KeyError(f"no tip labeled {label!r}")

    def postorder(self):
        """Node ids with every child before its parent (root last)."""
        order, stack = [], [self.root]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(self.children[node])
        return tuple(reversed(order))

    def preorder(self):
        return tuple(reversed(self.postorder()))

    def depths(self):
        """Root-to-node path lengths."""
        d = np.zeros(self.n_nodes)
        for i in self.preorder():
            if i != self.root:
                d[i] = d[self.parent[i]] + self.lengths[i]
        return d

    def height(self):
        return float(self.depths().max())

    def ages(self):
        """Time before the most recent tip; deepest tip has age 0."""
        d = self.depths()
        return d.max() - d

    def mrca(self, label_a, label_b):
        a, b = self.tip_index(label_a), self.tip_index(label_b)
        ancestors = set()
        while a != -1:
            ancestors.add(a)
            a = self.parent[a]
        while b not in ancestors:
            b = self.parent[b]
        return b


# ---------------------------------------------------------------------------
# Newick
# ---------------------------------------------------------------------------

_LABEL_STOP = set("():,;[]'")


class _Parser:
    """Cursor over the Newick text.

    Comments in [brackets] are skipped wherever they occur; the body of
    the most recently skipped comment is kept in ``last_comment`` so the
    node parser can attach BEAST-style annotations (``label[&...]:len``)
    to the node being read.
    """

    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.last_comment = None

    def error(self, msg):
        raise NewickError(msg, self.pos)

    def peek(self):
        self.skip_space_and_comments()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_space_and_comments(self):
        t = self.text
        while self.pos < len(t):
            c = t[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = t.find("]", self.pos)
                if end == -1:
                    self.error("unterminated [comment]")
                self.last_comment = t[self.pos + 1:end]
                self.pos = end + 1
            else:
                return

    def read_label(self):
        self.skip_space_and_comments()
        t = self.text
        if self.pos < len(t) and t[self.pos] == "'":
            self.pos += 1
            out = []
            while True:
                if self.pos >= len(t):
                    self.error("unterminated quoted label")
                c = t[self.pos]
                if c == "'":
                    if self.pos + 1 < len(t) and t[self.pos + 1] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(out)
                out.append(c)
                self.pos += 1
        start = self.pos
        while self.pos < len(t) and t[self.pos] not in _LABEL_STOP and not t[self.pos].isspace():
            self.pos += 1
        return t[start:self.pos]

    def read_number(self):
        self.skip_space_and_comments()
        t, start = self.text, self.pos
        while self.pos < len(t) and (t[self.pos] in "+-.eE0123456789"):
            self.pos += 1
        if start == self.pos:
            self.error("expected a number")
        try:
            return float(t[start:self.pos])
        except ValueError:
            self.pos = start
            self.error(f"bad number {t[start:self.pos + 8]!r}")


def parse_newick(text, keep_comments=False):
    """Parse one Newick tree with branch lengths.

    Quoted labels and [bracketed comments] are accepted; comments are
    skipped unless ``keep_comments`` is set, in which case the last
    comment attached to each node is returned alongside the tree (used
    by the painted-tree reader).

    Raises NewickError with a byte offset for syntax problems, duplicate
    tip labels, or negative branch lengths.
    """
    p = _Parser(text)
    parent, lengths, labels, comments = [], [], [], []

    def new_node(par):
        parent.append(par)
        lengths.append(0.0)
        labels.append(None)
        comments.append(None)
        return len(parent) - 1

    def parse_node(par):
        idx = new_node(par)
        p.last_comment = None
        if p.peek() == "(":
            p.pos += 1
            while True:
                parse_node(idx)
                c = p.peek()
                if c == ",":
                    p.pos += 1
                    continue
                if c == ")":
                    p.pos += 1
                    break
                p.error("expected ',' or ')' in subtree")
            p.last_comment = None
        c = p.peek()
        if c and (c not in _LABEL_STOP or c == "'"):
            labels[idx] = p.read_label()
        if p.peek() == ":":
            p.pos += 1
            ln = p.read_number()
            if ln < 0:
                raise NewickError(f"negative branch length {ln}", p.pos)
            lengths[idx] = ln
            p.peek()   # pick up a trailing comment, if any
        elif par != -1:
            p.error("missing branch length")
        comments[idx] = p.last_comment
        return idx

    parse_node(-1)
    if p.peek() != ";":
        p.error("expected ';' at end of tree")
    p.pos += 1
    p.skip_space_and_comments()
    if p.pos != len(p.text):
        p.error("trailing text after ';'")
    try:
        tree = TimedTree.build(parent, lengths, labels)
    except TreeStructureError as e:
        raise NewickError(str(e)) from None
    if keep_comments:
        return tree, tuple(comments)
    return tree


def _format_label(label):
    if label is None:
        return ""
    if label and not any(c in _LABEL_STOP or c.isspace() for c in label):
        return label
    return "'" + label.replace("'", "''") + "'"


def _format_length(x):
    return repr(float(x))


def write_newick(tree, node_comments=None):
    """Serialize to Newick; parse_newick(write_newick(t)) is isomorphic to t."""

    def emit(i):
        parts = ""
        if tree.children[i]:
            parts = "(" + ",".join(emit(c) for c in tree.children[i]) + ")"
        out = parts + _format_label(tree.labels[i])
        if node_comments is not None and node_comments[i] is not None:
            out += "[" + node_comments[i] + "]"
        if i != tree.root:
            out += ":" + _format_length(tree.lengths[i])
        elif tree.lengths[i]:
            out += ":" + _format_length(tree.lengths[i])
        return out

    return emit(tree.root) + ";"


# ---------------------------------------------------------------------------
# Grafting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraftSpec:
    """Where and how to attach a new tip.

    Exactly one of ``sister_of`` (a taxon pair; attach on the branch above
    their MRCA) or ``child_of`` (attach on that taxon's terminal branch)
    must be given.  The tip age is either fixed (``tip_age``) or drawn
    uniformly within +-``age_jitter`` x anchor age around the age of tip
    ``age_like`` (requires an rng).  ``attach_age`` places the new node on
    the host branch; default is the branch midpoint.
    """

    taxon: str
    sister_of: tuple = None
    child_of: str = None
    tip_age: float = None
    age_like: str = None
    age_jitter: float = 0.1
    attach_age: float = None

    def __post_init__(self):
        if (self.sister_of is None) == (self.child_of is None):
            raise ValueError("exactly one of sister_of/child_of must be set")
        if (self.tip_age is None) == (self.age_like is None):
            raise ValueError("exactly one of tip_age/age_like must be set")


def graft_taxon(tree, spec, rng=None):
    """Attach a new tip per ``spec``; returns a new tree.

    Existing root-to-tip distances are untouched: the host branch is
    split at the attachment point and the new tip hangs below the split.
    """
    ages = tree.ages()
    if spec.sister_of is not None:
        a, b = spec.sister_of
        try:
            host = tree.mrca(a, b)
        except KeyError as e:
            raise GraftError(str(e)) from None
    else:
        try:
            host = tree.tip_index(spec.child_of)
        except KeyError as e:
            raise GraftError(str(e)) from None
    if host == tree.root:
        raise GraftError("cannot attach above the root")

    if spec.tip_age is not None:
        tip_age = float(spec.tip_age)
    else:
        try:
            anchor_age = ages[tree.tip_index(spec.age_like)]
        except KeyError as e:
            raise GraftError(str(e)) from None
        if rng is None:
            raise GraftError("age_like grafting needs an rng")
        half = spec.age_jitter * anchor_age
        tip_age = float(rng.uniform(anchor_age - half, anchor_age + half))
    if tip_age < 0:
        raise GraftError(f"tip age {tip_age} is negative")

    host_age = ages[host]
    parent_age = ages[tree.parent[host]]
    attach_age = spec.attach_age
    if attach_age is None:
        attach_age = 0.5 * (host_age + parent_age)
    if not (host_age < attach_age < parent_age):
        raise GraftError(
            f"attachment age {attach_age} outside host branch ({host_age}, {parent_age})"
        )
    if tip_age > attach_age:
        raise GraftError(f"tip age {tip_age} exceeds attachment age {attach_age}")

    parent = list(tree.parent)
    lengths = list(tree.lengths)
    labels = list(tree.labels)
    split = len(parent)            # new internal node on the host branch
    parent.append(tree.parent[host])
    lengths.append(parent_age - attach_age)
    labels.append(None)
    tip = len(parent)
    parent.append(split)
    lengths.append(attach_age - tip_age)
    labels.append(spec.taxon)
    parent[host] = split
    lengths[host] = attach_age - host_age
    return TimedTree.build(parent, lengths, labels)


# ---------------------------------------------------------------------------
# Tree samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TreeSample:
    """A posterior sample of trees sharing one tip taxon set."""

    trees: tuple
    provenance: str = ""

    def __post_init__(self):
        if not self.trees:
            raise TreeStructureError("tree sample is empty")
        tipsets = {frozenset(t.tip_labels()) for t in self.trees}
        if len(tipsets) != 1:
            raise TreeStructureError("trees in a sample must share the same tip set")

    def __len__(self):
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)


def read_tree_sample(path, provenance=None):
    """Read a one-tree-per-line Newick file."""
    trees = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                trees.append(parse_newick(line))
    return TreeSample(tuple(trees), provenance or str(path))


def write_tree_sample(sample, path):
    with open(path, "w") as fh:
        for t in sample:
            fh.write(write_newick(t) + "\n")
