"""Rooted trees over an ordered leaf sequence.

Nodes carry integer ids assigned in depth-first preorder, so the subtree of
node ``u`` occupies the contiguous id block ``[u, u + subtree_size[u])`` and its
leaves occupy a contiguous slice of :attr:`Tree.leaf_order`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

LABEL_RE = re.compile(r"[A-Za-z0-9_.\-]+")


class TreeError(ValueError):
    """Raised for malformed tree input."""


class NewickSyntaxError(TreeError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


@dataclass(frozen=True)
class NodeStats:
    deg: np.ndarray
    depth: np.ndarray
    n_leaves: np.ndarray
    max_depth: int
    max_degree: int
    min_degree: int


class Tree:
    """Immutable rooted tree.

    Parameters
    ----------
    children : sequence of sequences of int
        ``children[u]`` lists the children of node ``u`` left to right.
        Node ids must already be in preorder with root ``0``.
    labels : sequence of str
        Unique node labels.
    heights : array-like, optional
        Merge heights of internal nodes (dendrograms); leaves should be 0.
    """

    def __init__(self, children, labels, heights=None):
        n = len(children)
        if n == 0:
            raise TreeError("empty tree")
        if len(labels) != n:
            raise TreeError("labels and children differ in length")
        self.children = tuple(tuple(int(c) for c in ch) for ch in children)
        self.labels = tuple(str(x) for x in labels)
        if len(set(self.labels)) != n:
            seen = set()
            for lab in self.labels:
                if lab in seen:
                    raise TreeError(f"duplicate label {lab!r}")
                seen.add(lab)

        parent = np.full(n, -1, dtype=np.int64)
        for u, ch in enumerate(self.children):
            if len(ch) == 1:
                raise TreeError(f"unary internal node {self.labels[u]!r}")
            for c in ch:
                if not 0 < c < n or parent[c] != -1:
                    raise TreeError(f"node {c} has invalid or multiple parents")
                parent[c] = u
        if np.count_nonzero(parent == -1) != 1 or parent[0] != -1:
            raise TreeError("tree must have exactly one root with id 0")
        self.parent = parent
        self.root = 0

        # iterative preorder; also verifies ids are preorder (no cycles)
        order = []
        stack = [0]
        while stack:
            u = stack.pop()
            order.append(u)
            stack.extend(reversed(self.children[u]))
        if order != list(range(n)):
            raise TreeError("node ids must be assigned in preorder")

        deg = np.array([len(ch) for ch in self.children], dtype=np.int64)
        depth = np.ones(n, dtype=np.int64)
        for u in range(1, n):
            depth[u] = depth[parent[u]] + 1
        size = np.ones(n, dtype=np.int64)
        n_leaves = (deg == 0).astype(np.int64)
        for u in range(n - 1, 0, -1):
            size[parent[u]] += size[u]
            n_leaves[parent[u]] += n_leaves[u]
        leaf_order = np.flatnonzero(deg == 0)
        leaf_pos = np.full(n, -1, dtype=np.int64)
        leaf_pos[leaf_order] = np.arange(len(leaf_order))
        # first leaf at or below u in preorder
        leaf_start = np.empty(n, dtype=np.int64)
        for u in range(n - 1, -1, -1):
            leaf_start[u] = leaf_pos[u] if deg[u] == 0 else leaf_start[self.children[u][0]]

        self.deg = deg
        self.depth = depth
        self.subtree_size = size
        self.n_leaves = n_leaves
        self.leaf_order = leaf_order
        self.leaf_start = leaf_start
        self.is_leaf = deg == 0
        self.p = int(len(leaf_order))
        if self.p < 2:
            raise TreeError("a tree needs at least two leaves")
        self.internal = np.flatnonzero(deg > 0)
        self.heights = None if heights is None else np.asarray(heights, dtype=float)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        for arr in (deg, depth, size, n_leaves, leaf_order, leaf_start, parent):
            arr.setflags(write=False)

    # ------------------------------------------------------------------
    @property
    def n_nodes(self):
        return len(self.children)

    @property
    def max_depth(self):
        return int(self.depth.max())

    @property
    def max_degree(self):
        return int(self.deg.max())

    @property
    def min_degree(self):
        return int(self.deg[self.internal].min())

    @cached_property
    def stats(self):
        return NodeStats(self.deg, self.depth, self.n_leaves, self.max_depth,
                         self.max_degree, self.min_degree)

    @cached_property
    def _internal_by_depth(self):
        out = [[] for _ in range(self.max_depth + 1)]
        for u in self.internal:
            out[self.depth[u]].append(int(u))
        return [np.array(x, dtype=np.int64) for x in out]

    def node(self, label):
        """Node id for ``label`` (ids pass through unchanged)."""
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.n_nodes:
                raise KeyError(f"unknown node {label}")
            return int(label)
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown node {label!r}") from None

    def leaf_range(self, u):
        """``(start, length)`` of the leaves of ``u`` within ``leaf_order``."""
        u = self.node(u)
        return int(self.leaf_start[u]), int(self.n_leaves[u])

    def leaves_under(self, u):
        """Leaf ids below (or equal to) ``u``, in leaf order."""
        start, length = self.leaf_range(u)
        return self.leaf_order[start:start + length]

    def subtree_nodes(self, u):
        u = self.node(u)
        return np.arange(u, u + self.subtree_size[u])

    def internal_nodes_at_depth(self, d):
        """Non-leaf nodes at depth ``d`` (root has depth 1), in leaf order."""
        if not 1 <= d <= self.max_depth:
            raise ValueError(f"depth {d} outside 1..{self.max_depth}")
        return self._internal_by_depth[d]

    def is_ancestor(self, a, u):
        """True when ``a`` is ``u`` or an ancestor of it."""
        return a <= u < a + self.subtree_size[a]

    def __repr__(self):
        return f"Tree(p={self.p}, nodes={self.n_nodes}, D={self.max_depth})"

    def __eq__(self, other):
        return (isinstance(other, Tree) and self.children == other.children
                and self.labels == other.labels)

    def __hash__(self):
        return hash((self.children, self.labels))

    # ------------------------------------------------------------------
    def to_newick(self):
        out = []
        stack = [("node", 0)]
        while stack:
            kind, u = stack.pop()
            if kind == "comma":
                out.append(",")
            elif kind == "close":
                out.append(")" + self.labels[u])
            elif self.children[u]:
                out.append("(")
                stack.append(("close", u))
                ch = self.children[u]
                for i in range(len(ch) - 1, -1, -1):
                    stack.append(("node", ch[i]))
                    if i > 0:
                        stack.append(("comma", None))
            else:
                out.append(self.labels[u])
        return "".join(out) + ";"

    def to_dict(self):
        nodes = [{"label": lab} for lab in self.labels]
        for u, ch in enumerate(self.children):
            if ch:
                nodes[u]["children"] = [nodes[c] for c in ch]
        return nodes[0]

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_nested(cls, nested, heights=None):
        """Build from ``(label, [children...])`` pairs; leaves may be bare labels."""
        children, labels = [], []
        stack = [(nested, -1)]
        while stack:
            item, par = stack.pop()
            if isinstance(item, tuple):
                label, kids = item
            else:
                label, kids = item, []
            u = len(children)
            children.append([])
            labels.append(label)
            if par >= 0:
                children[par].append(u)
            for k in reversed(kids):
                stack.append((k, u))
        return cls(children, _fill_labels(labels), heights=heights)


def _fill_labels(labels):
    """Replace missing labels with ``n<id>`` avoiding explicit ones."""
    taken = {lab for lab in labels if lab}
    out = []
    for i, lab in enumerate(labels):
        if not lab:
            lab = f"n{i}"
            while lab in taken:
                lab += "_"
            taken.add(lab)
        out.append(lab)
    return out


def _parse_newick(text):
    children, labels = [], []
    stack = []  # open internal nodes
    pos = 0
    n = len(text)
    current = None  # node whose label may follow

    def skip_ws(i):
        while i < n and text[i].isspace():
            i += 1
        return i

    def new_node():
        u = len(children)
        children.append([])
        labels.append(None)
        if stack:
            children[stack[-1]].append(u)
        return u

    pos = skip_ws(pos)
    if pos >= n:
        raise NewickSyntaxError("empty input", pos)
    expect_item = True
    while True:
        pos = skip_ws(pos)
        if pos >= n:
            raise NewickSyntaxError("missing terminating ';'", pos)
        ch = text[pos]
        if expect_item:
            if ch == "(":
                if not stack and children:
                    raise NewickSyntaxError("multiple roots", pos)
                stack.append(new_node())
                pos += 1
                continue
            m = LABEL_RE.match(text, pos)
            if not m:
                raise NewickSyntaxError(f"unexpected {ch!r}", pos)
            if not stack and children:
                raise NewickSyntaxError("multiple roots", pos)
            u = new_node()
            labels[u] = m.group()
            pos = m.end()
            current = None
            expect_item = False
            if not stack:
                # bare single leaf at top level
                pos = skip_ws(pos)
                if pos < n and text[pos] == ";":
                    raise TreeError("a tree needs at least two leaves")
                raise NewickSyntaxError("expected ';'", pos)
            continue
        if ch == ",":
            if not stack:
                raise NewickSyntaxError("',' outside parentheses", pos)
            expect_item = True
            pos += 1
        elif ch == ")":
            if not stack:
                raise NewickSyntaxError("unbalanced ')'", pos)
            current = stack.pop()
            pos += 1
            pos = skip_ws(pos)
            m = LABEL_RE.match(text, pos)
            if m:
                labels[current] = m.group()
                pos = m.end()
            if not stack:
                pos = skip_ws(pos)
                if pos >= n or text[pos] != ";":
                    raise NewickSyntaxError("expected ';'", pos)
                pos = skip_ws(pos + 1)
                if pos != n:
                    raise NewickSyntaxError("trailing characters", pos)
                break
        elif ch == ":":
            raise NewickSyntaxError("branch lengths are not supported", pos)
        else:
            raise NewickSyntaxError(f"unexpected {ch!r}", pos)
    return children, labels


def _parse_json(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NewickSyntaxError(f"invalid JSON: {exc.msg}", exc.pos) from None
    children, labels = [], []
    stack = [(obj, -1)]
    while stack:
        item, par = stack.pop()
        if not isinstance(item, dict):
            raise TreeError("each JSON node must be an object")
        label = item.get("label")
        if label is not None and (not isinstance(label, str) or not LABEL_RE.fullmatch(label)):
            raise TreeError(f"invalid label {label!r}")
        kids = item.get("children", [])
        if not isinstance(kids, list):
            raise TreeError("'children' must be a list")
        u = len(children)
        children.append([])
        labels.append(label)
        if par >= 0:
            children[par].append(u)
        for k in reversed(kids):
            stack.append((k, u))
    return children, labels


def parse_tree(text, format="newick"):
    """Parse a tree from Newick (no branch lengths) or nested JSON.

    Internal nodes without a label get ``n<id>``. Unary nodes and duplicate
    labels raise :class:`TreeError`.
    """
    if format == "newick":
        children, labels = _parse_newick(text)
    elif format == "json":
        children, labels = _parse_json(text)
    else:
        raise ValueError(f"unknown tree format {format!r}")
    for u, lab in enumerate(labels):
        if lab is None and not children[u]:
            raise TreeError(f"leaf {u} has no label")
    explicit = [lab for lab in labels if lab is not None]
    if len(set(explicit)) != len(explicit):
        seen = set()
        for lab in explicit:
            if lab in seen:
                raise TreeError(f"duplicate label {lab!r}")
            seen.add(lab)
    return Tree(children, _fill_labels(labels))


def read_tree(path):
    """Read a tree file; ``.json`` selects the JSON format, anything else Newick."""
    with open(path) as fh:
        text = fh.read()
    fmt = "json" if str(path).endswith(".json") else "newick"
    return parse_tree(text, fmt)


def serialize_tree(t, format="newick"):
    if format == "newick":
        return t.to_newick()
    if format == "json":
        return t.to_json()
    raise ValueError(f"unknown tree format {format!r}")


def regular_tree(degree, levels, prefix="v"):
    """Balanced tree where every internal node has ``degree`` children.

    ``levels`` counts depths including the leaf level, so ``p = degree**(levels-1)``.
    """
    if degree < 2 or levels < 2:
        raise ValueError("need degree >= 2 and levels >= 2")

    def build(level, path):
        label = prefix + path if path else "root"
        if level == levels:
            return label
        return (label, [build(level + 1, f"{path}.{i}" if path else str(i)) for i in range(degree)])

    return Tree.from_nested(build(1, ""))
