"""Category hierarchy parsing and leaf-to-basic label derivation.

The hierarchy is a DAG (a leaf may have several parents, e.g. a minivan that
is both a car and a van). Basic-level categories are a user-supplied antichain
of nodes; every leaf is assigned to the first basic-marked node found by an
upward breadth-first search that expands parents in file edge order.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynsetGraph:
    """Directed acyclic category hierarchy with optional basic-level marks.

    ``edges`` keeps exactly the order read from file; that order defines the
    tie-break when a leaf reaches two basic ancestors at the same BFS depth.
    """

    nodes: dict[str, str]                 # node_id -> display name
    edges: tuple[tuple[str, str], ...]    # (parent_id, child_id), file order
    basic_marks: frozenset[str] = frozenset()
    _parents: dict[str, list[str]] = field(repr=False, default_factory=dict)
    _children: dict[str, list[str]] = field(repr=False, default_factory=dict)

    @property
    def leaf_set(self) -> frozenset[str]:
        return frozenset(n for n in self.nodes if not self._children.get(n))

    @property
    def roots(self) -> frozenset[str]:
        return frozenset(n for n in self.nodes if not self._parents.get(n))

    def parents_of(self, node_id: str) -> list[str]:
        return self._parents.get(node_id, [])

    def children_of(self, node_id: str) -> list[str]:
        return self._children.get(node_id, [])


@dataclass(frozen=True)
class LabelMap:
    """Per-leaf assignment of subordinate and basic class indices."""

    entries: dict[str, tuple[int, int]]   # leaf_id -> (sub_index, basic_index)
    basic_names: tuple[str, ...]          # basic_index -> basic node_id
    sub_names: tuple[str, ...]            # sub_index -> leaf node_id

    @property
    def n_sub(self) -> int:
        return len(self.sub_names)

    @property
    def n_basic(self) -> int:
        return len(self.basic_names)

    def sub_index(self, leaf_id: str) -> int:
        return self.entries[leaf_id][0]

    def basic_index(self, leaf_id: str) -> int:
        return self.entries[leaf_id][1]


def build_graph(edges) -> SynsetGraph:
    """Construct a validated graph from (parent, child) pairs in order."""
    nodes: dict[str, str] = {}
    parents: dict[str, list[str]] = {}
    children: dict[str, list[str]] = {}
    seen = set()
    for parent, child in edges:
        if (parent, child) in seen:
            raise ValidationError(f"duplicate edge {parent}>{child}")
        seen.add((parent, child))
        nodes.setdefault(parent, parent)
        nodes.setdefault(child, child)
        parents.setdefault(child, []).append(parent)
        children.setdefault(parent, []).append(child)

    _check_acyclic(nodes, children)
    return SynsetGraph(nodes=nodes, edges=tuple(edges),
                       _parents=parents, _children=children)


def _check_acyclic(nodes, children) -> None:
    # Iterative three-color DFS; names one node on the first back edge found.
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    for start in nodes:
        if color[start] != WHITE:
            continue
        stack = [(start, iter(children.get(start, [])))]
        color[start] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    raise ValidationError(f"cycle detected through node {nxt!r}")
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    stack.append((nxt, iter(children.get(nxt, []))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()


def parse_synset_file(path) -> SynsetGraph:
    """Read a ``parent_id>child_id`` edge list into a SynsetGraph.

    Lines starting with ``#`` and blank lines are ignored. Edge order is
    preserved exactly; it is significant for multi-parent tie-breaking.
    """
    edges = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(">")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise ParseError(f"expected 'parent_id>child_id', got {raw!r}", line=lineno)
        edges.append((parts[0].strip(), parts[1].strip()))
    if not edges:
        raise ParseError("no edges found")
    return build_graph(edges)


def parse_marks_file(path) -> set[str]:
    """Read one node_id per line; ``#`` comments and blanks ignored."""
    marks = set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            marks.add(line)
    return marks


def _ancestors(graph: SynsetGraph, node: str) -> set[str]:
    out: set[str] = set()
    queue = deque(graph.parents_of(node))
    while queue:
        cur = queue.popleft()
        if cur in out:
            continue
        out.add(cur)
        queue.extend(graph.parents_of(cur))
    return out


def first_marked_ancestor(graph: SynsetGraph, leaf: str, marks) -> str | None:
    """Upward BFS from ``leaf``; first marked node wins, the leaf itself first.

    Parents are expanded in file edge order, so a multi-parent leaf whose
    parents are both marked resolves to the parent listed first.
    """
    queue = deque([leaf])
    visited = {leaf}
    while queue:
        node = queue.popleft()
        if node in marks:
            return node
        for parent in graph.parents_of(node):
            if parent not in visited:
                visited.add(parent)
                queue.append(parent)
    return None


def validate_basic_marks(graph: SynsetGraph, marks) -> SynsetGraph:
    """Attach basic-level marks after checking coverage and non-nesting.

    Fails closed: unknown ids, a mark that is an ancestor of another mark,
    or any leaf without a marked ancestor-or-self all raise ValidationError
    (the last one lists every uncovered leaf).
    """
    marks = set(marks)
    if not marks:
        raise ValidationError("basic marks set is empty")
    unknown = sorted(m for m in marks if m not in graph.nodes)
    if unknown:
        raise ValidationError(f"unknown node ids in marks: {', '.join(unknown)}")

    for m in sorted(marks):
        nested = _ancestors(graph, m) & marks
        if nested:
            other = sorted(nested)[0]
            raise ValidationError(
                f"nested basic marks: {other!r} is an ancestor of {m!r}")

    uncovered = sorted(
        leaf for leaf in graph.leaf_set
        if first_marked_ancestor(graph, leaf, marks) is None)
    if uncovered:
        raise ValidationError(
            "leaves with no basic ancestor-or-self: " + ", ".join(uncovered))

    return replace(graph, basic_marks=frozenset(marks))


def allocate_descendants(graph: SynsetGraph) -> LabelMap:
    """Assign every leaf to its first basic ancestor and number both levels.

    Indices are assigned by sorted node id (not file order) so the map is
    stable under edge reorderings that do not change any tie-break.
    """
    if not graph.basic_marks:
        raise ValidationError("graph has no validated basic marks")

    assignment: dict[str, str] = {}
    for leaf in sorted(graph.leaf_set):
        basic = first_marked_ancestor(graph, leaf, graph.basic_marks)
        assert basic is not None  # guaranteed by validate_basic_marks
        assignment[leaf] = basic

    used_basics = sorted(set(assignment.values()))
    empty = sorted(graph.basic_marks - set(used_basics))
    if empty:
        # Possible in DAGs when nearer marks capture every leaf of a mark.
        log.warning("basic marks with no assigned leaves dropped from the "
                    "label map: %s", ", ".join(empty))

    sub_names = tuple(sorted(graph.leaf_set))
    basic_names = tuple(used_basics)
    basic_pos = {b: i for i, b in enumerate(basic_names)}
    entries = {leaf: (i, basic_pos[assignment[leaf]])
               for i, leaf in enumerate(sub_names)}
    return LabelMap(entries=entries, basic_names=basic_names, sub_names=sub_names)


def category_height_histogram(graph: SynsetGraph, mode: str = "longest") -> dict[int, int]:
    """Count basic marks per height above their deepest (or nearest) leaf.

    ``mode`` selects the height measure: ``longest`` downward path to a leaf
    (default) or ``shortest``. Leaves have height 0 either way.
    """
    if mode not in ("longest", "shortest"):
        raise ValidationError(f"unknown height mode {mode!r}")
    if not graph.basic_marks:
        raise ValidationError("graph has no validated basic marks")
    pick = max if mode == "longest" else min
    memo: dict[str, int] = {}

    def height(node: str) -> int:
        if node in memo:
            return memo[node]
        kids = graph.children_of(node)
        h = 0 if not kids else 1 + pick(height(k) for k in kids)
        memo[node] = h
        return h

    hist: dict[int, int] = {}
    for mark in sorted(graph.basic_marks):
        h = height(mark)
        hist[h] = hist.get(h, 0) + 1
    return hist


def labelmap_to_csv(labelmap: LabelMap, path) -> None:
    """Write ``leaf_id,sub_index,basic_index,basic_id`` rows sorted by leaf."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["leaf_id", "sub_index", "basic_index", "basic_id"])
        for leaf in sorted(labelmap.entries):
            sub_i, basic_i = labelmap.entries[leaf]
            writer.writerow([leaf, sub_i, basic_i, labelmap.basic_names[basic_i]])


def labelmap_from_csv(path) -> LabelMap:
    """Inverse of :func:`labelmap_to_csv`."""
    entries: dict[str, tuple[int, int]] = {}
    basic_by_index: dict[int, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            sub_i = int(row["sub_index"])
            basic_i = int(row["basic_index"])
            entries[row["leaf_id"]] = (sub_i, basic_i)
            prev = basic_by_index.setdefault(basic_i, row["basic_id"])
            if prev != row["basic_id"]:
                raise ValidationError(
                    f"basic_index {basic_i} maps to both {prev!r} and {row['basic_id']!r}")
    if not entries:
        raise ValidationError(f"empty label map file {path}")
    sub_names = tuple(sorted(entries, key=lambda leaf: entries[leaf][0]))
    n_basic = max(basic_by_index) + 1
    if sorted(basic_by_index) != list(range(n_basic)):
        raise ValidationError("basic_index values have gaps")
    basic_names = tuple(basic_by_index[i] for i in range(n_basic))
    return LabelMap(entries=entries, basic_names=basic_names, sub_names=sub_names)
