"""Class-hierarchy machinery: reachability counts and semantic splits.

A ClassDag is a directed acyclic graph over named nodes, some of which carry
a dataset class id. Counting the distinct classes reachable from a node uses
set-union semantics, because a class reachable through two parents must be
counted once; adding up child counts silently double-counts in any graph
with diamonds. Reachable sets are memoized as Python-int bitsets, which keeps
the union cheap even for a thousand classes.

File format, one node per line, tab separated:

    node<TAB>parent[,parent...]<TAB>[class_id]

Empty parent field marks a root; empty or missing class field marks an
internal node. Lines starting with '#' and blank lines are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .datasplit import ClassSplit
from .errors import AssignmentError, CycleError, InputError, OverlapError


@dataclass(frozen=True)
class ClassDag:
    parents: dict[str, tuple[str, ...]]
    leaf_map: dict[str, str]

    def __post_init__(self):
        for node, ps in self.parents.items():
            for p in ps:
                if p not in self.parents:
                    raise InputError(f"node {node!r} references unknown parent {p!r}")
        classes = list(self.leaf_map.values())
        if len(set(classes)) != len(classes):
            dupes = sorted({c for c in classes if classes.count(c) > 1})
            raise InputError(f"class ids appear more than once: {dupes}")
        for node in self.leaf_map:
            if node not in self.parents:
                raise InputError(f"leaf_map names unknown node {node!r}")

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(self.parents)

    def children(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.parents}
        for node, ps in self.parents.items():
            for p in ps:
                out[p].append(node)
        return out

    def class_list(self) -> tuple[str, ...]:
        """All class ids, in sorted order (the bitset bit assignment)."""
        return tuple(sorted(self.leaf_map.values()))


@dataclass(frozen=True)
class CountAnnotation:
    counts: dict[str, int]
    reach: dict[str, frozenset[str]] = field(repr=False, default_factory=dict)


def parse_dag(text: str) -> ClassDag:
    parents: dict[str, tuple[str, ...]] = {}
    leaf_map: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) > 3:
            raise InputError(f"line {lineno}: expected at most 3 tab-separated "
                             f"fields, got {len(fields)}")
        node = fields[0].strip()
        if not node:
            raise InputError(f"line {lineno}: empty node id")
        if node in parents:
            raise InputError(f"line {lineno}: duplicate node {node!r}")
        parent_field = fields[1].strip() if len(fields) > 1 else ""
        ps = tuple(p.strip() for p in parent_field.split(",") if p.strip())
        parents[node] = ps
        class_field = fields[2].strip() if len(fields) > 2 else ""
        if class_field:
            leaf_map[node] = class_field
    return ClassDag(parents=parents, leaf_map=leaf_map)


def load_dag(path) -> ClassDag:
    with open(path, encoding="utf-8") as fh:
        return parse_dag(fh.read())


def _reach_bits(dag: ClassDag) -> tuple[dict[str, int], tuple[str, ...]]:
    """Memoized reachable-class bitset per node; raises on cycles.

    Iterative depth-first walk with an explicit stack; a back edge to a node
    currently on the path is a cycle, reported with the closed path as the
    witness.
    """
    classes = dag.class_list()
    bit_of = {c: 1 << i for i, c in enumerate(classes)}
    children = dag.children()
    done: dict[str, int] = {}
    on_path: list[str] = []
    on_path_set: set[str] = set()

    for start in dag.parents:
        if start in done:
            continue
        stack: list[tuple[str, int]] = [(start, 0)]
        on_path.append(start)
        on_path_set.add(start)
        while stack:
            node, child_i = stack[-1]
            kids = children[node]
            if child_i < len(kids):
                stack[-1] = (node, child_i + 1)
                kid = kids[child_i]
                if kid in done:
                    continue
                if kid in on_path_set:
                    cycle = on_path[on_path.index(kid):] + [kid]
                    raise CycleError(
                        "hierarchy contains a cycle: " + " -> ".join(cycle),
                        witness=cycle)
                stack.append((kid, 0))
                on_path.append(kid)
                on_path_set.add(kid)
            else:
                bits = bit_of.get(dag.leaf_map.get(node, ""), 0)
                for kid in kids:
                    bits |= done[kid]
                done[node] = bits
                stack.pop()
                on_path.pop()
                on_path_set.discard(node)
    return done, classes


def annotate_counts(dag: ClassDag) -> CountAnnotation:
    """n_i for every node: how many distinct classes its subgraph reaches."""
    bits, classes = _reach_bits(dag)
    counts = {node: b.bit_count() for node, b in bits.items()}
    reach = {
        node: frozenset(c for i, c in enumerate(classes) if b >> i & 1)
        for node, b in bits.items()
    }
    return CountAnnotation(counts=counts, reach=reach)


def top_nodes(annotation: CountAnnotation, k: int) -> list[tuple[str, int]]:
    """The k largest-count nodes, descending; ties break by node id."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    ranked = sorted(annotation.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def semantic_split(dag: ClassDag, root_a: str, root_b: str,
                   ) -> tuple[frozenset[str], frozenset[str], frozenset[str]]:
    """Classes reachable from each root, plus the classes reachable from
    neither. Overlapping roots are an error, not a silent preference."""
    if root_a == root_b:
        raise InputError("the two roots must differ")
    for root in (root_a, root_b):
        if root not in dag.parents:
            raise InputError(f"unknown root {root!r}")
    annotation = annotate_counts(dag)
    set_a, set_b = annotation.reach[root_a], annotation.reach[root_b]
    shared = set_a & set_b
    if shared:
        raise OverlapError(
            f"subtrees {root_a!r} and {root_b!r} share {len(shared)} classes, "
            f"e.g. {sorted(shared)[:5]}",
            witnesses=sorted(shared))
    leftovers = frozenset(dag.class_list()) - set_a - set_b
    return set_a, set_b, leftovers


def assign_leftovers(set_a, set_b, leftovers, manual_map: dict[str, str]) -> ClassSplit:
    """Fold a manual assignment of the leftover classes into a final split.

    The manual map must cover exactly the leftovers: anything missing or
    extraneous is an error, because a silently dropped class would change the
    task without anyone noticing.
    """
    leftovers = frozenset(leftovers)
    missing = sorted(leftovers - set(manual_map))
    extra = sorted(set(manual_map) - leftovers)
    if missing or extra:
        raise AssignmentError(
            f"manual assignment mismatch: {len(missing)} uncovered, "
            f"{len(extra)} extraneous", missing=missing, extra=extra)
    bad = {c: s for c, s in manual_map.items() if s not in ("A", "B")}
    if bad:
        raise InputError(f"manual sides must be A or B: {bad}")
    assignment = {c: "A" for c in set_a}
    assignment.update({c: "B" for c in set_b})
    assignment.update(manual_map)
    return ClassSplit(assignment=assignment, method="semantic", seed=None)
