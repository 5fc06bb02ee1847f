"""Directed acyclic graphs, path enumeration, d-separation and the backdoor criterion.

Graphs in scope are small (a dozen nodes at most), so paths are enumerated
exhaustively and every verdict can be traced back to an explicit list of
paths and the node that blocks each of them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable

FORWARD = "forward"
BACKWARD = "backward"

CHAIN = "chain"
FORK = "fork"
COLLIDER = "collider"


class GraphError(ValueError):
    pass


class CycleDetected(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class OverlappingQuery(GraphError):
    pass


class GraphParseError(GraphError):
    def __init__(self, lineno: int, line: str, reason: str):
        self.lineno = lineno
        self.line = line
        super().__init__(f"line {lineno}: {reason}: {line.strip()!r}")


@dataclass(frozen=True)
class CausalDag:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def parents(self, node: str) -> tuple[str, ...]:
        self._check(node)
        return tuple(sorted(p for p, c in self.edges if c == node))

    def children(self, node: str) -> tuple[str, ...]:
        self._check(node)
        return tuple(sorted(c for p, c in self.edges if p == node))

    def neighbors(self, node: str) -> tuple[str, ...]:
        return tuple(sorted(set(self.parents(node)) | set(self.children(node))))

    def descendants(self, node: str) -> frozenset[str]:
        """Strict descendants of ``node`` (the node itself is excluded)."""
        seen: set[str] = set()
        stack = list(self.children(node))
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.children(n))
        return frozenset(seen)

    def ancestors(self, node: str) -> frozenset[str]:
        seen: set[str] = set()
        stack = list(self.parents(node))
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.parents(n))
        return frozenset(seen)

    def topological_order(self) -> tuple[str, ...]:
        return _toposort(self.nodes, self.edges)

    def without_incoming(self, node: str) -> "CausalDag":
        """The mutilated graph with every arrow into ``node`` deleted."""
        self._check(node)
        return CausalDag(self.nodes, frozenset(e for e in self.edges if e[1] != node))

    def _check(self, node: str) -> None:
        if node not in self.nodes:
            raise UnknownNode(node)

    def __contains__(self, node: object) -> bool:
        return node in self.nodes

    def to_text(self) -> str:
        lines = [f"node {n}" for n in self.nodes]
        lines += [f"{p} -> {c}" for p, c in sorted(self.edges)]
        return "\n".join(lines) + "\n"


def _toposort(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> tuple[str, ...]:
    nodes = sorted(nodes)
    indeg = {n: 0 for n in nodes}
    out: dict[str, list[str]] = {n: [] for n in nodes}
    for p, c in edges:
        indeg[c] += 1
        out[p].append(c)
    ready = sorted(n for n in nodes if indeg[n] == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c in sorted(out[n]):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) != len(nodes):
        stuck = sorted(n for n in nodes if n not in order)
        raise CycleDetected(f"cycle among {stuck}")
    return tuple(order)


def build_dag(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> CausalDag:
    names = list(nodes)
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise GraphError(f"duplicate node names {dup}")
    declared = set(names)
    seen: set[tuple[str, str]] = set()
    for p, c in edges:
        for n in (p, c):
            if n not in declared:
                raise UnknownNode(n)
        if p == c:
            raise CycleDetected(f"self-loop on {p}")
        if (p, c) in seen:
            raise DuplicateEdge(f"{p} -> {c}")
        seen.add((p, c))
    _toposort(declared, seen)
    return CausalDag(tuple(sorted(declared)), frozenset(seen))


@dataclass(frozen=True)
class Path:
    """A simple path; ``arrows[k]`` is the direction of the edge between
    ``nodes[k]`` and ``nodes[k+1]`` relative to the traversal."""

    nodes: tuple[str, ...]
    arrows: tuple[str, ...]

    def roles(self) -> tuple[str, ...]:
        """Structure of each interior node: chain, fork or collider."""
        out = []
        for k in range(1, len(self.nodes) - 1):
            into_from_left = self.arrows[k - 1] == FORWARD
            into_from_right = self.arrows[k] == BACKWARD
            if into_from_left and into_from_right:
                out.append(COLLIDER)
            elif not into_from_left and not into_from_right:
                out.append(FORK)
            else:
                out.append(CHAIN)
        return tuple(out)

    def interior(self) -> tuple[tuple[str, str], ...]:
        return tuple(zip(self.nodes[1:-1], self.roles()))

    def __str__(self) -> str:
        parts = [self.nodes[0]]
        for arrow, node in zip(self.arrows, self.nodes[1:]):
            parts.append("->" if arrow == FORWARD else "<-")
            parts.append(node)
        return " ".join(parts)


def enumerate_paths(g: CausalDag, x: str, y: str) -> list[Path]:
    """All simple paths between ``x`` and ``y`` ignoring edge direction."""
    for n in (x, y):
        if n not in g:
            raise UnknownNode(n)
    if x == y:
        raise OverlappingQuery("path endpoints must differ")
    adj: dict[str, list[tuple[str, str]]] = {n: [] for n in g.nodes}
    for p, c in g.edges:
        adj[p].append((c, FORWARD))
        adj[c].append((p, BACKWARD))
    for n in adj:
        adj[n].sort()

    found: list[Path] = []

    def dfs(node: str, nodes: list[str], arrows: list[str], visited: set[str]) -> None:
        if node == y:
            found.append(Path(tuple(nodes), tuple(arrows)))
            return
        for nxt, arrow in adj[node]:
            if nxt in visited:
                continue
            visited.add(nxt)
            nodes.append(nxt)
            arrows.append(arrow)
            dfs(nxt, nodes, arrows, visited)
            nodes.pop()
            arrows.pop()
            visited.discard(nxt)

    dfs(x, [x], [], {x})
    found.sort(key=lambda p: (len(p.nodes), p.nodes, p.arrows))
    return found


def blocking_node(g: CausalDag, path: Path, z: Iterable[str]) -> str | None:
    """Return the first node that blocks ``path`` given ``z``, or None if open."""
    z = set(z)
    for node, role in path.interior():
        if role == COLLIDER:
            if node not in z and not (g.descendants(node) & z):
                return node
        elif node in z:
            return node
    return None


def is_blocked(g: CausalDag, path: Path, z: Iterable[str]) -> bool:
    return blocking_node(g, path, z) is not None


@dataclass(frozen=True)
class SeparationQuery:
    x: str
    y: str
    z: frozenset[str] = frozenset()

    def validate(self, g: CausalDag) -> None:
        for n in (self.x, self.y, *self.z):
            if n not in g:
                raise UnknownNode(n)
        if self.x == self.y:
            raise OverlappingQuery("x and y must differ")
        if self.x in self.z or self.y in self.z:
            raise OverlappingQuery("x and y may not be in the conditioning set")


def is_d_separated(g: CausalDag, x: str | SeparationQuery, y: str | None = None,
                   z: Iterable[str] = ()) -> bool:
    q = x if isinstance(x, SeparationQuery) else SeparationQuery(x, y, frozenset(z))
    q.validate(g)
    return all(is_blocked(g, p, q.z) for p in enumerate_paths(g, q.x, q.y))


def open_paths(g: CausalDag, x: str, y: str, z: Iterable[str] = ()) -> list[Path]:
    z = frozenset(z)
    SeparationQuery(x, y, z).validate(g)
    return [p for p in enumerate_paths(g, x, y) if not is_blocked(g, p, z)]


def backdoor_paths(g: CausalDag, treatment: str, outcome: str) -> list[Path]:
    """Paths from treatment to outcome whose first edge points into the treatment."""
    return [p for p in enumerate_paths(g, treatment, outcome) if p.arrows[0] == BACKWARD]


def satisfies_backdoor(g: CausalDag, treatment: str, outcome: str, z: Iterable[str],
                       given: Iterable[str] = ()) -> bool:
    """Backdoor criterion for adjustment set ``z``.

    ``given`` holds variables that are conditioned on regardless of the
    adjustment choice (the learned embedding in the collider model). They
    take part in blocking but are exempt from the non-descendant clause,
    because they are part of the context rather than the adjustment.
    """
    z = frozenset(z)
    given = frozenset(given)
    for n in (treatment, outcome, *z, *given):
        if n not in g:
            raise UnknownNode(n)
    if treatment in z or outcome in z:
        raise OverlappingQuery("adjustment set must exclude treatment and outcome")
    if z & g.descendants(treatment):
        return False
    cond = z | given
    return all(is_blocked(g, p, cond) for p in backdoor_paths(g, treatment, outcome))


def parse_dag(text: str) -> CausalDag:
    """Parse the edge-list text format (``A -> B``, ``node A``, ``#`` comments).

    Lines starting with other keywords (``cpt``, ``domain``, ``context``) are
    ignored so that SCM files can be read as graphs.
    """
    nodes: list[str] = []
    edges: list[tuple[str, str]] = []
    seen_edges: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split()[0]
        if head in ("cpt", "domain", "context"):
            continue
        if head == "node":
            parts = line.split()
            if len(parts) != 2:
                raise GraphParseError(lineno, raw, "expected 'node NAME'")
            if parts[1] not in nodes:
                nodes.append(parts[1])
            continue
        if "->" not in line:
            raise GraphParseError(lineno, raw, "expected 'parent -> child'")
        parts = [s.strip() for s in line.split("->")]
        if len(parts) != 2 or not all(parts) or any(len(s.split()) != 1 for s in parts):
            raise GraphParseError(lineno, raw, "expected 'parent -> child'")
        p, c = parts
        if (p, c) in seen_edges:
            raise GraphParseError(lineno, raw, "duplicate edge")
        seen_edges.add((p, c))
        edges.append((p, c))
        for n in (p, c):
            if n not in nodes:
                nodes.append(n)
    try:
        return build_dag(nodes, edges)
    except CycleDetected as exc:
        raise CycleDetected(f"graph text contains a cycle: {exc}") from exc


def adjustment_sets(g: CausalDag, treatment: str, outcome: str,
                    given: Iterable[str] = (), max_size: int | None = None) -> list[tuple[str, ...]]:
    """Every set satisfying the backdoor criterion, smallest first."""
    given = frozenset(given)
    pool = sorted(set(g.nodes) - {treatment, outcome} - given)
    top = len(pool) if max_size is None else min(max_size, len(pool))
    out = []
    for r in range(top + 1):
        for z in itertools.combinations(pool, r):
            if satisfies_backdoor(g, treatment, outcome, z, given):
                out.append(z)
    return out
