"""Concept hierarchies, per-question concept routes and the relevance matrix.

Two interactions are *related* when the root-to-leaf concept routes of their
questions share at least one concept. The relevance matrix marks every related
pair in a sequence and later gates attention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = -1


class HierarchyError(ValueError):
    """Parent links are cyclic or inconsistent."""


@dataclass(frozen=True)
class KCRoute:
    question_id: int
    route: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.route:
            raise ValueError(f"question {self.question_id}: empty concept route")
        if len(set(self.route)) != len(self.route):
            raise ValueError(f"question {self.question_id}: duplicate concept in route {self.route}")

    @property
    def leaf(self) -> int:
        return self.route[-1]


RouteTable = dict[int, list[KCRoute]]


@dataclass
class KCHierarchy:
    parents: dict[int, int | None]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cid, parent in self.parents.items():
            if parent is not None and parent not in self.parents:
                raise HierarchyError(f"concept {cid} has unknown parent {parent}")
        for cid in self.parents:
            self._path_to_root(cid)

    @classmethod
    def from_routes(cls, routes: Iterable[Sequence[int]], names: Mapping[int, str] | None = None) -> "KCHierarchy":
        parents: dict[int, int | None] = {}
        for route in routes:
            prev = None
            for cid in route:
                if cid in parents and parents[cid] != prev:
                    raise HierarchyError(f"concept {cid} has two parents: {parents[cid]} and {prev}")
                parents[cid] = prev
                prev = cid
        return cls(parents, dict(names or {}))

    def roots(self) -> list[int]:
        return sorted(c for c, p in self.parents.items() if p is None)

    def children(self, cid: int) -> list[int]:
        return sorted(c for c, p in self.parents.items() if p == cid)

    def leaves(self) -> list[int]:
        has_child = {p for p in self.parents.values() if p is not None}
        return sorted(c for c in self.parents if c not in has_child)

    @property
    def universal_root(self) -> int | None:
        """A lone root that branches into several subtrees.

        Such a root is shared by every route, so keeping it would relate every
        pair of questions. A lone root with a single child is a plain chain and
        is kept.
        """
        roots = self.roots()
        if len(roots) == 1 and len(self.children(roots[0])) >= 2:
            return roots[0]
        return None

    def _path_to_root(self, cid: int) -> list[int]:
        path = [cid]
        seen = {cid}
        cur = self.parents[cid]
        while cur is not None:
            if cur in seen:
                raise HierarchyError(f"cycle through concept {cur}")
            seen.add(cur)
            path.append(cur)
            cur = self.parents[cur]
        return path[::-1]


def extract_route(hierarchy: KCHierarchy, leaf: int, question_id: int = -1) -> KCRoute:
    if leaf not in hierarchy.parents:
        raise KeyError(f"unknown concept id {leaf}")
    path = hierarchy._path_to_root(leaf)
    top = hierarchy.universal_root
    if top is not None and len(path) > 1 and path[0] == top:
        path = path[1:]
    return KCRoute(question_id, tuple(path))


def routes_related(a: KCRoute | Sequence[int], b: KCRoute | Sequence[int]) -> int:
    ra = a.route if isinstance(a, KCRoute) else a
    rb = b.route if isinstance(b, KCRoute) else b
    return int(not set(ra).isdisjoint(rb))


def strip_universal_root(table: RouteTable) -> RouteTable:
    """Drop a concept that heads every route and branches below."""
    routes = [r.route for rs in table.values() for r in rs]
    if not routes:
        return table
    heads = {r[0] for r in routes}
    if len(heads) != 1:
        return table
    seconds = {r[1] for r in routes if len(r) > 1}
    if len(seconds) < 2 or any(len(r) == 1 for r in routes):
        return table
    log.info("dropping universal root concept %d from all routes", next(iter(heads)))
    return {q: [KCRoute(q, r.route[1:]) for r in rs] for q, rs in table.items()}


@dataclass
class RelevanceMatrix:
    entries: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError(f"relevance matrix must be square, got shape {e.shape}")
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("relevance matrix entries must be 0 or 1")
        self.entries = e.astype(np.int8)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def ones(cls, n: int) -> "RelevanceMatrix":
        return cls(np.ones((n, n), dtype=np.int8))

    def to_text(self) -> str:
        return "\n".join(" ".join(str(int(v)) for v in row) for row in self.entries)


class RouteIndex:
    """Concept sets per question, packed as a boolean incidence table.

    Read-only after construction, so one index can serve concurrent
    ``build_relevance_matrix`` calls.
    """

    def __init__(self, route_table: Mapping[int, Sequence[KCRoute]]):
        concepts = sorted({c for rs in route_table.values() for r in rs for c in r.route})
        col = {c: i for i, c in enumerate(concepts)}
        self.route_table = route_table
        self._row: dict[int, int] = {}
        rows = []
        for q in sorted(route_table):
            vec = np.zeros(len(concepts), dtype=bool)
            for r in route_table[q]:
                vec[[col[c] for c in r.route]] = True
            self._row[q] = len(rows)
            rows.append(vec)
        self._incidence = np.array(rows, dtype=np.float64).reshape(len(rows), len(concepts))
        self._warned: set[int] = set()

    def incidence(self, qids: np.ndarray) -> np.ndarray:
        out = np.zeros((len(qids), self._incidence.shape[1]))
        for i, q in enumerate(qids):
            r = self._row.get(int(q))
            if r is None:
                if q != PAD_ID and q not in self._warned:
                    self._warned.add(int(q))
                    log.warning("question %d has no route entry; it relates only to itself", q)
                continue
            out[i] = self._incidence[r]
        return out


def build_relevance_matrix(sequence: Sequence[int], route_table: Mapping[int, Sequence[KCRoute]] | RouteIndex) -> RelevanceMatrix:
    """F[i, j] = 1 iff any route of question i shares a concept with any route of question j.

    Entries for the same question id are always 1; pad ids (-1) give zero rows
    and columns.
    """
    index = route_table if isinstance(route_table, RouteIndex) else RouteIndex(route_table)
    q = np.asarray(sequence, dtype=np.int64)
    inc = index.incidence(q)
    shared = (inc @ inc.T) > 0
    same = (q[:, None] == q[None, :]) & (q[:, None] != PAD_ID)
    return RelevanceMatrix((shared | same).astype(np.int8))


@dataclass
class RelevanceStats:
    n: int
    density: float
    degree: list[int]
    isolated: int

    def to_text(self) -> str:
        return (f"n={self.n} density={self.density:.6f} isolated={self.isolated}\n"
                f"degree={' '.join(map(str, self.degree))}")


def relevance_stats(F: RelevanceMatrix | np.ndarray) -> RelevanceStats:
    e = F.entries if isinstance(F, RelevanceMatrix) else np.asarray(F)
    n = e.shape[0]
    off = e.astype(np.int64).copy()
    np.fill_diagonal(off, 0)
    degree = off.sum(axis=1)
    density = float(off.sum() / (n * (n - 1))) if n > 1 else 0.0
    return RelevanceStats(n, density, [int(d) for d in degree], int(np.sum(degree == 0)))
