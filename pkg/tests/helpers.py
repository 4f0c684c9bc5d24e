"""Small fixtures shared by several test modules."""

from __future__ import annotations

import numpy as np

from routekt.data import Interaction, StudentSequence
from routekt.relevance import KCRoute, build_relevance_matrix


def two_tree_table(questions_per_leaf: int = 2) -> dict[int, list[KCRoute]]:
    """Two roots (0, 3), each with two leaves; questions hang off the leaves."""
    leaves = [(0, 1), (0, 2), (3, 4), (3, 5)]
    table = {}
    for path in leaves:
        for _ in range(questions_per_leaf):
            q = len(table)
            table[q] = [KCRoute(q, path)]
    return table


def random_sequence(rng: np.random.Generator, table, n: int, max_len: int = 200, sid: str = "s") -> StudentSequence:
    qs = rng.choice(sorted(table), size=n)
    its = [Interaction(int(q), table[int(q)][0].leaf, int(rng.integers(0, 2)), 1000 * i) for i, q in enumerate(qs)]
    return StudentSequence(sid, its, max_len)


def relevance_of(seq: StudentSequence, table) -> np.ndarray:
    n = int(seq.valid_mask.sum())
    return build_relevance_matrix(seq.questions[:n], table).entries
