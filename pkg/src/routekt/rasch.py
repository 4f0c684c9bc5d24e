"""Rasch-style raw embeddings for questions and question-response pairs.

question:  x = c[concept] + mu[question] * d[concept]
pair:      y = c[concept] + g[response] + mu[question] * f[concept, response]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class RaschParams:
    concept: Tensor      # (num_concepts, D)
    variation: Tensor    # (num_concepts, D)
    difficulty: Tensor   # (num_questions, 1)
    response: Tensor     # (2, D)
    pair_variation: Tensor  # (2 * num_concepts, D), row 2*c + r

    @classmethod
    def init(cls, num_questions: int, num_concepts: int, dim: int, rng: np.random.Generator) -> "RaschParams":
        bound = 1.0 / np.sqrt(dim)

        def u(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        return cls(
            concept=u(num_concepts, dim),
            variation=u(num_concepts, dim),
            difficulty=Tensor(np.zeros((num_questions, 1)), requires_grad=True),
            response=u(2, dim),
            pair_variation=u(2 * num_concepts, dim),
        )

    @property
    def dim(self) -> int:
        return self.concept.shape[1]

    @property
    def num_concepts(self) -> int:
        return self.concept.shape[0]

    @property
    def num_questions(self) -> int:
        return self.difficulty.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "rasch.concept": self.concept,
            "rasch.variation": self.variation,
            "rasch.difficulty": self.difficulty,
            "rasch.response": self.response,
            "rasch.pair_variation": self.pair_variation,
        }


def _ids(ids, limit: int, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        raise IndexError(f"{what} id out of range [0, {limit})")
    return arr


def question_embedding(params: RaschParams, q, c) -> Tensor:
    """Accepts scalar ids or equal-shape id arrays; returns shape ids.shape + (D,)."""
    q = _ids(q, params.num_questions, "question")
    c = _ids(c, params.num_concepts, "concept")
    base = T.embedding_gather(params.concept, c)
    mu = T.embedding_gather(params.difficulty, q)
    return base + mu * T.embedding_gather(params.variation, c)


def pair_embedding(params: RaschParams, q, c, r) -> Tensor:
    q = _ids(q, params.num_questions, "question")
    c = _ids(c, params.num_concepts, "concept")
    r = np.asarray(r, dtype=np.int64)
    if not np.all((r == 0) | (r == 1)):
        raise ValueError("response must be 0 or 1")
    base = T.embedding_gather(params.concept, c) + T.embedding_gather(params.response, r)
    mu = T.embedding_gather(params.difficulty, q)
    return base + mu * T.embedding_gather(params.pair_variation, 2 * c + r)
