"""Synthetic students with known concept routes and route-dependent mastery.

Each question hangs off one leaf of a concept forest. A student's chance of
answering correctly depends only on how many earlier interactions shared a
concept with the current question's route:

    p = guess + (1 - guess - slip) * (1 - (1 - gain) ** k)

The generator never looks at a model, so it can serve as an oracle for one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Interaction, StudentSequence
from .model import KTModel, make_batch
from .relevance import build_relevance_matrix


@dataclass
class SynthSpec:
    roots: int = 2
    depth: int = 3
    branching: int = 2
    questions_per_leaf: int = 25
    students: int = 500
    min_len: int = 3
    max_len: int = 100
    gain: float = 0.25
    guess: float = 0.2
    slip: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.roots < 1 or self.branching < 1 or self.questions_per_leaf < 1 or self.students < 1:
            raise ValueError("roots, branching, questions_per_leaf and students must be positive")
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.gain < 1.0:
            raise ValueError("gain must lie in [0, 1)")
        if self.guess < 0 or self.slip < 0 or self.guess + self.slip >= 1.0:
            raise ValueError("need guess, slip >= 0 and guess + slip < 1")


def mastery_probability(k, guess: float, slip: float, gain: float):
    return guess + (1.0 - guess - slip) * (1.0 - (1.0 - gain) ** np.asarray(k, dtype=np.float64))


@dataclass
class SynthData:
    spec: SynthSpec
    routes: dict[int, tuple[int, ...]]     # question id -> root-first route
    names: dict[int, str]
    students: list[dict]                   # interaction lines
    mastery: list[dict]                    # per-student k and p traces

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"interactions": out / "interactions.jsonl", "questions": out / "questions.jsonl",
                 "mastery": out / "mastery.jsonl", "spec": out / "synth_spec.json"}
        with open(paths["interactions"], "w") as fh:
            for row in self.students:
                fh.write(json.dumps(row) + "\n")
        with open(paths["questions"], "w") as fh:
            for cid, name in sorted(self.names.items()):
                fh.write(json.dumps({"concept_id": cid, "name": name}) + "\n")
            for qid, route in sorted(self.routes.items()):
                fh.write(json.dumps({"question_id": qid, "routes": [list(route)]}) + "\n")
        with open(paths["mastery"], "w") as fh:
            for row in self.mastery:
                fh.write(json.dumps(row) + "\n")
        paths["spec"].write_text(json.dumps(asdict(self.spec), indent=2) + "\n")
        return paths


def _build_forest(spec: SynthSpec) -> tuple[list[tuple[int, ...]], dict[int, str]]:
    """Root-to-leaf paths of ``roots`` trees with ``depth`` levels, ids in DFS order."""
    names: dict[int, str] = {}
    leaves: list[tuple[int, ...]] = []
    next_id = 0

    def grow(path: tuple[int, ...], label: str, level: int) -> None:
        nonlocal next_id
        cid = next_id
        next_id += 1
        names[cid] = label
        path = path + (cid,)
        if level == spec.depth:
            leaves.append(path)
            return
        for i in range(spec.branching):
            grow(path, f"{label}.{i}", level + 1)

    for r in range(spec.roots):
        grow((), f"R{r}", 1)
    return leaves, names


def generate(spec: SynthSpec) -> SynthData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    leaf_paths, names = _build_forest(spec)
    routes: dict[int, tuple[int, ...]] = {}
    for path in leaf_paths:
        for _ in range(spec.questions_per_leaf):
            routes[len(routes)] = path
    n_q = len(routes)
    concept_sets = [frozenset(routes[q]) for q in range(n_q)]
    related = np.array([[not a.isdisjoint(b) for b in concept_sets] for a in concept_sets])

    students, mastery = [], []
    for s in range(spec.students):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        qs = rng.integers(0, n_q, size=n)
        ks = np.array([int(related[qs[t], qs[:t]].sum()) for t in range(n)], dtype=np.int64)
        ps = mastery_probability(ks, spec.guess, spec.slip, spec.gain)
        rs = (rng.random(n) < ps).astype(int)
        ts = 1_600_000_000_000 + np.cumsum(rng.integers(1_000, 600_000, size=n))
        sid = f"s{s:05d}"
        students.append({
            "student_id": sid,
            "question_ids": [int(q) for q in qs],
            "concept_ids": [int(routes[int(q)][-1]) for q in qs],
            "responses": [int(r) for r in rs],
            "timestamps": [int(t) for t in ts],
        })
        mastery.append({"student_id": sid, "k": ks.tolist(), "p": ps.tolist()})
    return SynthData(spec, routes, names, students, mastery)


# ---------------------------------------------------------------- leakage probe


@dataclass
class LeakageReport:
    probes: int
    max_unrelated_delta: float
    max_related_delta: float
    unrelated_flips: int
    related_flips: int


def leakage_probe(sequences, route_table, model: KTModel, max_probes: int = 50, seed: int = 0) -> LeakageReport:
    """Flip past responses and measure the change in the prediction at a probe step.

    Unrelated flips only touch entries that share no concept with the probe
    question nor with any related entry before it, so a single-block masked
    model must not move. Related flips touch entries that do share a concept.
    """
    rng = np.random.default_rng(seed)
    max_unrel = max_rel = 0.0
    n_unrel = n_rel = probes = 0
    for seq in sequences:
        if probes >= max_probes:
            break
        n = int(seq.valid_mask.sum())
        if n < 3:
            continue
        F = build_relevance_matrix(seq.questions[:n], route_table).entries.astype(bool)
        t = int(rng.integers(2, n))
        related_past = np.flatnonzero(F[t, :t])
        reachable = F[t, :t].copy()
        if related_past.size:
            reachable |= F[related_past][:, :t].any(axis=0)
        unrelated = np.flatnonzero(~reachable)
        variants = [seq]
        flips = []
        if unrelated.size:
            variants.append(_flipped(seq, unrelated))
            flips.append("unrelated")
        if related_past.size:
            variants.append(_flipped(seq, related_past[-1:]))
            flips.append("related")
        if len(variants) == 1:
            continue
        probes += 1
        batch = make_batch(variants, [F.astype(np.int8)] * len(variants))
        probs = model.predict(batch)[:, t]
        for kind, p in zip(flips, probs[1:]):
            delta = abs(float(p - probs[0]))
            if kind == "unrelated":
                max_unrel = max(max_unrel, delta)
                n_unrel += 1
            else:
                max_rel = max(max_rel, delta)
                n_rel += 1
    return LeakageReport(probes, max_unrel, max_rel, n_unrel, n_rel)


def _flipped(seq: StudentSequence, positions) -> StudentSequence:
    its = list(seq.interactions)
    for u in positions:
        it = its[u]
        its[u] = Interaction(it.question_id, it.concept_id, 1 - it.response, it.timestamp)
    return StudentSequence(seq.student_id, its, seq.max_len)
