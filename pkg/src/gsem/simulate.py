"""Synthetic environment for watching quality recalibrate under feedback.

A graph of planted experiences is generated from a seeded PCG64 stream.
Each experience has a hidden utility. Every episode draws a random query,
runs the real retrieval pipeline (greedy policy), and samples correctness
with probability p_correct_base + utility_gain * (mean utility of the
retrieved set - 0.5), clamped to [0, 1]. Feedback is +1/-1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import numpy as np

from .construction import erv_quality
from .evolution import EvolutionConfig, FeedbackEvent, apply_feedback, delta_from_outcome
from .graph import ExperienceNode, MemoryGraph
from .model import Entity, EntityRole, Experience, Polarity, RoleEdge
from .providers import TableEmbedder
from .retrieval import RetrievalConfig, make_greedy, retrieve
from .similarity import (
    SimilarityWeights,
    _connect,
    entity_similarity,
    initial_edge_weight,
    structure_similarity,
    task_similarity,
)

CSV_HEADER = ("episode", "mean_q_good", "mean_q_bad", "spearman")


@dataclass(frozen=True)
class SyntheticScenario:
    n_good: int = 10
    n_bad: int = 10
    good_utility: float = 0.9
    bad_utility: float = 0.1
    p_correct_base: float = 0.3
    utility_gain: float = 1.0
    n_episodes: int = 200
    rng_seed: int = 42
    vocab_size: int = 80
    entities_per_node: int = 3
    query_entities: int = 2
    embedding_dim: int = 16
    n_erv: int = 5
    initial_quality: str = "uniform"  # or "erv": noisy validation draw at p_correct_base
    task_types: tuple[str, ...] = tuple(f"task{i}" for i in range(8))

    def violations(self) -> list[str]:
        out = []
        for name in ("good_utility", "bad_utility", "p_correct_base"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                out.append(f"{name} must be in [0,1]")
        if self.n_good < 0 or self.n_bad < 0 or self.n_good + self.n_bad < 2:
            out.append("n_good and n_bad must be >= 0 with at least 2 experiences in total")
        if self.n_episodes < 0:
            out.append("n_episodes must be >= 0")
        if self.entities_per_node < 3 or self.entities_per_node > self.vocab_size:
            out.append("entities_per_node must be in 3..vocab_size")
        if not (1 <= self.query_entities <= self.vocab_size):
            out.append("query_entities must be in 1..vocab_size")
        if self.initial_quality not in ("uniform", "erv"):
            out.append("initial_quality must be 'uniform' or 'erv'")
        if self.embedding_dim < 2 or self.n_erv < 1 or not self.task_types:
            out.append("embedding_dim >= 2, n_erv >= 1 and a non-empty task_types are required")
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SyntheticScenario:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
        d = dict(d)
        if "task_types" in d:
            d["task_types"] = tuple(d["task_types"])
        return cls(**d)


def rankdata(values: Sequence[float]) -> list[float]:
    """1-based ranks, ties get the average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; nan if either side is constant."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two sequences of equal length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    mx, my = math.fsum(rx) / len(rx), math.fsum(ry) / len(ry)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = math.fsum((a - mx) ** 2 for a in rx)
    syy = math.fsum((b - my) ** 2 for b in ry)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return sxy / math.sqrt(sxx * syy)


@dataclass
class SimulationResult:
    graph: MemoryGraph
    utility: dict[str, float]
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    initial_quality: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for ep, qg, qb, rho in self.rows:
            w.writerow([ep, _fmt(qg), _fmt(qb), _fmt(rho)])
        return buf.getvalue()

    @property
    def final(self) -> tuple[int, float, float, float]:
        return self.rows[-1]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.9f}"


def _mean(xs: list[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else math.nan


def _vocab(n: int) -> list[str]:
    return [f"factor{i:02d}" for i in range(n)]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / float(np.linalg.norm(v))


def build_synthetic_graph(
    sc: SyntheticScenario, rng: np.random.Generator, weights: SimilarityWeights, theta_edge: float
) -> tuple[MemoryGraph, dict[str, float]]:
    """Planted experiences with random entities, embeddings, task types and synergy."""
    n = sc.n_good + sc.n_bad
    ids = [f"exp_{i:04d}" for i in range(n)]
    is_good = np.zeros(n, dtype=bool)
    is_good[rng.permutation(n)[: sc.n_good]] = True
    vocab = _vocab(sc.vocab_size)
    g = MemoryGraph()
    utility: dict[str, float] = {}
    for i, eid in enumerate(ids):
        words = [vocab[int(k)] for k in rng.choice(sc.vocab_size, sc.entities_per_node, replace=False)]
        # first entity is the condition, second the action, the rest outcomes
        roles = [EntityRole.CONDITION, EntityRole.ACTION] + [EntityRole.OUTCOME] * (len(words) - 2)
        ents = [Entity(w, r) for w, r in zip(words, roles)]
        redges = [RoleEdge(ents[0], ents[1])] + [RoleEdge(ents[1], e) for e in ents[2:]]
        if sc.initial_quality == "erv":
            successes = int(rng.binomial(sc.n_erv, sc.p_correct_base))
        else:
            successes = math.ceil(sc.n_erv / 2)
        exp = Experience(
            id=eid,
            condition=f"when {words[0]} is present",
            content=f"apply {words[1]} expecting {' and '.join(words[2:])}",
            polarity=Polarity.INDICATION,
            quality=erv_quality(successes, sc.n_erv).q0,
            task_type=sc.task_types[int(rng.integers(len(sc.task_types)))],
        )
        g.add_node(ExperienceNode(exp, ents, redges, _unit(rng, sc.embedding_dim)))
        utility[eid] = sc.good_utility if is_good[i] else sc.bad_utility
    for a_i in range(n):
        for b_i in range(a_i + 1, n):
            a, b = g.nodes[ids[a_i]], g.nodes[ids[b_i]]
            bd = initial_edge_weight(
                entity_similarity(a, b, g.doc_count, g.entity_df),
                structure_similarity(a, b),
                float(rng.random()),
                task_similarity(a.experience, b.experience),
                weights,
            )
            _connect(g, a.id, b.id, bd, theta_edge)
    return g, utility


def _snapshot_row(ep: int, g: MemoryGraph, utility: dict[str, float], good: float) -> tuple:
    ids = sorted(utility)
    qs = [g.nodes[i].quality for i in ids]
    us = [utility[i] for i in ids]
    qg = _mean([q for q, u in zip(qs, us) if u == good])
    qb = _mean([q for q, u in zip(qs, us) if u != good])
    return (ep, qg, qb, spearman(qs, us))


def run_simulation(
    sc: SyntheticScenario,
    retrieval_cfg: RetrievalConfig = RetrievalConfig(),
    evolution_cfg: EvolutionConfig = EvolutionConfig(),
    weights: SimilarityWeights = SimilarityWeights(),
    theta_edge: float = 0.35,
) -> SimulationResult:
    problems = sc.violations()
    if problems:
        raise ValueError("; ".join(problems))
    rng = np.random.default_rng(sc.rng_seed)
    g, utility = build_synthetic_graph(sc, rng, weights, theta_edge)
    res = SimulationResult(g, utility, initial_quality={i: g.nodes[i].quality for i in sorted(g.nodes)})
    res.rows.append(_snapshot_row(0, g, utility, sc.good_utility))
    vocab = _vocab(sc.vocab_size)
    policy = make_greedy(retrieval_cfg.collect_threshold)
    for ep in range(1, sc.n_episodes + 1):
        words = [vocab[int(k)] for k in rng.choice(sc.vocab_size, sc.query_entities, replace=False)]
        query = " ".join(words)
        embed = TableEmbedder({query: _unit(rng, sc.embedding_dim)})
        _, trace = retrieve(g, query, None, embed, retrieval_cfg, policy)
        u = _mean([utility[i] for i in sorted(trace.collected)])
        p = sc.p_correct_base if math.isnan(u) else sc.p_correct_base + sc.utility_gain * (u - 0.5)
        p = min(1.0, max(0.0, p))
        correct = bool(rng.random() < p)
        event = FeedbackEvent.from_trace(f"sim_{ep:05d}", delta_from_outcome(correct), trace)
        apply_feedback(g, event, evolution_cfg)
        res.rows.append(_snapshot_row(ep, g, utility, sc.good_utility))
    return res
