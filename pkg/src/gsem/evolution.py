"""Feedback-driven evolution of node quality and edge weights.

After an episode the collected experiences share credit by rank,
a_i = rho^r_i / sum_j rho^r_j, and each edge between two collected nodes gets
b_ij proportional to a_i * a_j. Quality moves by eta_q * a_i * delta and is
clipped to [0, 1]. Edge feedback accumulates in ``phi`` (unclipped); the
effective weight is clip(w_prior + phi). The prior itself never changes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

from .construction import parse_entities_and_edges
from .graph import DuplicateId, ExperienceNode, MemoryGraph, MissingNode, clip01
from .model import Experience, check_experience
from .providers import ChatProvider, EmbeddingProvider
from .retrieval import RetrievalTrace
from .similarity import SimilarityWeights, connect_new_node


class WeightMode(str, enum.Enum):
    PRIOR_PLUS_PHI = "prior_plus_phi"
    # W <- clip(W + phi) after every event, stored in ``w_recurrent``
    RECURRENT = "recurrent"


@dataclass(frozen=True)
class EvolutionConfig:
    eta_q: float = 0.1
    eta_w: float = 0.05
    rho: float = 0.8
    weight_mode: WeightMode = WeightMode.PRIOR_PLUS_PHI

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))

    def violations(self) -> list[str]:
        out = []
        if not (0.0 < self.rho < 1.0):
            out.append("evolution.rho must be in (0,1)")
        if not self.eta_q > 0:
            out.append("evolution.eta_q must be > 0")
        if not self.eta_w > 0:
            out.append("evolution.eta_w must be > 0")
        return out


@dataclass(frozen=True)
class FeedbackEvent:
    task_id: str
    delta: float
    collected: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (-1.0 <= self.delta <= 1.0):
            raise ValueError(f"delta {self.delta} outside [-1,1]")
        if len(set(self.collected)) != len(self.collected):
            raise ValueError("collected ids must be distinct")
        object.__setattr__(self, "collected", tuple(self.collected))

    @classmethod
    def from_trace(cls, task_id: str, delta: float, trace: RetrievalTrace) -> FeedbackEvent:
        return cls(task_id, delta, tuple(trace.collected))

    @property
    def ranks(self) -> dict[str, int]:
        return {eid: r for r, eid in enumerate(self.collected)}


@dataclass(frozen=True)
class CreditAssignment:
    node_credits: dict[str, float]
    edge_credits: dict[tuple[str, str], float]


def delta_from_outcome(correct: bool) -> float:
    return 1.0 if correct else -1.0


def node_credits(ranks: Mapping[str, int], rho: float) -> dict[str, float]:
    if not ranks:
        raise ValueError("node_credits needs at least one ranked node")
    if sorted(ranks.values()) != list(range(len(ranks))):
        raise ValueError("ranks must be exactly 0..n-1")
    raw = {i: rho**r for i, r in ranks.items()}
    total = math.fsum(raw.values())
    return {i: v / total for i, v in raw.items()}


def induced_edges(g: MemoryGraph, ids) -> list[tuple[str, str]]:
    s = set(ids)
    return sorted(k for k in g.edges if k[0] in s and k[1] in s)


def edge_credits(a: Mapping[str, float], edges) -> dict[tuple[str, str], float]:
    edges = list(edges)
    if not edges:
        return {}
    for src, dst in edges:
        if src not in a or dst not in a:
            raise KeyError(f"edge ({src}, {dst}) has an endpoint without credit")
    prods = {e: a[e[0]] * a[e[1]] for e in edges}
    total = math.fsum(prods.values())
    return {e: p / total for e, p in prods.items()}


def assign_credit(g: MemoryGraph, event: FeedbackEvent, rho: float) -> CreditAssignment:
    if not event.collected:
        return CreditAssignment({}, {})
    a = node_credits(event.ranks, rho)
    return CreditAssignment(a, edge_credits(a, induced_edges(g, event.collected)))


@dataclass
class UpdateReport:
    task_id: str
    delta: float
    node_updates: list[dict] = field(default_factory=list)
    edge_updates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "edge_updates": self.edge_updates,
            "node_updates": self.node_updates,
            "task_id": self.task_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def apply_feedback(g: MemoryGraph, event: FeedbackEvent, cfg: EvolutionConfig = EvolutionConfig()) -> UpdateReport:
    """Update Q on collected nodes and phi on their induced edges.

    All ids are checked before anything is written. The episode counter
    advances even when nothing was collected.
    """
    missing = [i for i in event.collected if i not in g.nodes]
    if missing:
        raise MissingNode(f"feedback for {event.task_id!r} names unknown experiences {missing}")
    credit = assign_credit(g, event, cfg.rho)
    report = UpdateReport(event.task_id, event.delta)
    for nid in sorted(credit.node_credits):
        a = credit.node_credits[nid]
        before = g.nodes[nid].quality
        after = clip01(before + cfg.eta_q * a * event.delta)
        g.set_quality(nid, after)
        report.node_updates.append({"a": a, "id": nid, "q_after": after, "q_before": before})
    for key in sorted(credit.edge_credits):
        b = credit.edge_credits[key]
        edge = g.edges[key]
        before = edge.phi
        edge.phi = before + cfg.eta_w * b * event.delta
        if cfg.weight_mode is WeightMode.RECURRENT:
            w = edge.w_prior if edge.w_recurrent is None else edge.w_recurrent
            edge.w_recurrent = clip01(w + edge.phi)
        report.edge_updates.append({"b": b, "dst": key[1], "phi_after": edge.phi, "phi_before": before, "src": key[0]})
    g.episode_counter += 1
    return report


def insert_experience(
    g: MemoryGraph,
    e: Experience,
    q0: float,
    generation: ChatProvider,
    embed: EmbeddingProvider,
    judge: ChatProvider,
    weights: SimilarityWeights = SimilarityWeights(),
    theta_edge: float = 0.35,
    retries: int = 2,
) -> int:
    """Add an experience with quality q0 and connect it; returns edges created.

    Entities and the embedding are obtained before the graph is touched, so
    a provider failure there leaves the graph unchanged.
    """
    if e.id in g.nodes:
        raise DuplicateId(f"experience id {e.id!r} already present")
    e = check_experience(replace(e, quality=clip01(q0), created_at=g.episode_counter))
    entities, role_edges = parse_entities_and_edges(e, generation, retries)
    vec = embed.embed([e.indexed_text])[0]
    g.add_node(ExperienceNode(e, entities, role_edges, vec))
    return connect_new_node(g, e.id, weights, theta_edge, judge, retries)
