"""Initial edge weights between experiences.

The combined weight is a convex combination of four signals: TF-IDF entity
overlap, role-path structure overlap, a provider-judged synergy score and
task-type agreement. Pairs whose combined weight strictly exceeds
``theta_edge`` are connected in both directions.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .graph import EdgeScoreBreakdown, ExperienceEdge, ExperienceNode, MemoryGraph
from .model import EntityRole, Experience
from .prompts import ReplyParseError, parse_json_reply, render
from .providers import ChatProvider, ChatRequest, ProviderError

log = logging.getLogger(__name__)

RoleLabel = tuple[EntityRole, EntityRole]
MAX_PATH_LEN = 4
DEFAULT_RETRIES = 2


@dataclass(frozen=True)
class SimilarityWeights:
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.25
    delta: float = 0.25

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"similarity weight {name}={v} outside [0,1]")
        total = self.alpha + self.beta + self.gamma + self.delta
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"similarity weights must sum to 1 (got {total})")


# --- entity overlap -------------------------------------------------------


def _idf(n_docs: int, df: Mapping[str, int], surface: str) -> float:
    return math.log((n_docs + 1) / (df.get(surface, 0) + 1)) + 1.0


def tfidf_rows(nodes: Sequence[ExperienceNode], n_docs: int, df: Mapping[str, int]):
    """CSR (indptr, indices, values) of TF-IDF entity vectors, one row per node."""
    vocab = sorted({e.surface for n in nodes for e in n.core_entities})
    col = {s: i for i, s in enumerate(vocab)}
    indptr, indices, values = [0], [], []
    for n in nodes:
        counts = n.entity_counts()
        for s in sorted(counts, key=col.__getitem__):
            indices.append(col[s])
            values.append(counts[s] * _idf(n_docs, df, s))
        indptr.append(len(indices))
    return (
        np.asarray(indptr, dtype=np.int64),
        np.asarray(indices, dtype=np.int64),
        np.asarray(values, dtype=np.float64),
    )


def entity_similarity(
    a: ExperienceNode, b: ExperienceNode, n_docs: int, df: Mapping[str, int]
) -> float:
    """Cosine of TF-IDF entity vectors with idf(u) = ln((N+1)/(df(u)+1)) + 1."""
    m = kernels.sparse_cosine_matrix(*tfidf_rows([a, b], n_docs, df))
    return _unit(m[0, 1] if a is not b else m[0, 0])


def _unit(x: float) -> float:
    # cosine of identical vectors can land one ulp above 1
    return min(1.0, max(0.0, float(x)))


# --- structure ------------------------------------------------------------


def role_paths(node: ExperienceNode, k: int) -> set[tuple[RoleLabel, ...]]:
    """Role-label sequences of all directed walks of exactly k entity edges."""
    if not 1 <= k <= MAX_PATH_LEN:
        raise ValueError(f"path length must be in 1..{MAX_PATH_LEN}")
    adj: dict = {}
    for re_ in dict.fromkeys(node.role_edges):
        adj.setdefault(re_.from_entity, []).append(re_.to_entity)
    out: set[tuple[RoleLabel, ...]] = set()

    def walk(v, labels):
        if len(labels) == k:
            out.add(tuple(labels))
            return
        for w in adj.get(v, ()):
            labels.append((v.role, w.role))
            walk(w, labels)
            labels.pop()

    for start in adj:
        walk(start, [])
    return out


def structure_similarity(a: ExperienceNode, b: ExperienceNode) -> float:
    """Length-weighted Jaccard over role-path sets: sum_k (k/10) * J_k.

    J_k is 0 when both path sets of length k are empty.
    """
    total = 0.0
    denom = sum(range(1, MAX_PATH_LEN + 1))
    for k in range(1, MAX_PATH_LEN + 1):
        pa, pb = role_paths(a, k), role_paths(b, k)
        union = pa | pb
        if union:
            total += (k / denom) * (len(pa & pb) / len(union))
    return total


# --- synergy and task -----------------------------------------------------


def synergy_similarity(
    a: Experience, b: Experience, judge: ChatProvider, retries: int = DEFAULT_RETRIES
) -> float:
    """Provider-judged joint-use value, clamped to [0, 1].

    Transport failures and unparseable replies are retried; if every attempt
    failed to parse the score is 0.0. If every attempt failed in transport the
    last ProviderError propagates.
    """
    req = ChatRequest(
        system=render("similarity_system"),
        user=render(
            "similarity_user",
            condition_a=a.condition,
            content_a=a.content,
            condition_b=b.condition,
            content_b=b.content,
        ),
        temperature=0.0,
    )
    last_transport: ProviderError | None = None
    parse_failed = False
    for attempt in range(retries + 1):
        try:
            reply = judge.chat(req).text
        except ProviderError as exc:
            last_transport = exc
            log.warning("synergy judge call failed for %s/%s (attempt %d): %s", a.id, b.id, attempt + 1, exc)
            continue
        try:
            data = parse_json_reply(reply, dict)
            value = float(data["similarity"])
        except (ReplyParseError, KeyError, TypeError, ValueError):
            parse_failed = True
            log.warning("unparseable synergy reply for %s/%s (attempt %d)", a.id, b.id, attempt + 1)
            continue
        if value != value:  # NaN
            parse_failed = True
            continue
        return min(1.0, max(0.0, value))
    if parse_failed or last_transport is None:
        log.warning("synergy for %s/%s defaulted to 0.0", a.id, b.id)
        return 0.0
    raise last_transport


def task_similarity(a: Experience, b: Experience) -> int:
    return int(a.task_type == b.task_type)


def initial_edge_weight(
    s_entity: float,
    s_structure: float,
    s_synergy: float,
    s_task: float,
    w: SimilarityWeights = SimilarityWeights(),
) -> EdgeScoreBreakdown:
    comps = {"s_entity": s_entity, "s_structure": s_structure, "s_synergy": s_synergy, "s_task": s_task}
    for name, v in comps.items():
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name}={v} outside [0,1]")
    combined = w.alpha * s_entity + w.beta * s_structure + w.gamma * s_synergy + w.delta * s_task
    return EdgeScoreBreakdown(
        s_entity=float(s_entity),
        s_structure=float(s_structure),
        s_synergy=float(s_synergy),
        s_task=float(s_task),
        combined=min(1.0, max(0.0, combined)),
    )


# --- edge construction ----------------------------------------------------


class EdgeBuildAborted(Exception):
    def __init__(self, done: int, total: int, edges_created: int, cause: Exception) -> None:
        super().__init__(
            f"edge construction aborted after {done}/{total} pairs "
            f"({edges_created} edges created): {cause}"
        )
        self.done = done
        self.total = total
        self.edges_created = edges_created
        self.cause = cause


def _connect(g: MemoryGraph, a: str, b: str, bd: EdgeScoreBreakdown, theta: float) -> int:
    if not bd.combined > theta:
        return 0
    g.add_edge(ExperienceEdge(a, b, w_prior=bd.combined, breakdown=bd))
    g.add_edge(ExperienceEdge(b, a, w_prior=bd.combined, breakdown=bd))
    return 2


def score_pairs(
    g: MemoryGraph,
    pairs: Sequence[tuple[str, str]],
    w: SimilarityWeights,
    judge: ChatProvider,
    retries: int = DEFAULT_RETRIES,
    max_workers: int = 1,
) -> list[EdgeScoreBreakdown]:
    """Breakdowns for the given id pairs using the graph's current corpus stats.

    Synergy calls run on up to ``max_workers`` threads; results keep pair order.
    """
    ids = sorted({i for p in pairs for i in p})
    pos = {nid: k for k, nid in enumerate(ids)}
    nodes = [g.nodes[i] for i in ids]
    ent = kernels.sparse_cosine_matrix(*tfidf_rows(nodes, g.doc_count, g.entity_df))

    def synergy(p: tuple[str, str]) -> float:
        return synergy_similarity(g.nodes[p[0]].experience, g.nodes[p[1]].experience, judge, retries)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            syn = list(pool.map(synergy, pairs))
    else:
        syn = [synergy(p) for p in pairs]
    out = []
    for (a, b), s_syn in zip(pairs, syn):
        na, nb = g.nodes[a], g.nodes[b]
        out.append(
            initial_edge_weight(
                _unit(ent[pos[a], pos[b]]),
                structure_similarity(na, nb),
                s_syn,
                task_similarity(na.experience, nb.experience),
                w,
            )
        )
    return out


def build_edges(
    g: MemoryGraph,
    w: SimilarityWeights,
    theta_edge: float,
    judge: ChatProvider,
    retries: int = DEFAULT_RETRIES,
) -> int:
    """Score every unordered node pair and connect those above ``theta_edge``.

    Pairs are processed in sorted id order. Returns the number of directed
    edges created.
    """
    if len(g) < 2:
        raise ValueError("build_edges needs at least two nodes")
    ids = g.sorted_ids()
    pairs = [(ids[i], ids[j]) for i in range(len(ids)) for j in range(i + 1, len(ids))]
    pos = {nid: k for k, nid in enumerate(ids)}
    ent = kernels.sparse_cosine_matrix(*tfidf_rows([g.nodes[i] for i in ids], g.doc_count, g.entity_df))
    created = 0
    for done, (a, b) in enumerate(pairs):
        if (a, b) in g.edges or (b, a) in g.edges:
            continue
        na, nb = g.nodes[a], g.nodes[b]
        try:
            s_syn = synergy_similarity(na.experience, nb.experience, judge, retries)
        except ProviderError as exc:
            raise EdgeBuildAborted(done, len(pairs), created, exc) from exc
        bd = initial_edge_weight(
            _unit(ent[pos[a], pos[b]]),
            structure_similarity(na, nb),
            s_syn,
            task_similarity(na.experience, nb.experience),
            w,
        )
        created += _connect(g, a, b, bd, theta_edge)
    return created


def connect_new_node(
    g: MemoryGraph,
    node_id: str,
    w: SimilarityWeights,
    theta_edge: float,
    judge: ChatProvider,
    retries: int = DEFAULT_RETRIES,
) -> int:
    """Score a freshly added node against every other node and connect it."""
    others = [i for i in g.sorted_ids() if i != node_id]
    if not others:
        return 0
    pairs = [(node_id, o) for o in others]
    created = 0
    for (a, b), bd in zip(pairs, score_pairs(g, pairs, w, judge, retries)):
        created += _connect(g, a, b, bd, theta_edge)
    return created
