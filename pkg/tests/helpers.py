"""Builders, independent oracles and random generators shared by the tests.

The oracles deliberately avoid the package's own helpers: TF-IDF is rebuilt
from plain dicts, walks are enumerated as edge sequences with itertools, and
forward-candidate ranking is a direct sort over ``g.edges``.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np

from gsem.graph import EdgeScoreBreakdown, ExperienceEdge, ExperienceNode, MemoryGraph
from gsem.model import ALLOWED_ROLE_EDGES, Entity, EntityRole, Experience, Polarity, RoleEdge
from gsem.retrieval import Action, ActionKind, RetrievalConfig, forward_candidates, make_greedy, traverse

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"
ROLES = list(EntityRole)


def make_node(
    node_id: str,
    entities=(),
    edges=(),
    quality: float = 0.5,
    task: str = "diagnosis",
    polarity: Polarity = Polarity.INDICATION,
    embedding=None,
    condition: str | None = None,
) -> ExperienceNode:
    """``entities`` is a list of (surface, role); ``edges`` index into it."""
    ents = [Entity(s, EntityRole(r)) for s, r in entities]
    redges = [RoleEdge(ents[i], ents[j]) for i, j in edges]
    exp = Experience(
        id=node_id,
        condition=condition or f"condition of {node_id}",
        content=f"content of {node_id}",
        polarity=polarity,
        quality=quality,
        task_type=task,
    )
    emb = None if embedding is None else np.asarray(embedding, dtype=np.float64)
    return ExperienceNode(exp, ents, redges, emb)


def link(g: MemoryGraph, a: str, b: str, w: float, phi: float = 0.0, both: bool = True) -> None:
    g.add_edge(ExperienceEdge(a, b, w_prior=w, phi=phi))
    if both:
        g.add_edge(ExperienceEdge(b, a, w_prior=w, phi=phi))


def load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# --- oracles ---------------------------------------------------------------


def oracle_tfidf_cosine(a: ExperienceNode, b: ExperienceNode, n_docs: int, df: dict) -> float:
    def vec(n: ExperienceNode) -> dict:
        tf: dict[str, int] = {}
        for e in n.core_entities:
            tf[e.surface] = tf.get(e.surface, 0) + 1
        return {u: c * (math.log((n_docs + 1) / (df[u] + 1)) + 1) for u, c in tf.items()}

    va, vb = vec(a), vec(b)
    dot = sum(va[u] * vb[u] for u in va if u in vb)
    na = math.sqrt(sum(x * x for x in va.values()))
    nb = math.sqrt(sum(x * x for x in vb.values()))
    if na == 0 or nb == 0:
        return 0.0
    return min(1.0, dot / (na * nb))


def oracle_walks(node: ExperienceNode, k: int) -> set:
    """Label sequences of every chain of k role edges (edge-sequence product)."""
    edges = list(dict.fromkeys(node.role_edges))
    out = set()
    for seq in itertools.product(edges, repeat=k):
        if all(seq[i].to_entity == seq[i + 1].from_entity for i in range(k - 1)):
            out.add(tuple((e.from_entity.role, e.to_entity.role) for e in seq))
    return out


def oracle_structure(a: ExperienceNode, b: ExperienceNode) -> float:
    s = 0.0
    for k in (1, 2, 3, 4):
        pa, pb = oracle_walks(a, k), oracle_walks(b, k)
        if pa or pb:
            s += k / 10 * len(pa & pb) / len(pa | pb)
    return s


def oracle_forward(g: MemoryGraph, pos: str, visited, k: int) -> list[tuple[str, float]]:
    rows = []
    for (src, dst), e in g.edges.items():
        if src == pos and dst not in visited:
            w = min(1.0, max(0.0, e.w_prior + e.phi)) if e.w_recurrent is None else e.w_recurrent
            rows.append((dst, (w + g.nodes[dst].quality) / 2))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows[:k]


# --- random generators -------------------------------------------------------


def random_entity_node(rng: np.random.Generator, node_id: str, vocab: list[str], max_ents: int = 6) -> ExperienceNode:
    n = int(rng.integers(0, max_ents + 1))
    surfaces = [vocab[int(i)] for i in rng.choice(len(vocab), size=n, replace=False)]
    ents = [(s, ROLES[int(rng.integers(5))]) for s in surfaces]
    allowed = [
        (i, j)
        for i in range(n)
        for j in range(n)
        if i != j and (ents[i][1], ents[j][1]) in ALLOWED_ROLE_EDGES
    ]
    m = int(rng.integers(0, len(allowed) + 1)) if allowed else 0
    chosen = [allowed[int(i)] for i in rng.choice(len(allowed), size=m, replace=False)] if m else []
    return make_node(node_id, ents, chosen, task=["diagnosis", "treatment"][int(rng.integers(2))])


def random_graph(
    rng: np.random.Generator,
    n_nodes: int,
    p_edge: float = 0.4,
    with_phi: bool = True,
    with_embedding: bool = False,
    dim: int = 8,
) -> MemoryGraph:
    """Random experience graph with random Q, w_prior and (optionally) phi."""
    vocab = [f"term{i}" for i in range(12)]
    g = MemoryGraph()
    for i in range(n_nodes):
        nid = f"n{i:02d}"
        node = random_entity_node(rng, nid, vocab, max_ents=4)
        node.experience = Experience(
            id=nid,
            condition=f"situation {i}",
            content=f"do step {i}",
            polarity=[Polarity.INDICATION, Polarity.CONTRAINDICATION][int(rng.integers(2))],
            quality=float(rng.random()),
            task_type=node.experience.task_type,
            evidence="" if rng.random() < 0.5 else f"seen in case {i}",
            created_at=int(rng.integers(0, 5)),
        )
        if with_embedding:
            v = rng.standard_normal(dim)
            node.embedding = v / np.linalg.norm(v)
        g.add_node(node)
    ids = g.sorted_ids()
    for a in ids:
        for b in ids:
            if a != b and rng.random() < p_edge:
                w = float(rng.random())
                phi = float(rng.normal(0, 0.3)) if with_phi else 0.0
                bd = EdgeScoreBreakdown(*(float(x) for x in rng.random(4)), combined=w)
                g.add_edge(ExperienceEdge(a, b, w_prior=w, phi=phi, breakdown=bd if rng.random() < 0.7 else None))
    g.episode_counter = int(rng.integers(0, 100))
    return g


# --- traversal audit ---------------------------------------------------------


class Auditor:
    """Wraps a policy and checks every state it is shown."""

    def __init__(self, g, seeds, k_n, inner):
        self.g, self.k_n, self.inner = g, k_n, inner
        self.visited = {s for s, _ in seeds}
        self.presented = 0

    def __call__(self, v):
        assert len(v.forward) <= self.k_n and len(v.backtrack) <= self.k_n
        ids = [c[0] for c in v.forward] + [c[0] for c in v.backtrack]
        assert not set(ids) & self.visited
        assert [(i, s) for i, s, _ in v.forward] == oracle_forward(self.g, v.position, self.visited, self.k_n)
        self.presented += 1
        a = self.inner(v)
        if a.target:
            self.visited.add(a.target)
        return a


def random_policy(rng):
    def choose(v):
        options = [Action.collect(), Action.stop()] + [Action.explore(c[0]) for c in v.forward] \
            + [Action.backtrack(c[0]) for c in v.backtrack]
        return options[int(rng.integers(len(options)))] if rng.random() < 0.9 else Action.stop()

    return choose


def check_traversal(seed: int) -> None:
    """One random graph and traversal; every invariant is asserted."""
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 9)), p_edge=float(rng.uniform(0.1, 0.8)))
    ids = g.sorted_ids()
    n_seeds = int(rng.integers(1, len(ids) + 1))
    seeds = [(ids[int(i)], float(rng.random())) for i in rng.choice(len(ids), n_seeds, replace=False)]
    cfg = RetrievalConfig(k_neighbors=int(rng.integers(1, 4)), t_max=int(rng.integers(1, 25)))
    inner = random_policy(rng) if seed % 2 else make_greedy(float(rng.random()))
    audit = Auditor(g, seeds, cfg.k_neighbors, inner)
    t = traverse(g, seeds, audit, cfg)
    assert t.steps_used <= cfg.t_max
    assert t.steps_used == len(t.steps) == audit.presented
    assert len(set(t.collected)) == len(t.collected)
    assert sorted(t.ranks.values()) == list(range(len(t.collected)))
    positions = {s.position for s in t.steps if s.action.kind is ActionKind.COLLECT}
    assert set(t.collected) <= positions
    for pos in ids:
        assert forward_candidates(g, pos, set(), cfg.k_neighbors) == oracle_forward(g, pos, set(), cfg.k_neighbors)
