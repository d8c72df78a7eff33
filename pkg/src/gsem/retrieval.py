"""Retrieval: hybrid seed recall followed by multi-seed graph traversal.

Seeds come from two recalls over the memory: BM25 over the entity index
(sparse) and cosine over experience embeddings (dense), merged by a linear
rerank. From the seeds, one path per seed walks the experience graph in
round-robin order. At every step a policy sees the current experience and
its candidates and picks COLLECT, EXPLORE, BACKTRACK or STOP. Candidates
are ranked by 0.5 * (edge weight + target quality).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .construction import ExtractionError, _ask_json
from .graph import MemoryGraph, effective_weight
from .model import EntityRejected, Experience, normalize_entity, normalize_surface
from .prompts import render
from .providers import ChatProvider, ChatRequest, EmbeddingProvider, ProviderError

log = logging.getLogger(__name__)


class RetrievalError(Exception):
    pass


class IllegalAction(RetrievalError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    k_seed: int = 5
    k_neighbors: int = 5
    t_max: int = 60
    rerank_lambda: float = 0.5
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    collect_threshold: float = 0.5
    retries: int = 2

    def violations(self) -> list[str]:
        out = []
        if self.k_seed < 1:
            out.append("retrieval.k_seed must be >= 1")
        if self.k_neighbors < 1:
            out.append("retrieval.k_neighbors must be >= 1")
        if self.t_max < 1:
            out.append("retrieval.t_max must be >= 1")
        if not (0.0 <= self.rerank_lambda <= 1.0):
            out.append("retrieval.rerank_lambda must be in [0,1]")
        if self.bm25_k1 < 0 or not (0.0 <= self.bm25_b <= 1.0):
            out.append("retrieval.bm25_k1 must be >= 0 and bm25_b in [0,1]")
        return out


@dataclass
class Candidate:
    id: str
    sparse_score: float = 0.0
    dense_score: float = 0.0
    rerank_score: float = 0.0
    in_sparse: bool = False
    in_dense: bool = False

    def to_dict(self) -> dict:
        return {
            "dense_score": self.dense_score if self.in_dense else None,
            "id": self.id,
            "rerank_score": self.rerank_score,
            "sparse_score": self.sparse_score if self.in_sparse else None,
        }


def _top(scored: dict[str, float], k: int) -> list[tuple[str, float]]:
    return sorted(scored.items(), key=lambda p: (-p[1], p[0]))[:k]


# --- sparse recall ------------------------------------------------------------


_TOKEN = re.compile(r"\S+")


def _words(text: str) -> list[str]:
    return [w for w in (normalize_surface(t) for t in _TOKEN.findall(text.lower())) if w]


def match_entities_by_tokens(g: MemoryGraph, query: str) -> list[str]:
    """Degraded query-entity extraction: entity surfaces occurring in the query."""
    q = _words(query)
    found = []
    for surface in sorted(g.entity_index):
        sw = surface.split()
        n = len(sw)
        if any(q[i : i + n] == sw for i in range(len(q) - n + 1)):
            found.append(surface)
    return found


def extract_query_entities(
    g: MemoryGraph, query: str, provider: ChatProvider | None, retries: int = 2
) -> list[str]:
    """Entity surfaces for the query via the entity-extraction prompt.

    Without a provider, or if it fails, falls back to token matching against
    the entity index.
    """
    if provider is not None:
        try:
            items = _ask_json(
                provider,
                ChatRequest(
                    system=render("entity_system"),
                    user=render("entity_user", condition=query, content=query),
                ),
                dict,
                retries,
                lambda d: d["core_entities"] if isinstance(d["core_entities"], list) else [],
            )
            out = []
            for it in items:
                try:
                    out.append(normalize_entity(str(it["entity"]), it["role"]).surface)
                except (EntityRejected, KeyError, TypeError, ValueError):
                    continue
            return out
        except (ProviderError, ExtractionError) as exc:
            log.warning("query entity extraction failed (%s); using token match", exc)
    else:
        log.debug("no chat provider for query entities; using token match")
    return match_entities_by_tokens(g, query)


def bm25_entity_scores(
    g: MemoryGraph, query_terms: Sequence[str], k1: float = 1.2, b: float = 0.75
) -> dict[str, float]:
    """BM25 of each entity node (its surface words as the document).

    idf(t) = ln((N - n_t + 0.5) / (n_t + 0.5) + 1), which stays positive even
    for terms present in most documents.
    """
    surfaces = sorted(g.entity_index)
    if not surfaces or not query_terms:
        return {}
    docs = [Counter(s.split()) for s in surfaces]
    vocab = sorted({t for d in docs for t in d})
    col = {t: i for i, t in enumerate(vocab)}
    n_docs = len(docs)
    dfreq = Counter(t for d in docs for t in d)
    idf = [math.log((n_docs - dfreq[t] + 0.5) / (dfreq[t] + 0.5) + 1.0) for t in vocab]
    indptr, indices, tfs, lens = [0], [], [], []
    for d in docs:
        for t in sorted(d, key=col.__getitem__):
            indices.append(col[t])
            tfs.append(float(d[t]))
        indptr.append(len(indices))
        lens.append(float(sum(d.values())))
    avgdl = math.fsum(lens) / n_docs
    q = [col[t] for t in query_terms if t in col]
    if not q:
        return {}
    scores = kernels.bm25_scores(indptr, indices, tfs, lens, avgdl, idf, q, k1, b)
    return {s: float(v) for s, v in zip(surfaces, scores) if v > 0.0}


def entity_recall(
    g: MemoryGraph,
    query: str,
    provider: ChatProvider | None,
    k: int,
    cfg: RetrievalConfig = RetrievalConfig(),
) -> list[Candidate]:
    ents = extract_query_entities(g, query, provider, cfg.retries)
    terms = [w for s in ents for w in s.split()]
    ent_scores = bm25_entity_scores(g, terms, cfg.bm25_k1, cfg.bm25_b)
    per_exp: dict[str, float] = {}
    for surface in sorted(ent_scores):
        for eid in sorted(g.entity_index[surface].linked_experiences):
            per_exp[eid] = per_exp.get(eid, 0.0) + ent_scores[surface]
    return [Candidate(eid, sparse_score=s, in_sparse=True) for eid, s in _top(per_exp, k)]


# --- dense recall -------------------------------------------------------------


def embedding_recall(g: MemoryGraph, query: str, embed: EmbeddingProvider, k: int) -> list[Candidate]:
    ids = g.sorted_ids()
    if not ids:
        return []
    rows = []
    for i in ids:
        v = g.nodes[i].embedding
        if v is None:
            raise RetrievalError(f"experience {i!r} has no embedding")
        rows.append(v)
    qv = embed.embed([query])[0]
    sims = kernels.dense_cosine(np.vstack(rows), qv)
    scored = {i: float(s) for i, s in zip(ids, sims)}
    return [Candidate(i, dense_score=s, in_dense=True) for i, s in _top(scored, k)]


# --- rerank ------------------------------------------------------------------


def _minmax(values: dict[str, float]) -> dict[str, float]:
    if not values:
        return {}
    lo, hi = min(values.values()), max(values.values())
    if hi == lo:
        return {k: 1.0 for k in values}
    return {k: (v - lo) / (hi - lo) for k, v in values.items()}


def rerank(
    sparse: Sequence[Candidate], dense: Sequence[Candidate], lam: float, k_seed: int
) -> list[Candidate]:
    """Union both recalls and score lam * dense + (1 - lam) * sparse after min-max.

    A candidate missing from one recall gets 0 for that normalised component.
    """
    merged: dict[str, Candidate] = {}
    for c in sparse:
        merged[c.id] = Candidate(c.id, sparse_score=c.sparse_score, in_sparse=True)
    for c in dense:
        m = merged.setdefault(c.id, Candidate(c.id))
        m.dense_score = c.dense_score
        m.in_dense = True
    ns = _minmax({i: c.sparse_score for i, c in merged.items() if c.in_sparse})
    nd = _minmax({i: c.dense_score for i, c in merged.items() if c.in_dense})
    for i, c in merged.items():
        c.rerank_score = lam * nd.get(i, 0.0) + (1.0 - lam) * ns.get(i, 0.0)
    ranked = sorted(merged.values(), key=lambda c: (-c.rerank_score, c.id))
    return ranked[:k_seed]


# --- traversal ------------------------------------------------------------------


def candidate_score(g: MemoryGraph, src: str, dst: str) -> float:
    return 0.5 * (effective_weight(g.edges[(src, dst)]) + g.nodes[dst].quality)


def forward_candidates(
    g: MemoryGraph, position: str, visited: set[str] | frozenset[str], k_n: int
) -> list[tuple[str, float]]:
    """Top-k_n unvisited out-neighbours by 0.5 * (W + Q), ties by id."""
    scored = {
        dst: 0.5 * (effective_weight(e) + g.nodes[dst].quality)
        for dst, e in g.out_edges(position).items()
        if dst not in visited
    }
    return _top(scored, k_n)


class ActionKind(str, enum.Enum):
    COLLECT = "COLLECT"
    EXPLORE = "EXPLORE"
    BACKTRACK = "BACKTRACK"
    STOP = "STOP"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    target: str | None = None

    @classmethod
    def collect(cls) -> Action:
        return cls(ActionKind.COLLECT)

    @classmethod
    def explore(cls, target: str) -> Action:
        return cls(ActionKind.EXPLORE, target)

    @classmethod
    def backtrack(cls, target: str) -> Action:
        return cls(ActionKind.BACKTRACK, target)

    @classmethod
    def stop(cls) -> Action:
        return cls(ActionKind.STOP)

    def __str__(self) -> str:
        return self.kind.value if self.target is None else f"{self.kind.value} {self.target}"


@dataclass(frozen=True)
class StateView:
    """What a policy sees at one step."""

    query: str
    step: int
    path_index: int
    position: str
    condition: str
    entry_score: float
    collected: bool
    forward: tuple[tuple[str, float, str], ...]  # (id, score, condition)
    backtrack: tuple[tuple[str, float, str], ...]

    def is_legal(self, a: Action) -> bool:
        if a.kind is ActionKind.EXPLORE:
            return a.target in {c[0] for c in self.forward}
        if a.kind is ActionKind.BACKTRACK:
            return a.target in {c[0] for c in self.backtrack}
        return a.target is None


Policy = Callable[[StateView], Action]


def greedy_policy(view: StateView, collect_threshold: float = 0.5) -> Action:
    if not view.collected and view.entry_score >= collect_threshold:
        return Action.collect()
    if view.forward:
        return Action.explore(view.forward[0][0])
    if view.backtrack:
        return Action.backtrack(view.backtrack[0][0])
    return Action.stop()


def make_greedy(collect_threshold: float = 0.5) -> Policy:
    def policy(view: StateView) -> Action:
        return greedy_policy(view, collect_threshold)

    return policy


_ACTION = re.compile(r"\b(COLLECT|STOP|EXPLORE|BACKTRACK)\b(?:[\s:]+([A-Za-z0-9_.:\-]+))?", re.IGNORECASE)


def parse_action(text: str) -> Action | None:
    m = _ACTION.search(text)
    if not m:
        return None
    kind = ActionKind(m.group(1).upper())
    if kind in (ActionKind.COLLECT, ActionKind.STOP):
        return Action(kind)
    if not m.group(2):
        return None
    return Action(kind, m.group(2).strip(".,;:"))


class LLMPolicy:
    """Provider-chosen actions; an unusable reply after one retry falls back to greedy."""

    def __init__(self, provider: ChatProvider, collect_threshold: float = 0.5) -> None:
        self.provider = provider
        self.collect_threshold = collect_threshold
        self.fallbacks = 0

    def request(self, view: StateView) -> ChatRequest:
        def block(items) -> str:
            return "\n".join(f"- {cid}: {cond}" for cid, _, cond in items) or "(none)"

        return ChatRequest(
            system=render("policy_system"),
            user=render(
                "policy_user",
                query=view.query,
                current_id=view.position,
                current_condition=view.condition,
                collected_flag="yes" if view.collected else "no",
                forward_block=block(view.forward),
                backtrack_block=block(view.backtrack),
            ),
        )

    def __call__(self, view: StateView) -> Action:
        req = self.request(view)
        for attempt in range(2):
            try:
                reply = self.provider.chat(req).text
            except ProviderError as exc:
                log.warning("policy call failed at step %d: %s", view.step, exc)
                continue
            action = parse_action(reply)
            if action is not None and view.is_legal(action):
                return action
            log.warning("unusable policy reply at step %d (attempt %d): %r", view.step, attempt + 1, reply[:120])
        self.fallbacks += 1
        log.warning("policy fell back to greedy at step %d", view.step)
        return greedy_policy(view, self.collect_threshold)


@dataclass
class TraceStep:
    step: int
    path: int
    position: str
    forward: list[tuple[str, float]]
    backtrack: list[tuple[str, float]]
    action: Action

    def to_dict(self) -> dict:
        return {
            "action": {"kind": self.action.kind.value, "target": self.action.target},
            "backtrack": [[i, s] for i, s in self.backtrack],
            "forward": [[i, s] for i, s in self.forward],
            "path": self.path,
            "position": self.position,
            "step": self.step,
        }


@dataclass
class RetrievalTrace:
    query: str
    seeds: list[Candidate] = field(default_factory=list)
    steps: list[TraceStep] = field(default_factory=list)
    collected: list[str] = field(default_factory=list)
    steps_used: int = 0

    @property
    def ranks(self) -> dict[str, int]:
        return {eid: r for r, eid in enumerate(self.collected)}

    def to_dict(self) -> dict:
        return {
            "collected": [{"id": eid, "rank": r} for r, eid in enumerate(self.collected)],
            "query": self.query,
            "seeds": [c.to_dict() for c in self.seeds],
            "steps": [s.to_dict() for s in self.steps],
            "steps_used": self.steps_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


@dataclass
class _Path:
    ancestors: list[str]  # positions from seed to current, inclusive
    entry_score: float
    active: bool = True

    @property
    def position(self) -> str:
        return self.ancestors[-1]


def backtrack_candidates(
    g: MemoryGraph, ancestors: Sequence[str], visited: set[str], k_n: int
) -> list[tuple[str, float, int]]:
    """Best unvisited neighbours of earlier path nodes: (id, score, ancestor index)."""
    best: dict[str, tuple[float, int]] = {}
    for depth, anc in enumerate(ancestors[:-1]):
        for cid, score in forward_candidates(g, anc, visited, k_n):
            # prefer higher score, then the deeper ancestor
            if cid not in best or (score, depth) > best[cid]:
                best[cid] = (score, depth)
    ranked = sorted(best.items(), key=lambda p: (-p[1][0], p[0]))[:k_n]
    return [(cid, s, d) for cid, (s, d) in ranked]


def traverse(
    g: MemoryGraph,
    seeds: Sequence[Candidate] | Sequence[tuple[str, float]],
    policy: Policy,
    cfg: RetrievalConfig = RetrievalConfig(),
    query: str = "",
) -> RetrievalTrace:
    """Round-robin multi-seed walk under a global step budget of ``t_max``.

    Every policy decision, STOP included, consumes one step. A path ends on
    STOP; COLLECT and STOP are always legal so the policy decides when.
    """
    if not seeds:
        raise ValueError("traverse needs at least one seed")
    seed_cands = [s if isinstance(s, Candidate) else Candidate(s[0], rerank_score=s[1]) for s in seeds]
    for c in seed_cands:
        g.node(c.id)
    trace = RetrievalTrace(query, seeds=seed_cands)
    visited: set[str] = set()
    paths: list[_Path] = []
    for c in seed_cands:
        if c.id in visited:
            continue
        visited.add(c.id)
        paths.append(_Path([c.id], c.rerank_score))
    collected_set: set[str] = set()

    def conds(items):
        return tuple((i, s, g.nodes[i].experience.condition) for i, s, *_ in items)

    while trace.steps_used < cfg.t_max and any(p.active for p in paths):
        for pi, p in enumerate(paths):
            if not p.active:
                continue
            if trace.steps_used >= cfg.t_max:
                break
            fwd = forward_candidates(g, p.position, visited, cfg.k_neighbors)
            back = backtrack_candidates(g, p.ancestors, visited, cfg.k_neighbors)
            is_collected = p.position in collected_set
            view = StateView(
                query=query,
                step=trace.steps_used,
                path_index=pi,
                position=p.position,
                condition=g.nodes[p.position].experience.condition,
                entry_score=p.entry_score,
                collected=is_collected,
                forward=conds(fwd),
                backtrack=conds(back),
            )
            action = policy(view)
            if not view.is_legal(action):
                raise IllegalAction(f"step {trace.steps_used}: illegal action {action} at {p.position}")
            trace.steps.append(
                TraceStep(trace.steps_used, pi, p.position, list(fwd), [(i, s) for i, s, _ in back], action)
            )
            trace.steps_used += 1
            if action.kind is ActionKind.COLLECT:
                if not is_collected:
                    collected_set.add(p.position)
                    trace.collected.append(p.position)
            elif action.kind is ActionKind.EXPLORE:
                score = dict(fwd)[action.target]
                visited.add(action.target)
                p.ancestors.append(action.target)
                p.entry_score = score
            elif action.kind is ActionKind.BACKTRACK:
                _, score, depth = next(b for b in back if b[0] == action.target)
                visited.add(action.target)
                p.ancestors = p.ancestors[: depth + 1] + [action.target]
                p.entry_score = score
            else:
                p.active = False
    return trace


# --- end to end -------------------------------------------------------------------


def seed_recall(
    g: MemoryGraph,
    query: str,
    chat: ChatProvider | None,
    embed: EmbeddingProvider,
    cfg: RetrievalConfig = RetrievalConfig(),
) -> list[Candidate]:
    sparse = entity_recall(g, query, chat, cfg.k_seed, cfg)
    dense = embedding_recall(g, query, embed, cfg.k_seed)
    return rerank(sparse, dense, cfg.rerank_lambda, cfg.k_seed)


def retrieve(
    g: MemoryGraph,
    query: str,
    chat: ChatProvider | None,
    embed: EmbeddingProvider,
    cfg: RetrievalConfig = RetrievalConfig(),
    policy: Policy | None = None,
) -> tuple[list[Experience], RetrievalTrace]:
    """Seeds by hybrid recall, then traversal; returns experiences in collection order."""
    if len(g) == 0:
        raise RetrievalError("empty memory")
    seeds = seed_recall(g, query, chat, embed, cfg)
    if not seeds:
        return [], RetrievalTrace(query)
    trace = traverse(g, seeds, policy or make_greedy(cfg.collect_threshold), cfg, query)
    return [g.nodes[i].experience for i in trace.collected], trace
