"""Dual-layer memory graph and its JSON snapshot format.

The entity layer is the per-experience entity/role-edge structure plus an
index from entity surface to the experiences mentioning it. The experience
layer is a directed weighted graph over experiences.

Snapshot reals are written with Python's shortest round-trip ``repr`` so
that ``load_snapshot(save_snapshot(g)) == g`` holds bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

import numpy as np

from .model import Entity, EntityRole, Experience, Polarity, RoleEdge, check_experience

SCHEMA_VERSION = 1


class GraphError(Exception):
    pass


class DuplicateId(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class MissingNode(GraphError, KeyError):
    def __str__(self) -> str:
        return GraphError.__str__(self)


class SnapshotError(GraphError):
    pass


def clip01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


@dataclass(frozen=True)
class EdgeScoreBreakdown:
    s_entity: float
    s_structure: float
    s_synergy: float
    s_task: float
    combined: float

    def to_dict(self) -> dict[str, float]:
        return {
            "combined": self.combined,
            "s_entity": self.s_entity,
            "s_structure": self.s_structure,
            "s_synergy": self.s_synergy,
            "s_task": self.s_task,
        }


@dataclass
class ExperienceNode:
    experience: Experience
    core_entities: list[Entity] = field(default_factory=list)
    role_edges: list[RoleEdge] = field(default_factory=list)
    embedding: np.ndarray | None = None

    @property
    def id(self) -> str:
        return self.experience.id

    @property
    def quality(self) -> float:
        return self.experience.quality

    def entity_counts(self) -> Counter[str]:
        return Counter(e.surface for e in self.core_entities)

    def check(self) -> None:
        check_experience(self.experience)
        known = set(self.core_entities)
        for re_ in self.role_edges:
            if re_.from_entity not in known or re_.to_entity not in known:
                raise GraphError(f"node {self.id}: role edge endpoint not among core entities")
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if abs(norm - 1.0) > 1e-6:
                raise GraphError(f"node {self.id}: embedding norm {norm} is not 1")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExperienceNode):
            return NotImplemented
        if (self.embedding is None) != (other.embedding is None):
            return False
        if self.embedding is not None and not np.array_equal(self.embedding, other.embedding):
            return False
        return (
            self.experience == other.experience
            and self.core_entities == other.core_entities
            and self.role_edges == other.role_edges
        )


@dataclass
class ExperienceEdge:
    """Directed inter-experience relation.

    ``w_prior`` is the construction-time weight and is never changed by
    feedback; ``phi`` accumulates feedback without clipping. ``w_recurrent``
    is only set when feedback runs in literal-recurrence mode and then
    replaces the prior-plus-accumulator weight.
    """

    src: str
    dst: str
    w_prior: float
    phi: float = 0.0
    breakdown: EdgeScoreBreakdown | None = None
    w_recurrent: float | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.src, self.dst)


def effective_weight(edge: ExperienceEdge) -> float:
    if edge.w_recurrent is not None:
        return edge.w_recurrent
    return clip01(edge.w_prior + edge.phi)


@dataclass
class EntityNode:
    surface: str
    roles: set[EntityRole] = field(default_factory=set)
    linked_experiences: set[str] = field(default_factory=set)


class MemoryGraph:
    """Single-writer store for experiences, their relations and corpus stats."""

    def __init__(self) -> None:
        self.nodes: dict[str, ExperienceNode] = {}
        self.edges: dict[tuple[str, str], ExperienceEdge] = {}
        self.entity_index: dict[str, EntityNode] = {}
        self.entity_df: Counter[str] = Counter()
        self.episode_counter = 0
        self._out: dict[str, dict[str, ExperienceEdge]] = {}

    @property
    def doc_count(self) -> int:
        return len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def node(self, node_id: str) -> ExperienceNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise MissingNode(f"unknown experience id {node_id!r}") from None

    def add_node(self, node: ExperienceNode) -> None:
        if node.id in self.nodes:
            raise DuplicateId(f"experience id {node.id!r} already present")
        node.check()
        self.nodes[node.id] = node
        self._out[node.id] = {}
        for surface in sorted(set(e.surface for e in node.core_entities)):
            self.entity_df[surface] += 1
        for ent in node.core_entities:
            en = self.entity_index.setdefault(ent.surface, EntityNode(ent.surface))
            en.roles.add(ent.role)
            en.linked_experiences.add(node.id)

    def add_edge(self, edge: ExperienceEdge) -> None:
        for end in (edge.src, edge.dst):
            if end not in self.nodes:
                raise MissingNode(f"edge endpoint {end!r} not in graph")
        if edge.src == edge.dst:
            raise GraphError(f"self-loop on {edge.src!r}")
        if edge.key in self.edges:
            raise DuplicateEdge(f"edge {edge.src!r}->{edge.dst!r} already present")
        if not (0.0 <= edge.w_prior <= 1.0):
            raise GraphError(f"edge {edge.src!r}->{edge.dst!r}: w_prior out of [0,1]")
        self.edges[edge.key] = edge
        self._out[edge.src][edge.dst] = edge

    def out_edges(self, node_id: str) -> dict[str, ExperienceEdge]:
        if node_id not in self.nodes:
            raise MissingNode(f"unknown experience id {node_id!r}")
        return self._out[node_id]

    def neighbors(self, node_id: str) -> list[tuple[str, float]]:
        """Out-neighbours with effective weights, heaviest first, ties by id."""
        pairs = [(dst, effective_weight(e)) for dst, e in self.out_edges(node_id).items()]
        pairs.sort(key=lambda p: (-p[1], p[0]))
        return pairs

    def set_quality(self, node_id: str, q: float) -> None:
        node = self.node(node_id)
        node.experience = replace(node.experience, quality=q)

    def idf(self, surface: str) -> float:
        return math.log((self.doc_count + 1) / (self.entity_df.get(surface, 0) + 1)) + 1.0

    def sorted_ids(self) -> list[str]:
        return sorted(self.nodes)

    def copy(self) -> MemoryGraph:
        return load_snapshot(save_snapshot(self))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryGraph):
            return NotImplemented
        return (
            self.episode_counter == other.episode_counter
            and self.nodes == other.nodes
            and self.edges == other.edges
        )

    def __repr__(self) -> str:
        return f"MemoryGraph(nodes={len(self.nodes)}, edges={len(self.edges)}, episode={self.episode_counter})"


# --- snapshot -------------------------------------------------------------


def _experience_to_dict(e: Experience) -> dict[str, Any]:
    return {
        "condition": e.condition,
        "content": e.content,
        "created_at": e.created_at,
        "evidence": e.evidence,
        "id": e.id,
        "polarity": e.polarity.value,
        "quality": e.quality,
        "task_type": e.task_type,
    }


def _entity_to_dict(e: Entity) -> dict[str, str]:
    return {"role": e.role.value, "surface": e.surface}


def graph_to_dict(g: MemoryGraph) -> dict[str, Any]:
    nodes = []
    for nid in g.sorted_ids():
        n = g.nodes[nid]
        nodes.append(
            {
                "core_entities": [_entity_to_dict(e) for e in n.core_entities],
                "embedding": None if n.embedding is None else [float(x) for x in n.embedding],
                "experience": _experience_to_dict(n.experience),
                "role_edges": [
                    {"from": _entity_to_dict(r.from_entity), "to": _entity_to_dict(r.to_entity)}
                    for r in n.role_edges
                ],
            }
        )
    edges = []
    for key in sorted(g.edges):
        e = g.edges[key]
        d: dict[str, Any] = {
            "breakdown": None if e.breakdown is None else e.breakdown.to_dict(),
            "dst": e.dst,
            "phi": e.phi,
            "src": e.src,
            "w_prior": e.w_prior,
        }
        if e.w_recurrent is not None:
            d["w_recurrent"] = e.w_recurrent
        edges.append(d)
    return {
        "schema_version": SCHEMA_VERSION,
        "edges": edges,
        "episode_counter": g.episode_counter,
        "nodes": nodes,
    }


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: ``schema_version`` first, remaining keys sorted."""
    if isinstance(obj, dict) and "schema_version" in obj:
        head = {"schema_version": obj["schema_version"]}
        rest = {k: obj[k] for k in sorted(obj) if k != "schema_version"}
        body = json.dumps({**head, **rest}, indent=1, ensure_ascii=False, allow_nan=False)
        return body + "\n"
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def save_snapshot(g: MemoryGraph) -> str:
    d = graph_to_dict(g)
    # nested dicts are built with sorted keys already
    return canonical_json(d)


class _Reader:
    """Field access with JSON-path error locations."""

    def __init__(self, data: Any, path: str) -> None:
        self.data = data
        self.path = path

    def get(self, key: str, kind: type | tuple[type, ...], optional: bool = False) -> Any:
        loc = f"{self.path}.{key}" if self.path else key
        if not isinstance(self.data, dict):
            raise SnapshotError(f"{self.path or '<root>'}: expected object")
        if key not in self.data:
            if optional:
                return None
            raise SnapshotError(f"{loc}: missing")
        v = self.data[key]
        if v is None and optional:
            return None
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
            raise SnapshotError(f"{loc}: expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
        return v

    def child(self, key: str) -> _Reader:
        return _Reader(self.get(key, dict), f"{self.path}.{key}" if self.path else key)


def _read_entity(r: _Reader) -> Entity:
    try:
        return Entity(r.get("surface", str), EntityRole(r.get("role", str)))
    except ValueError as exc:
        raise SnapshotError(f"{r.path}: {exc}") from None


def graph_from_dict(data: Any) -> MemoryGraph:
    root = _Reader(data, "")
    version = root.get("schema_version", int)
    if version != SCHEMA_VERSION:
        raise SnapshotError(f"unsupported snapshot schema_version {version} (supported: {SCHEMA_VERSION})")
    g = MemoryGraph()
    g.episode_counter = root.get("episode_counter", int)
    for i, raw in enumerate(root.get("nodes", list)):
        r = _Reader(raw, f"nodes[{i}]")
        er = r.child("experience")
        try:
            exp = Experience(
                id=er.get("id", str),
                condition=er.get("condition", str),
                content=er.get("content", str),
                polarity=Polarity(er.get("polarity", str)),
                quality=er.get("quality", float),
                task_type=er.get("task_type", str),
                evidence=er.get("evidence", str),
                created_at=er.get("created_at", int),
            )
        except ValueError as exc:
            raise SnapshotError(f"{er.path}: {exc}") from None
        ents = [_read_entity(_Reader(x, f"{r.path}.core_entities[{j}]")) for j, x in enumerate(r.get("core_entities", list))]
        redges = []
        for j, x in enumerate(r.get("role_edges", list)):
            rr = _Reader(x, f"{r.path}.role_edges[{j}]")
            redges.append(RoleEdge(_read_entity(rr.child("from")), _read_entity(rr.child("to"))))
        emb = r.get("embedding", list, optional=True)
        node = ExperienceNode(
            exp, ents, redges, None if emb is None else np.asarray(emb, dtype=np.float64)
        )
        try:
            g.add_node(node)
        except GraphError as exc:
            raise SnapshotError(f"{r.path}: {exc}") from None
    for i, raw in enumerate(root.get("edges", list)):
        r = _Reader(raw, f"edges[{i}]")
        bd = r.get("breakdown", dict, optional=True)
        breakdown = None
        if bd is not None:
            br = _Reader(bd, f"{r.path}.breakdown")
            breakdown = EdgeScoreBreakdown(
                s_entity=br.get("s_entity", float),
                s_structure=br.get("s_structure", float),
                s_synergy=br.get("s_synergy", float),
                s_task=br.get("s_task", float),
                combined=br.get("combined", float),
            )
        edge = ExperienceEdge(
            src=r.get("src", str),
            dst=r.get("dst", str),
            w_prior=r.get("w_prior", float),
            phi=r.get("phi", float),
            breakdown=breakdown,
            w_recurrent=r.get("w_recurrent", float, optional=True),
        )
        try:
            g.add_edge(edge)
        except GraphError as exc:
            raise SnapshotError(f"{r.path}: {exc}") from None
    return g


def load_snapshot(text: str) -> MemoryGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"snapshot parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(data)


def read_snapshot(path) -> MemoryGraph:
    with open(path, encoding="utf-8") as f:
        return load_snapshot(f.read())


def write_snapshot_atomic(g: MemoryGraph, path) -> None:
    """Write via a temp file and rename so readers never see a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".gsem-", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(save_snapshot(g))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def recount_df(nodes: Iterable[ExperienceNode]) -> Counter[str]:
    df: Counter[str] = Counter()
    for n in nodes:
        for s in set(e.surface for e in n.core_entities):
            df[s] += 1
    return df
