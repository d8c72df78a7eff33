"""Graph statistics and GraphViz export."""

from __future__ import annotations

import json

from .graph import MemoryGraph, MissingNode, effective_weight
from .model import Polarity

N_BINS = 10


def histogram(values, bins: int = N_BINS) -> list[int]:
    """Counts over [0, 1] in equal-width bins; 1.0 falls in the last bin."""
    counts = [0] * bins
    for v in values:
        counts[min(int(v * bins), bins - 1)] += 1
    return counts


def graph_stats(g: MemoryGraph) -> dict:
    pol = {p.value: 0 for p in Polarity}
    for n in g.nodes.values():
        pol[n.experience.polarity.value] += 1
    return {
        "edges": len(g.edges),
        "episode_counter": g.episode_counter,
        "nodes": len(g.nodes),
        "polarity": pol,
        "quality_histogram": histogram(g.nodes[i].quality for i in g.sorted_ids()),
        "weight_histogram": histogram(effective_weight(g.edges[k]) for k in sorted(g.edges)),
    }


def stats_json(g: MemoryGraph) -> str:
    return json.dumps(graph_stats(g), indent=1, sort_keys=True) + "\n"


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def experience_dot(g: MemoryGraph) -> str:
    """Experience layer: pen width proportional to Q, edges labelled with W."""
    lines = ["digraph experiences {"]
    for i in g.sorted_ids():
        n = g.nodes[i]
        shape = "box" if n.experience.polarity is Polarity.CONTRAINDICATION else "ellipse"
        lines.append(f"  {_q(i)} [label={_q(i)}, shape={shape}, penwidth={5.0 * n.quality:.3f}];")
    for src, dst in sorted(g.edges):
        lines.append(f"  {_q(src)} -> {_q(dst)} [label=\"{effective_weight(g.edges[(src, dst)]):.3f}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def entity_dot(g: MemoryGraph, experience_id: str) -> str:
    """Entity subgraph of one experience: typed entities and their role edges."""
    if experience_id not in g.nodes:
        raise MissingNode(f"unknown experience id {experience_id!r}")
    n = g.nodes[experience_id]
    lines = [f"digraph {_q(experience_id)} {{"]
    for e in sorted(n.core_entities):
        key = f"{e.role.value}:{e.surface}"
        label = _q(e.surface)[:-1] + "\\n" + e.role.value + '"'
        lines.append(f"  {_q(key)} [label={label}];")
    for re_ in sorted(n.role_edges, key=lambda r: (r.from_entity, r.to_entity)):
        a = f"{re_.from_entity.role.value}:{re_.from_entity.surface}"
        b = f"{re_.to_entity.role.value}:{re_.to_entity.surface}"
        lines.append(f"  {_q(a)} -> {_q(b)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
