import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import link, make_node, random_graph

from gsem.graph import DuplicateId, MemoryGraph, MissingNode, effective_weight, save_snapshot
from gsem.model import Experience
from gsem.providers import FailingChat, HashEmbedder, ProviderError, ScriptedChat
from gsem.evolution import (
    EvolutionConfig,
    FeedbackEvent,
    WeightMode,
    apply_feedback,
    delta_from_outcome,
    edge_credits,
    insert_experience,
    node_credits,
)


def corpus(*nodes):
    g = MemoryGraph()
    for n in nodes:
        g.add_node(n)
    return g


# --- credits --------------------------------------------------------------------


def test_node_credit_examples():
    assert node_credits({"A": 0}, 0.8) == {"A": 1.0}
    two = node_credits({"A": 0, "B": 1}, 0.8)
    assert two["A"] == pytest.approx(1 / 1.8, abs=1e-12)
    assert round(two["A"], 6) == 0.555556 and round(two["B"], 6) == 0.444444
    three = node_credits({"A": 0, "B": 1, "C": 2}, 0.8)
    assert [round(three[k], 6) for k in "ABC"] == [0.409836, 0.327869, 0.262295]
    assert three["A"] == pytest.approx(1 / 2.44, abs=1e-15)


def test_node_credit_errors():
    with pytest.raises(ValueError):
        node_credits({}, 0.8)
    with pytest.raises(ValueError):
        node_credits({"A": 0, "B": 2}, 0.8)


def test_edge_credit_examples():
    a = node_credits({"A": 0, "B": 1, "C": 2}, 0.8)
    assert edge_credits(a, [("A", "B")]) == {("A", "B"): 1.0}
    assert edge_credits(a, []) == {}
    b = edge_credits(a, [("A", "B"), ("B", "C")])
    # exact ratio of the two products is 1 : 0.64
    assert b[("A", "B")] == pytest.approx(1 / 1.64, abs=1e-12)
    assert b[("B", "C")] == pytest.approx(0.64 / 1.64, abs=1e-12)
    # published six-digit figures come from rounded intermediate products
    assert b[("A", "B")] == pytest.approx(0.609742, abs=1e-4)
    assert b[("B", "C")] == pytest.approx(0.390258, abs=1e-4)
    with pytest.raises(KeyError):
        edge_credits(a, [("A", "Z")])


@settings(max_examples=100)
@given(st.integers(1, 12), st.floats(0.01, 0.99))
def test_credit_normalisation_and_monotonicity(n, rho):
    a = node_credits({f"n{r}": r for r in range(n)}, rho)
    assert abs(math.fsum(a.values()) - 1.0) <= 1e-9
    vals = [a[f"n{r}"] for r in range(n)]
    assert all(x > y for x, y in zip(vals, vals[1:]))
    edges = [(f"n{i}", f"n{j}") for i in range(n) for j in range(n) if i != j and (i + j) % 3 == 0]
    if edges:
        assert abs(math.fsum(edge_credits(a, edges).values()) - 1.0) <= 1e-9


def test_delta_from_outcome():
    assert delta_from_outcome(True) == 1.0
    assert delta_from_outcome(False) == -1.0


def test_feedback_event_checks():
    with pytest.raises(ValueError):
        FeedbackEvent("t", 1.5, ())
    with pytest.raises(ValueError):
        FeedbackEvent("t", 1.0, ("a", "a"))


def test_config_violations():
    assert EvolutionConfig().violations() == []
    assert len(EvolutionConfig(rho=1.0, eta_q=0.0, eta_w=-1.0).violations()) == 3


# --- updates --------------------------------------------------------------------


def test_quality_update_examples():
    g = corpus(make_node("a", quality=0.5), make_node("b", quality=0.98))
    apply_feedback(g, FeedbackEvent("t1", 1.0, ("a",)))
    assert g.nodes["a"].quality == pytest.approx(0.6, abs=1e-12)
    apply_feedback(g, FeedbackEvent("t2", 1.0, ("b",)))
    assert g.nodes["b"].quality == 1.0
    assert g.episode_counter == 2


def test_phi_update_example():
    g = corpus(make_node("a"), make_node("b"))
    link(g, "a", "b", 0.4, both=False)
    report = apply_feedback(g, FeedbackEvent("t", -1.0, ("a", "b")))
    e = g.edges[("a", "b")]
    assert e.phi == pytest.approx(-0.05, abs=1e-12)
    assert effective_weight(e) == pytest.approx(0.35, abs=1e-12)
    assert e.w_prior == 0.4
    assert report.edge_updates == [{"b": 1.0, "dst": "b", "phi_after": e.phi, "phi_before": 0.0, "src": "a"}]


def test_report_json_shape():
    g = corpus(make_node("a"), make_node("b"))
    link(g, "a", "b", 0.4)
    d = json.loads(apply_feedback(g, FeedbackEvent("t", 1.0, ("b", "a"))).to_json())
    assert list(d) == ["delta", "edge_updates", "node_updates", "task_id"]
    assert [u["id"] for u in d["node_updates"]] == ["a", "b"]
    assert [(u["src"], u["dst"]) for u in d["edge_updates"]] == [("a", "b"), ("b", "a")]
    assert d["node_updates"][1]["a"] == pytest.approx(1 / 1.8)


def test_unknown_id_leaves_graph_unchanged():
    g = corpus(make_node("a"), make_node("b"))
    link(g, "a", "b", 0.4)
    before = save_snapshot(g)
    with pytest.raises(MissingNode, match="ghost"):
        apply_feedback(g, FeedbackEvent("t", 1.0, ("a", "ghost")))
    assert save_snapshot(g) == before


def test_empty_collection_only_advances_counter():
    g = corpus(make_node("a"))
    report = apply_feedback(g, FeedbackEvent("t", 1.0, ()))
    assert report.node_updates == [] and g.episode_counter == 1


@pytest.mark.parametrize("q0, delta, target", [(0.5, 1.0, 1.0), (0.13, 1.0, 1.0), (0.5, -1.0, 0.0), (0.77, -1.0, 0.0)])
def test_convergence_within_bound(q0, delta, target):
    cfg = EvolutionConfig()
    g = corpus(make_node("a", quality=q0))
    gap = (1 - q0) if delta > 0 else q0
    bound = math.ceil(gap / cfg.eta_q)
    history = [q0]
    for _ in range(bound):
        apply_feedback(g, FeedbackEvent("t", delta, ("a",)), cfg)
        history.append(g.nodes["a"].quality)
    steps = np.diff(history) * delta
    assert (steps >= 0).all()
    assert abs(history[-1] - target) <= 1e-9


def test_recurrent_mode():
    g = corpus(make_node("a"), make_node("b"))
    link(g, "a", "b", 0.4, both=False)
    cfg = EvolutionConfig(weight_mode=WeightMode.RECURRENT)
    apply_feedback(g, FeedbackEvent("t", 1.0, ("a", "b")), cfg)
    e = g.edges[("a", "b")]
    assert e.w_recurrent == pytest.approx(0.45, abs=1e-12)
    apply_feedback(g, FeedbackEvent("t", 1.0, ("a", "b")), cfg)
    # phi is now 0.1 and is added again on top of the previous weight
    assert e.w_recurrent == pytest.approx(0.55, abs=1e-12)
    assert effective_weight(e) == e.w_recurrent
    assert e.w_prior == 0.4


def _graph_state(g):
    return ({i: n.quality for i, n in g.nodes.items()},
            {k: (e.w_prior, e.phi, e.w_recurrent) for k, e in g.edges.items()})


@settings(max_examples=80)
@given(st.integers(0, 2**32 - 1))
def test_feedback_properties(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 9)), with_phi=bool(rng.integers(2)))
    ids = g.sorted_ids()
    mode = WeightMode.RECURRENT if seed % 3 == 0 else WeightMode.PRIOR_PLUS_PHI
    cfg = EvolutionConfig(eta_q=float(rng.uniform(0.01, 1)), eta_w=float(rng.uniform(0.01, 1)),
                          rho=float(rng.uniform(0.05, 0.95)), weight_mode=mode)
    for t in range(int(rng.integers(1, 8))):
        k = int(rng.integers(0, len(ids) + 1))
        chosen = tuple(ids[int(i)] for i in rng.permutation(len(ids))[:k])
        nodes0, edges0 = _graph_state(g)
        apply_feedback(g, FeedbackEvent(f"t{t}", float(rng.uniform(-1, 1)), chosen), cfg)
        nodes1, edges1 = _graph_state(g)
        for i in ids:
            if i not in chosen:
                assert nodes1[i] == nodes0[i]
        for key in edges0:
            assert edges1[key][0] == edges0[key][0]  # prior preserved
            if not (key[0] in chosen and key[1] in chosen):
                assert edges1[key] == edges0[key]
        assert all(0.0 <= q <= 1.0 for q in nodes1.values())
        assert all(0.0 <= effective_weight(e) <= 1.0 for e in g.edges.values())


# --- insertion --------------------------------------------------------------------


def _exp(eid, condition="Suspected sepsis with low blood pressure"):
    return Experience(eid, condition, "Give fluids early.", "Indication", 0.5, "diagnosis")


def _extractor(entities, edges=()):
    return ScriptedChat([
        ("Extract the core decision-structure entities",
         json.dumps({"core_entities": [{"entity": s, "role": r} for s, r in entities]})),
        ("Extract the role-edge decision-flow structure",
         json.dumps({"entity_edges": [{"edge": f"{entities[i][1]}->{entities[j][1]}",
                                        "from_entity": entities[i][0], "to_entity": entities[j][0]}
                                       for i, j in edges]})),
    ])


SEPSIS = [("sepsis", "Condition"), ("fluids", "Action")]


def test_insert_into_empty_graph():
    g = MemoryGraph()
    n = insert_experience(g, _exp("new"), 0.3, _extractor(SEPSIS, [(0, 1)]), HashEmbedder(), ScriptedChat([]))
    assert n == 0
    node = g.nodes["new"]
    assert node.quality == 0.3 and len(node.core_entities) == 2 and len(node.role_edges) == 1
    assert abs(float(np.linalg.norm(node.embedding)) - 1.0) <= 1e-9


def test_insert_near_clone_creates_both_edges():
    g = corpus(make_node("old", SEPSIS, [(0, 1)]))
    judge = ScriptedChat([("Evaluate the semantic similarity", '{"similarity": 1.0}')])
    created = insert_experience(g, _exp("new"), 0.5, _extractor(SEPSIS, [(0, 1)]), HashEmbedder(), judge)
    assert created == 2
    # df and N include the new node: both entities have idf 1 and identical vectors
    # entity 1, structure 0.1 (one shared length-1 walk), synergy 1, task 1
    expected = 0.25 * (1.0 + 0.1 + 1.0 + 1.0)
    assert g.edges[("old", "new")].w_prior == pytest.approx(expected, abs=1e-12)
    assert g.edges[("new", "old")].w_prior == pytest.approx(expected, abs=1e-12)
    assert g.doc_count == 2 and g.entity_df["sepsis"] == 2


def test_insert_duplicate_id():
    g = corpus(make_node("old"))
    before = save_snapshot(g)
    with pytest.raises(DuplicateId):
        insert_experience(g, _exp("old"), 0.5, _extractor(SEPSIS), HashEmbedder(), ScriptedChat([]))
    assert save_snapshot(g) == before


def test_insert_provider_failure_propagates():
    g = corpus(make_node("old"))
    before = save_snapshot(g)
    with pytest.raises(ProviderError):
        insert_experience(g, _exp("new"), 0.5, FailingChat(), HashEmbedder(), ScriptedChat([]), retries=0)
    assert save_snapshot(g) == before


def test_insert_stamps_creation_counter():
    g = corpus(make_node("old", [("fracture", "Condition")]))
    g.episode_counter = 7
    judge = ScriptedChat([("Evaluate the semantic similarity", '{"similarity": 0.0}')])
    e = replace(_exp("new"), quality=0.9)
    assert insert_experience(g, e, 0.2, _extractor(SEPSIS), HashEmbedder(), judge) == 0
    assert g.nodes["new"].experience.created_at == 7
    assert g.nodes["new"].quality == 0.2
