import json

import pytest

from helpers import FIXTURES

from gsem.episode import EpisodeRecord, EpisodeStageError, append_record, read_log, replay, run_episode
from gsem.graph import load_snapshot, save_snapshot
from gsem.model import load_cases
from gsem.providers import FailingChat, HashEmbedder, ScriptedChat
from gsem.retrieval import RetrievalConfig

CASES = {c.case_id: c for c in load_cases(json.loads((FIXTURES / "episode_cases.json").read_text()))}


def run(g, cfg, case_id, answerer=None, **kw):
    kw.setdefault("retrieval_cfg", cfg.retrieval)
    return run_episode(
        g, CASES[case_id], answerer=answerer or cfg.provider("generation").chat(), policy_chat=None,
        embed=HashEmbedder(), evolution_cfg=cfg.evolution, master_seed=cfg.master_seed, **kw,
    )


def expected_q(before, collected, delta, eta=0.1, rho=0.8):
    total = sum(rho**r for r in range(len(collected)))
    return {i: min(1.0, max(0.0, before[i] + eta * (rho**r / total) * delta)) for r, i in enumerate(collected)}


@pytest.mark.parametrize("case_id, correct", [("ep_ok", True), ("ep_bad", False)])
def test_episode_moves_quality(fixture_graph, fixture_config, case_id, correct):
    before = {i: n.quality for i, n in fixture_graph.nodes.items()}
    rec, trace, report = run(fixture_graph, fixture_config, case_id)
    assert rec.correct is correct and rec.delta == (1.0 if correct else -1.0)
    assert trace.collected and list(rec.retrieved) == trace.collected
    want = expected_q(before, trace.collected, rec.delta)
    for i, q in want.items():
        assert fixture_graph.nodes[i].quality == pytest.approx(q, abs=1e-12)
        assert (q > before[i]) if correct else (q < before[i])
    for i in set(before) - set(want):
        assert fixture_graph.nodes[i].quality == before[i]
    assert fixture_graph.episode_counter == 1
    assert rec.update == report.to_dict()


def test_answer_prompt_carries_experience(fixture_graph, fixture_config):
    chat = fixture_config.provider("generation").chat()
    rec, trace, _ = run(fixture_graph, fixture_config, "ep_ok", answerer=chat)
    user = chat.requests[-1].user
    assert "Relevant experience:" in user
    for i in trace.collected:
        assert fixture_graph.nodes[i].experience.condition in user


def test_empty_retrieval_answers_without_injection(fixture_graph, fixture_config):
    chat = ScriptedChat([("Reason step by step", "Step 1: x\nFinal answer: septic shock")])
    before = save_snapshot(fixture_graph)
    rec, trace, report = run(fixture_graph, fixture_config, "ep_ok", answerer=chat,
                             retrieval_cfg=RetrievalConfig(k_seed=3, collect_threshold=1.5))
    assert trace.collected == [] and report.node_updates == [] and report.edge_updates == []
    assert "Relevant experience:" not in chat.requests[0].user
    after = load_snapshot(save_snapshot(fixture_graph))
    assert after.episode_counter == 1
    after.episode_counter = 0
    assert save_snapshot(after) == before


def test_failure_leaves_graph_untouched(fixture_graph, fixture_config):
    before = save_snapshot(fixture_graph)
    with pytest.raises(EpisodeStageError) as info:
        run(fixture_graph, fixture_config, "ep_ok", answerer=FailingChat(), retries=0)
    assert info.value.stage == "answer"
    assert save_snapshot(fixture_graph) == before


def test_log_replay_reproduces_snapshot(fixture_graph, fixture_config, tmp_path):
    start = save_snapshot(fixture_graph)
    log = tmp_path / "episodes.jsonl"
    for case_id in ("ep_ok", "ep_bad", "ep_ok"):
        rec, _, _ = run(fixture_graph, fixture_config, case_id)
        append_record(log, rec)
    records = read_log(log)
    assert [r.episode for r in records] == [0, 1, 2]
    replayed = replay(load_snapshot(start), records)
    assert save_snapshot(replayed) == save_snapshot(fixture_graph)
    with pytest.raises(ValueError, match="does not follow"):
        replay(load_snapshot(start), records[1:])


def test_record_round_trip_and_bad_line(tmp_path):
    rec = EpisodeRecord(3, "t", ("a", "b"), "x", True, 1.0,
                        {"eta_q": 0.1, "eta_w": 0.05, "rho": 0.8, "weight_mode": "prior_plus_phi"}, {})
    assert EpisodeRecord.from_json(rec.to_json()) == rec
    assert rec.event().collected == ("a", "b")
    p = tmp_path / "log.jsonl"
    p.write_text(rec.to_json() + "\n\n{broken\n")
    with pytest.raises(ValueError, match=":3: bad episode record"):
        read_log(p)
