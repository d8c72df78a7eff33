"""One online episode: retrieve, answer with injected experience, judge, evolve.

Each episode appends an ``EpisodeRecord`` (one JSON line) to a log. The log
carries everything needed to re-apply the feedback, so replaying it over the
starting snapshot reproduces the final snapshot exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

from .construction import answer_is_correct, answer_request, derive_seed
from .evolution import EvolutionConfig, FeedbackEvent, UpdateReport, apply_feedback, delta_from_outcome
from .graph import MemoryGraph
from .model import CaseRecord
from .prompts import parse_reasoning
from .providers import ChatProvider, EmbeddingProvider, chat_with_retry
from .retrieval import Policy, RetrievalConfig, RetrievalTrace, retrieve

log = logging.getLogger(__name__)


class EpisodeStageError(Exception):
    """Failure inside an episode, tagged with the stage that failed."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    task_id: str
    retrieved: tuple[str, ...]
    answer: str
    correct: bool
    delta: float
    evolution: dict
    update: dict

    def to_json(self) -> str:
        d = asdict(self)
        d["retrieved"] = list(self.retrieved)
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> EpisodeRecord:
        d = json.loads(line)
        d["retrieved"] = tuple(d["retrieved"])
        return cls(**d)

    def event(self) -> FeedbackEvent:
        return FeedbackEvent(self.task_id, self.delta, self.retrieved)

    def evolution_config(self) -> EvolutionConfig:
        return EvolutionConfig(**self.evolution)


def _evo_dict(cfg: EvolutionConfig) -> dict:
    return {"eta_q": cfg.eta_q, "eta_w": cfg.eta_w, "rho": cfg.rho, "weight_mode": cfg.weight_mode.value}


def run_episode(
    g: MemoryGraph,
    case: CaseRecord,
    *,
    answerer: ChatProvider,
    policy_chat: ChatProvider | None,
    embed: EmbeddingProvider,
    judge: ChatProvider | None = None,
    retrieval_cfg: RetrievalConfig = RetrievalConfig(),
    evolution_cfg: EvolutionConfig = EvolutionConfig(),
    policy: Policy | None = None,
    master_seed: int = 0,
    retries: int = 2,
) -> tuple[EpisodeRecord, RetrievalTrace, UpdateReport]:
    """Run one episode and apply its feedback to ``g`` in place.

    Nothing is written to ``g`` until the answer has been judged, so a
    failure in any stage leaves the graph as it was.
    """
    episode = g.episode_counter
    try:
        experiences, trace = retrieve(g, case.prompt, policy_chat, embed, retrieval_cfg, policy)
    except Exception as exc:
        raise EpisodeStageError("retrieve", exc) from exc
    req = answer_request(case.prompt, experiences, derive_seed(master_seed, case.case_id, episode))
    try:
        reply = chat_with_retry(answerer, req, retries).text
    except Exception as exc:
        raise EpisodeStageError("answer", exc) from exc
    _, answer = parse_reasoning(reply)
    try:
        correct = answer_is_correct(case, answer, judge, retries)
    except Exception as exc:
        raise EpisodeStageError("judge", exc) from exc
    delta = delta_from_outcome(correct)
    event = FeedbackEvent.from_trace(case.case_id, delta, trace)
    report = apply_feedback(g, event, evolution_cfg)
    record = EpisodeRecord(
        episode=episode,
        task_id=case.case_id,
        retrieved=tuple(trace.collected),
        answer=answer,
        correct=correct,
        delta=delta,
        evolution=_evo_dict(evolution_cfg),
        update=report.to_dict(),
    )
    return record, trace, report


def append_record(path: str | Path, record: EpisodeRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")


def read_log(path: str | Path) -> list[EpisodeRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(EpisodeRecord.from_json(line))
            except (ValueError, TypeError, KeyError) as exc:
                raise ValueError(f"{path}:{n}: bad episode record: {exc}") from None
    return out


def replay(g: MemoryGraph, records: Iterable[EpisodeRecord]) -> MemoryGraph:
    """Re-apply logged feedback, in order, to ``g`` (modified in place)."""
    for rec in records:
        if rec.episode != g.episode_counter:
            raise ValueError(
                f"episode record {rec.episode} does not follow snapshot episode {g.episode_counter}"
            )
        apply_feedback(g, rec.event(), rec.evolution_config())
    return g
