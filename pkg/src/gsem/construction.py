"""Memory construction from historical cases.

Pipeline per case: sample reasoning trajectories, summarise the successful
ones into Indications, contrast each failure with its closest success to get
a Contraindication. Across cases: deduplicate, parse entities and role
edges, initialise quality by held-out validation trials, embed, connect.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import string
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .graph import ExperienceNode, MemoryGraph
from .model import (
    CaseRecord,
    Entity,
    EntityRejected,
    Experience,
    Outcome,
    Polarity,
    RoleEdge,
    Trajectory,
    check_experience,
    normalize_entity,
    normalize_surface,
    validate_role_edge,
)
from .prompts import ReplyParseError, experience_block, parse_json_reply, parse_reasoning, render
from .providers import ChatProvider, ChatRequest, EmbeddingProvider, ProviderError, chat_with_retry, cosine
from .similarity import DEFAULT_RETRIES, SimilarityWeights, build_edges

log = logging.getLogger(__name__)

SAMPLE_TEMPERATURE = 0.8
PLACEHOLDER_QUALITY = 0.5


class ExtractionError(Exception):
    """A model reply could not be turned into the expected structure."""


class TrajectorySamplingError(ProviderError):
    def __init__(self, message: str, partial: list[Trajectory]) -> None:
        super().__init__(message)
        self.partial = partial


class BuildError(Exception):
    pass


@dataclass(frozen=True)
class ConstructionConfig:
    n_traj: int = 5
    n_erv: int = 5
    dedup_threshold: float = 0.95
    theta_edge: float = 0.35
    similarity_weights: SimilarityWeights = field(default_factory=SimilarityWeights)
    sample_temperature: float = SAMPLE_TEMPERATURE
    retries: int = DEFAULT_RETRIES
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.n_traj < 1:
            out.append("construction.n_traj must be >= 1")
        if self.n_erv < 1:
            out.append("construction.n_erv must be >= 1")
        if not (0.0 < self.dedup_threshold <= 1.0):
            out.append("construction.dedup_threshold must be in (0,1]")
        if not (0.0 <= self.theta_edge <= 1.0):
            out.append("construction.theta_edge must be in [0,1]")
        if self.sample_temperature < 0:
            out.append("construction.sample_temperature must be >= 0")
        if self.retries < 0:
            out.append("construction.retries must be >= 0")
        return out


@dataclass(frozen=True)
class ErvResult:
    experience_id: str
    successes: int
    trials: int
    accuracy: float
    q0: float


@dataclass(frozen=True)
class Divergence:
    divergence_step: int
    success_decision: str
    failure_decision: str
    why_fatal: str
    consequence: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, ensure_ascii=False)


def derive_seed(*parts: object) -> int:
    """Stable 31-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") & 0x7FFFFFFF


# --- answer checking --------------------------------------------------------

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def answer_is_correct(
    case: CaseRecord, answer: str, judge: ChatProvider | None, retries: int = DEFAULT_RETRIES
) -> bool:
    """Closed-form cases use normalised exact match; open cases ask the judge."""
    if case.answer_format == "closed":
        return normalize_answer(answer) == normalize_answer(case.gold_answer)
    if normalize_answer(answer) == normalize_answer(case.gold_answer):
        return True
    if judge is None:
        raise ProviderError(f"case {case.case_id!r} is open-ended but no judge provider is configured")
    req = ChatRequest(
        system=render("judge_system"),
        user=render("judge_user", gold_answer=case.gold_answer, candidate_answer=answer),
    )
    reply = chat_with_retry(judge, req, retries).text
    word = re.findall(r"[a-z]+", reply.lower())
    return bool(word) and word[0] == "yes"


def answer_request(case_prompt: str, experiences: Sequence[Experience], seed: int | None = None,
                   temperature: float = 0.0) -> ChatRequest:
    """Answer prompt with experiences injected under a fixed header."""
    block = experience_block([(e.condition, e.content) for e in experiences])
    return ChatRequest(
        system=render("trajectory_system"),
        user=render("answer_user", experience_block=block, case_prompt=case_prompt),
        temperature=temperature,
        sample_seed=seed,
    )


# --- trajectories -----------------------------------------------------------


def sample_trajectories(
    case: CaseRecord,
    provider: ChatProvider,
    n: int,
    *,
    seed: int = 0,
    temperature: float = SAMPLE_TEMPERATURE,
    judge: ChatProvider | None = None,
    retries: int = DEFAULT_RETRIES,
) -> list[Trajectory]:
    """Sample ``n`` trajectories with per-call seeds and label each by correctness."""
    out: list[Trajectory] = []
    for i in range(n):
        req = answer_request(case.prompt, [], derive_seed(seed, case.case_id, "traj", i), temperature)
        try:
            reply = chat_with_retry(provider, req, retries).text
        except ProviderError as exc:
            raise TrajectorySamplingError(
                f"case {case.case_id!r}: trajectory {i} failed: {exc}", list(out)
            ) from exc
        steps, final = parse_reasoning(reply)
        if not steps:
            steps = ["(empty reply)"]
        ok = answer_is_correct(case, final, judge or provider, retries)
        out.append(Trajectory(case.case_id, tuple(steps), Outcome.SUCCESS if ok else Outcome.FAILURE, final))
    return out


def _render_trajectories(trajs: Sequence[Trajectory]) -> str:
    return "\n\n".join(f"## Trajectory T{i}\n{t.render()}" for i, t in enumerate(trajs, start=1))


def _ask_json(provider: ChatProvider, req: ChatRequest, expect: type, retries: int, validate=None):
    """Request JSON, with one repair re-prompt on parse or validation failure."""
    last: Exception | None = None
    for attempt in range(2):
        r = req if attempt == 0 else replace(
            req,
            user=req.user + "\n\nYour previous reply could not be used"
            f" ({last}). Output ONLY the requested JSON.",
        )
        text = chat_with_retry(provider, r, retries).text
        try:
            value = parse_json_reply(text, expect)
            return validate(value) if validate else value
        except (ReplyParseError, ExtractionError, KeyError, TypeError, ValueError) as exc:
            last = exc
            log.warning("unusable reply (attempt %d): %s", attempt + 1, exc)
    raise ExtractionError(str(last))


def _experience_from_dict(d: object, draft_id: str, polarity: Polarity, fallback_task: str) -> Experience:
    if not isinstance(d, dict):
        raise ExtractionError(f"expected an object, got {type(d).__name__}")
    for key in ("condition", "content"):
        if key not in d:
            raise ExtractionError(f"missing {key!r}")
        if not isinstance(d[key], str):
            raise ExtractionError(f"{key!r} must be a string")
    task = d.get("task_type") or fallback_task
    return Experience(
        id=draft_id,
        condition=d["condition"].strip(),
        content=d["content"].strip(),
        polarity=polarity,
        quality=PLACEHOLDER_QUALITY,
        task_type=str(task),
        evidence=str(d.get("evidence", "")),
    )


def extract_indications(
    case: CaseRecord,
    successes: Sequence[Trajectory],
    provider: ChatProvider,
    retries: int = DEFAULT_RETRIES,
) -> list[Experience]:
    """All successes go into one extraction call; 1-2 Indications come back."""
    if not successes:
        raise ValueError("extract_indications needs at least one successful trajectory")

    def validate(items: list) -> list[Experience]:
        if not items:
            raise ExtractionError("empty experience array")
        if len(items) > 2:
            log.warning("case %s: %d indications returned, keeping the first 2", case.case_id, len(items))
        exps = [
            _experience_from_dict(d, f"{case.case_id}/ind{i}", Polarity.INDICATION, case.task_type)
            for i, d in enumerate(items[:2])
        ]
        for e in exps:
            check_experience(e)
        return exps

    req = ChatRequest(
        system=render("indication_system"),
        user=render("indication_user", case_info=case.prompt, trajectory=_render_trajectories(successes)),
    )
    return _ask_json(provider, req, list, retries, validate)


def analyze_divergence(
    success: Trajectory,
    failure: Trajectory,
    gold: str,
    provider: ChatProvider,
    retries: int = DEFAULT_RETRIES,
) -> Divergence:
    if success.outcome is not Outcome.SUCCESS:
        raise ValueError("analyze_divergence: first trajectory must be a success")
    if failure.outcome is not Outcome.FAILURE:
        raise ValueError("analyze_divergence: second trajectory must be a failure")

    def validate(d: dict) -> Divergence:
        try:
            step = d["divergence_step"]
            if isinstance(step, str) and step.strip().isdigit():
                step = int(step)
            if not isinstance(step, int) or isinstance(step, bool):
                raise ExtractionError(f"divergence_step must be an integer, got {step!r}")
            if not 1 <= step <= len(failure.steps):
                raise ExtractionError(
                    f"divergence_step {step} outside failed trajectory steps 1..{len(failure.steps)}"
                )
            return Divergence(
                step,
                str(d["success_decision"]),
                str(d["failure_decision"]),
                str(d["why_fatal"]),
                str(d["consequence"]),
            )
        except KeyError as exc:
            raise ExtractionError(f"divergence reply missing {exc}") from None

    req = ChatRequest(
        system=render("divergence_system"),
        user=render(
            "divergence_user",
            success_trajectory=success.render(),
            failure_trajectory=failure.render(),
            gold_answer=gold,
            wrong_answer=failure.final_answer,
        ),
    )
    return _ask_json(provider, req, dict, retries, validate)


def pair_failure_with_success(
    failure: Trajectory, successes: Sequence[Trajectory], embed: EmbeddingProvider
) -> Trajectory:
    """The success whose step text embedding is closest to the failure's."""
    if not successes:
        raise ValueError("pair_failure_with_success needs at least one success")
    if len(successes) == 1:
        return successes[0]
    vecs = embed.embed(["\n".join(t.steps) for t in [failure, *successes]])
    sims = [cosine(vecs[0], v) for v in vecs[1:]]
    best = max(range(len(sims)), key=lambda i: (sims[i], -i))
    return successes[best]


def extract_contraindication(
    case: CaseRecord,
    divergence: Divergence,
    failure: Trajectory,
    success: Trajectory,
    provider: ChatProvider,
    retries: int = DEFAULT_RETRIES,
    draft_id: str | None = None,
) -> Experience:
    def validate(d: dict) -> Experience:
        return _experience_from_dict(
            d, draft_id or f"{case.case_id}/contra", Polarity.CONTRAINDICATION, case.task_type
        )

    reference = f"Correct outcome: {case.gold_answer}\nFailed trajectory outcome: {failure.final_answer}"
    req = ChatRequest(
        system=render("contraindication_system"),
        user=render(
            "contraindication_user",
            case_info=case.prompt,
            reference_analysis=reference,
            divergence=divergence.to_json(),
            failure_trajectory=failure.render(),
            success_trajectory=success.render(),
        ),
    )
    exp = _ask_json(provider, req, dict, retries, validate)
    return check_experience(exp)


def deduplicate(
    experiences: Sequence[Experience], embed: EmbeddingProvider, threshold: float
) -> list[Experience]:
    """Greedy in-order scan dropping same-polarity near duplicates."""
    if not experiences:
        return []
    vecs = embed.embed([e.indexed_text for e in experiences])
    kept: list[int] = []
    for i, e in enumerate(experiences):
        dup = any(
            experiences[j].polarity == e.polarity and cosine(vecs[i], vecs[j]) >= threshold
            for j in kept
        )
        if not dup:
            kept.append(i)
    return [experiences[i] for i in kept]


# --- quality initialisation -----------------------------------------------


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def erv_quality(successes: int, n_erv: int, experience_id: str = "") -> ErvResult:
    """Q0 = sigmoid(accuracy - ceil(n/2)/n)."""
    if n_erv < 1:
        raise ValueError("n_erv must be >= 1")
    if not 0 <= successes <= n_erv:
        raise ValueError(f"successes={successes} outside 0..{n_erv}")
    accuracy = successes / n_erv
    mu = math.ceil(n_erv / 2) / n_erv
    return ErvResult(experience_id, successes, n_erv, accuracy, sigmoid(accuracy - mu))


class ErvTrialError(ProviderError):
    def __init__(self, message: str, trial: int) -> None:
        super().__init__(message)
        self.trial = trial


def run_erv(
    e: Experience,
    held_out: Sequence[CaseRecord],
    provider: ChatProvider,
    n_erv: int,
    *,
    judge: ChatProvider | None = None,
    retries: int = DEFAULT_RETRIES,
) -> ErvResult:
    """Answer the first ``n_erv`` held-out cases with ``e`` injected; count wins."""
    if len(held_out) < n_erv:
        raise ValueError(f"run_erv needs {n_erv} held-out cases, got {len(held_out)}")
    wins = 0
    for t, case in enumerate(held_out[:n_erv]):
        try:
            reply = chat_with_retry(provider, answer_request(case.prompt, [e]), retries).text
            _, final = parse_reasoning(reply)
            wins += answer_is_correct(case, final, judge or provider, retries)
        except ProviderError as exc:
            raise ErvTrialError(f"ERV trial {t} for {e.id} failed: {exc}", t) from exc
    return erv_quality(wins, n_erv, e.id)


# --- entity layer -------------------------------------------------------------


def parse_entities_and_edges(
    e: Experience, provider: ChatProvider, retries: int = DEFAULT_RETRIES
) -> tuple[list[Entity], list[RoleEdge]]:
    """Two calls: core entities, then role edges grounded on those entities.

    Entities that fail normalisation and edges outside the allowed grammar
    or not grounded in the extracted entities are dropped with a warning.
    """
    raw = _ask_json(
        provider,
        ChatRequest(
            system=render("entity_system"),
            user=render("entity_user", condition=e.condition, content=e.content),
        ),
        dict,
        retries,
        lambda d: d["core_entities"] if isinstance(d["core_entities"], list) else _bad("core_entities"),
    )
    entities: list[Entity] = []
    for item in raw:
        try:
            ent = normalize_entity(str(item["entity"]), item["role"])
        except (EntityRejected, KeyError, TypeError, ValueError) as exc:
            log.warning("%s: dropping entity %r (%s)", e.id, item, exc)
            continue
        if ent not in entities:
            entities.append(ent)

    listing = json.dumps([{"entity": x.surface, "role": x.role.value} for x in entities], ensure_ascii=False)
    raw_edges = _ask_json(
        provider,
        ChatRequest(
            system=render("role_edge_system"),
            user=render("role_edge_user", core_entities_json=listing, condition=e.condition, content=e.content),
        ),
        dict,
        retries,
        lambda d: d.get("entity_edges", []) if isinstance(d.get("entity_edges", []), list) else _bad("entity_edges"),
    )
    known = set(entities)
    by_surface: dict[str, list[Entity]] = {}
    for x in entities:
        by_surface.setdefault(x.surface, []).append(x)
    edges: list[RoleEdge] = []
    for item in raw_edges:
        try:
            src, dst = _ground_edge(item, by_surface)
        except (KeyError, TypeError, ValueError) as exc:
            log.warning("%s: dropping role edge %r (%s)", e.id, item, exc)
            continue
        if src not in known or dst not in known or not validate_role_edge(src, dst):
            log.warning("%s: dropping role edge %r (not allowed)", e.id, item)
            continue
        re_ = RoleEdge(src, dst)
        if re_ not in edges:
            edges.append(re_)
    return entities, edges


def _bad(field_name: str):
    raise ExtractionError(f"{field_name!r} must be a list")


def _ground_edge(item: dict, by_surface: dict[str, list[Entity]]) -> tuple[Entity, Entity]:
    label = str(item.get("edge", ""))
    roles = [p.strip() for p in re.split(r"\s*(?:->|→)\s*", label)] if label else []
    ends = []
    for k, key in enumerate(("from_entity", "to_entity")):
        surface = normalize_surface(str(item[key]))
        cands = by_surface.get(surface)
        if not cands:
            raise ValueError(f"{surface!r} is not a core entity")
        if len(roles) == 2:
            match = [c for c in cands if c.role.value.lower() == roles[k].lower()]
            if not match:
                raise ValueError(f"{surface!r} has no role {roles[k]!r}")
            ends.append(match[0])
        else:
            ends.append(cands[0])
    return ends[0], ends[1]


# --- full build ---------------------------------------------------------------


@dataclass
class CaseOutcome:
    case_id: str
    n_success: int = 0
    n_failure: int = 0
    n_indications: int = 0
    n_contraindications: int = 0
    errors: list[str] = field(default_factory=list)
    skipped: bool = False


@dataclass
class BuildReport:
    cases: list[CaseOutcome] = field(default_factory=list)
    extracted: int = 0
    after_dedup: int = 0
    erv: list[ErvResult] = field(default_factory=list)
    edges: int = 0

    def summary(self, g: MemoryGraph) -> dict:
        by_pol = {p.value: 0 for p in Polarity}
        for n in g.nodes.values():
            by_pol[n.experience.polarity.value] += 1
        qs = [n.quality for n in g.nodes.values()]
        return {
            "experiences": len(g),
            "by_polarity": by_pol,
            "edges": len(g.edges),
            "mean_quality": (math.fsum(qs) / len(qs)) if qs else 0.0,
            "extracted": self.extracted,
            "after_dedup": self.after_dedup,
            "skipped_cases": [c.case_id for c in self.cases if c.skipped],
            "case_errors": {c.case_id: c.errors for c in self.cases if c.errors},
        }


def _held_out_for(case_id: str, cases: Sequence[CaseRecord], n: int, seed: int) -> list[CaseRecord]:
    pool = [c for c in cases if c.case_id != case_id] or list(cases)
    rng = np.random.default_rng([seed, derive_seed("erv", case_id)])
    replace_ = len(pool) < n
    idx = rng.choice(len(pool), size=n, replace=replace_)
    return [pool[int(i)] for i in idx]


def extract_case(
    case: CaseRecord,
    generation: ChatProvider,
    embed: EmbeddingProvider,
    cfg: ConstructionConfig,
    judge: ChatProvider | None = None,
) -> tuple[list[Experience], CaseOutcome]:
    """Trajectory sampling and both extraction routes for one case."""
    oc = CaseOutcome(case.case_id)
    trajs = sample_trajectories(
        case, generation, cfg.n_traj, seed=cfg.seed, temperature=cfg.sample_temperature,
        judge=judge, retries=cfg.retries,
    )
    succ = [t for t in trajs if t.outcome is Outcome.SUCCESS]
    fail = [t for t in trajs if t.outcome is Outcome.FAILURE]
    oc.n_success, oc.n_failure = len(succ), len(fail)
    if not succ:
        log.warning("case %s: no successful trajectory; skipped", case.case_id)
        oc.skipped = True
        return [], oc
    exps: list[Experience] = []
    try:
        inds = extract_indications(case, succ, generation, cfg.retries)
        exps.extend(inds)
        oc.n_indications = len(inds)
    except (ExtractionError, ProviderError, ValueError) as exc:
        oc.errors.append(f"indication extraction: {exc}")
    for k, f in enumerate(fail):
        try:
            s = pair_failure_with_success(f, succ, embed)
            div = analyze_divergence(s, f, case.gold_answer, generation, cfg.retries)
            exps.append(
                extract_contraindication(case, div, f, s, generation, cfg.retries, f"{case.case_id}/contra{k}")
            )
            oc.n_contraindications += 1
        except (ExtractionError, ProviderError, ValueError) as exc:
            oc.errors.append(f"contraindication from failure {k}: {exc}")
    return exps, oc


def build_memory(
    cases: Sequence[CaseRecord],
    generation: ChatProvider,
    embed: EmbeddingProvider,
    cfg: ConstructionConfig = ConstructionConfig(),
    *,
    judge: ChatProvider | None = None,
    held_out: Sequence[CaseRecord] | None = None,
) -> tuple[MemoryGraph, BuildReport]:
    """Run the whole construction pipeline; cases are processed in id order.

    ``held_out`` is the pool for validation trials; by default each
    experience is validated on the other cases of the dataset.
    """
    if not cases:
        raise ValueError("build_memory needs at least one case")
    problems = cfg.violations()
    if problems:
        raise ValueError("; ".join(problems))
    judge = judge or generation
    report = BuildReport()
    drafts: list[tuple[Experience, str]] = []
    provider_failures: list[ProviderError] = []
    for case in sorted(cases, key=lambda c: c.case_id):
        try:
            exps, oc = extract_case(case, generation, embed, cfg, judge)
        except (ExtractionError, ProviderError) as exc:
            oc = CaseOutcome(case.case_id, errors=[str(exc)], skipped=True)
            exps = []
            if isinstance(exc, ProviderError):
                provider_failures.append(exc)
        report.cases.append(oc)
        drafts.extend((e, case.case_id) for e in exps)
    report.extracted = len(drafts)

    kept = deduplicate([e for e, _ in drafts], embed, cfg.dedup_threshold)
    kept_ids = {id(e) for e in kept}
    drafts = [(e, cid) for e, cid in drafts if id(e) in kept_ids]
    report.after_dedup = len(drafts)
    if not drafts:
        if len(provider_failures) == len(cases):
            # nothing to build because the provider never answered
            raise ProviderError(f"no experiences survived extraction: {provider_failures[-1]}")
        raise BuildError("no experiences survived extraction")

    pool = list(held_out) if held_out is not None else list(cases)
    nodes: list[ExperienceNode] = []
    for k, (draft, case_id) in enumerate(drafts):
        exp = replace(draft, id=f"exp_{k:04d}")
        ents, redges = parse_entities_and_edges(exp, generation, cfg.retries)
        trials = _held_out_for(case_id if held_out is None else "", pool, cfg.n_erv, cfg.seed)
        erv = run_erv(exp, trials, generation, cfg.n_erv, judge=judge, retries=cfg.retries)
        report.erv.append(erv)
        nodes.append(ExperienceNode(replace(exp, quality=erv.q0), ents, redges))

    vecs = embed.embed([n.experience.indexed_text for n in nodes])
    g = MemoryGraph()
    for n, v in zip(nodes, vecs):
        n.embedding = np.asarray(v, dtype=np.float64)
        g.add_node(n)
    if len(g) >= 2:
        report.edges = build_edges(g, cfg.similarity_weights, cfg.theta_edge, judge, cfg.retries)
    return g, report
