"""Core value types: experiences, typed entities, role edges, trajectories, cases."""

from __future__ import annotations

import enum
import re
import string
from dataclasses import dataclass, field


class Polarity(str, enum.Enum):
    INDICATION = "Indication"
    CONTRAINDICATION = "Contraindication"


class EntityRole(str, enum.Enum):
    CONDITION = "Condition"
    CONSTRAINT = "Constraint"
    ACTION = "Action"
    RATIONALE = "Rationale"
    OUTCOME = "Outcome"


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"


_C, _K, _A, _R, _O = (
    EntityRole.CONDITION,
    EntityRole.CONSTRAINT,
    EntityRole.ACTION,
    EntityRole.RATIONALE,
    EntityRole.OUTCOME,
)

# Outcome has no outgoing edges.
ALLOWED_ROLE_EDGES: frozenset[tuple[EntityRole, EntityRole]] = frozenset(
    [
        (_C, _A), (_C, _C), (_C, _K), (_C, _O), (_C, _R),
        (_K, _A), (_K, _R), (_K, _O),
        (_A, _O), (_A, _R), (_A, _K), (_A, _A),
        (_R, _A), (_R, _O), (_R, _K),
    ]
)  # fmt: skip


def normalize_task_type(value: str) -> str:
    return " ".join(value.split()).lower()


@dataclass(frozen=True)
class Experience:
    """One reusable unit of decision knowledge.

    ``condition`` states when the experience applies, ``content`` the strategy
    itself. ``quality`` is the current reliability score in [0, 1].
    ``created_at`` is the episode counter at insertion time, not wall time.
    """

    id: str
    condition: str
    content: str
    polarity: Polarity
    quality: float
    task_type: str
    evidence: str = ""
    created_at: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        object.__setattr__(self, "task_type", normalize_task_type(self.task_type))

    @property
    def indexed_text(self) -> str:
        """Text used for embeddings, dedup and dense recall."""
        return f"{self.condition}\n{self.content}"


def validate_experience(e: Experience) -> list[str]:
    """Return the list of violated invariants; an empty list means valid."""
    problems = []
    if not e.id:
        problems.append("id empty")
    if not e.condition.strip():
        problems.append("condition empty")
    if not e.content.strip():
        problems.append("content empty")
    if not (0.0 <= e.quality <= 1.0):
        problems.append("quality out of [0,1]")
    if not e.task_type:
        problems.append("task_type empty")
    return problems


class InvalidExperience(ValueError):
    pass


def check_experience(e: Experience) -> Experience:
    problems = validate_experience(e)
    if problems:
        raise InvalidExperience(f"experience {e.id!r}: " + "; ".join(problems))
    return e


@dataclass(frozen=True, order=True)
class Entity:
    surface: str
    role: EntityRole

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", EntityRole(self.role))


class EntityRejected(ValueError):
    def __init__(self, raw: str, reason: str) -> None:
        super().__init__(f"{raw!r}: {reason}")
        self.raw = raw
        self.reason = reason


_PUNCT = string.punctuation + "‘’“”"
_WS = re.compile(r"\s+")


def normalize_surface(raw: str) -> str:
    return _WS.sub(" ", raw.lower()).strip().strip(_PUNCT).strip()


def normalize_entity(raw: str, role: EntityRole | str) -> Entity:
    """Lowercase, collapse whitespace, strip surrounding punctuation.

    Raises EntityRejected when the result is empty or not 1-3 words long.
    """
    surface = normalize_surface(raw)
    n_words = len(surface.split())
    if n_words == 0:
        raise EntityRejected(raw, "empty")
    if n_words > 3:
        raise EntityRejected(raw, f"{n_words} words")
    return Entity(surface, EntityRole(role))


@dataclass(frozen=True, order=True)
class RoleEdge:
    from_entity: Entity
    to_entity: Entity

    @property
    def label(self) -> tuple[EntityRole, EntityRole]:
        return (self.from_entity.role, self.to_entity.role)


def validate_role_edge(src: Entity, dst: Entity) -> bool:
    return src != dst and (src.role, dst.role) in ALLOWED_ROLE_EDGES


@dataclass(frozen=True)
class Trajectory:
    case_id: str
    steps: tuple[str, ...]
    outcome: Outcome
    final_answer: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "outcome", Outcome(self.outcome))
        if not self.steps:
            raise ValueError(f"trajectory for case {self.case_id!r} has no steps")

    def render(self) -> str:
        lines = [f"Step {i}: {s}" for i, s in enumerate(self.steps, start=1)]
        lines.append(f"Final answer: {self.final_answer}")
        return "\n".join(lines)


@dataclass(frozen=True)
class CaseRecord:
    """A task instance with its ground truth.

    ``answer_format`` is ``"closed"`` (normalized exact match against
    ``gold_answer``) or ``"open"`` (provider-judged match).
    """

    case_id: str
    prompt: str
    gold_answer: str
    task_type: str
    answer_format: str = "closed"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.answer_format not in ("closed", "open"):
            raise ValueError(f"case {self.case_id!r}: answer_format must be 'closed' or 'open'")

    @classmethod
    def from_dict(cls, d: dict) -> CaseRecord:
        return cls(
            case_id=str(d["case_id"]),
            prompt=d["prompt"],
            gold_answer=d["gold_answer"],
            task_type=d.get("task_type", "general"),
            answer_format=d.get("answer_format", "closed"),
        )


def load_cases(items: list[dict]) -> list[CaseRecord]:
    cases = [CaseRecord.from_dict(d) for d in items]
    seen: set[str] = set()
    for c in cases:
        if c.case_id in seen:
            raise ValueError(f"duplicate case_id {c.case_id!r}")
        seen.add(c.case_id)
    return cases
