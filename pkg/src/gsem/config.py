"""Engine configuration: one YAML/JSON file with a section per module."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .construction import ConstructionConfig
from .evolution import EvolutionConfig, WeightMode
from .providers import (
    ChatProvider,
    EmbeddingProvider,
    HashEmbedder,
    OpenAIChat,
    OpenAIEmbeddings,
    ProviderConfig,
    ScriptedChat,
)
from .retrieval import RetrievalConfig
from .similarity import SimilarityWeights


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = problems


PROVIDER_KINDS = ("openai", "scripted", "hash", "none")
PROVIDER_ROLES = ("generation", "retrieval_policy", "judge", "embedding")


@dataclass(frozen=True)
class ProviderSpec:
    kind: str = "none"
    endpoint_url: str = ""
    model_name: str = ""
    api_key_env_var: str = "GSEM_API_KEY"
    timeout: float = 60.0
    retry_count: int = 2
    requests_per_second: float | None = None
    dim: int = 64
    script: tuple = ()

    def violations(self, role: str) -> list[str]:
        out = []
        if self.kind not in PROVIDER_KINDS:
            out.append(f"providers.{role}.kind must be one of {', '.join(PROVIDER_KINDS)}")
        if self.kind == "openai" and not (self.endpoint_url and self.model_name):
            out.append(f"providers.{role} (openai) needs endpoint_url and model_name")
        if self.kind == "hash" and role != "embedding":
            out.append(f"providers.{role}: kind 'hash' is only valid for embedding")
        if self.kind == "scripted" and role == "embedding":
            out.append("providers.embedding: kind 'scripted' is only valid for chat roles")
        if self.retry_count < 0:
            out.append(f"providers.{role}.retry_count must be >= 0")
        return out

    def _http(self) -> ProviderConfig:
        return ProviderConfig(
            endpoint_url=self.endpoint_url,
            model_name=self.model_name,
            api_key_env_var=self.api_key_env_var,
            timeout=self.timeout,
            retry_count=self.retry_count,
            requests_per_second=self.requests_per_second,
        )

    def chat(self) -> ChatProvider | None:
        if self.kind == "openai":
            return OpenAIChat(self._http())
        if self.kind == "scripted":
            return ScriptedChat.from_json(list(self.script))
        return None

    def embedder(self) -> EmbeddingProvider | None:
        if self.kind == "openai":
            return OpenAIEmbeddings(self._http())
        if self.kind == "hash":
            return HashEmbedder(self.dim)
        return None


@dataclass(frozen=True)
class EngineConfig:
    construction: ConstructionConfig = field(default_factory=ConstructionConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    similarity_weights: SimilarityWeights = field(default_factory=SimilarityWeights)
    providers: dict[str, ProviderSpec] = field(default_factory=dict)
    master_seed: int = 0

    def provider(self, role: str) -> ProviderSpec:
        return self.providers.get(role, ProviderSpec())

    def violations(self) -> list[str]:
        out = self.construction.violations() + self.retrieval.violations() + self.evolution.violations()
        for role, spec in sorted(self.providers.items()):
            out.extend(spec.violations(role))
        return out


def _section(raw: Any, name: str, cls: type, problems: list[str], skip: tuple[str, ...] = ()) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        problems.append(f"{name} must be a mapping")
        return {}
    known = {f.name for f in fields(cls)} - set(skip)
    for key in sorted(set(raw) - known):
        problems.append(f"unknown key {name}.{key}")
    return {k: v for k, v in raw.items() if k in known}


def _build(cls: type, kwargs: dict, name: str, problems: list[str]):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return cls()


def config_from_dict(data: Any, base_dir: Path | None = None) -> EngineConfig:
    """Validate and build an EngineConfig; raises ConfigError listing every problem."""
    problems: list[str] = []
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])
    top = {f.name for f in fields(EngineConfig)}
    for key in sorted(set(data) - top):
        problems.append(f"unknown key {key}")

    weights = _build(
        SimilarityWeights,
        _section(data.get("similarity_weights"), "similarity_weights", SimilarityWeights, problems),
        "similarity_weights",
        problems,
    )
    seed = data.get("master_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("master_seed must be an integer")
        seed = 0
    cons = _build(
        ConstructionConfig,
        _section(data.get("construction"), "construction", ConstructionConfig, problems, ("similarity_weights", "seed")),
        "construction",
        problems,
    )
    cons = replace(cons, similarity_weights=weights, seed=seed)
    retr = _build(RetrievalConfig, _section(data.get("retrieval"), "retrieval", RetrievalConfig, problems), "retrieval", problems)
    evo_kw = _section(data.get("evolution"), "evolution", EvolutionConfig, problems)
    if "weight_mode" in evo_kw and evo_kw["weight_mode"] not in [m.value for m in WeightMode]:
        problems.append(f"evolution.weight_mode must be one of {', '.join(m.value for m in WeightMode)}")
        evo_kw.pop("weight_mode")
    evo = _build(EvolutionConfig, evo_kw, "evolution", problems)

    providers: dict[str, ProviderSpec] = {}
    raw_p = data.get("providers") or {}
    if not isinstance(raw_p, dict):
        problems.append("providers must be a mapping")
        raw_p = {}
    for role in sorted(raw_p):
        if role not in PROVIDER_ROLES:
            problems.append(f"unknown provider role providers.{role}")
            continue
        spec_raw = dict(raw_p[role]) if isinstance(raw_p[role], dict) else raw_p[role]
        script_file = spec_raw.pop("script_file", None) if isinstance(spec_raw, dict) else None
        kw = _section(spec_raw, f"providers.{role}", ProviderSpec, problems)
        if script_file is not None:
            path = Path(script_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                kw["script"] = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                problems.append(f"providers.{role}.script_file: cannot read {path}: {exc}")
        if "script" in kw:
            kw["script"] = tuple(kw["script"])
        providers[role] = _build(ProviderSpec, kw, f"providers.{role}", problems)

    cfg = EngineConfig(cons, retr, evo, weights, providers, seed)
    try:
        problems.extend(cfg.violations())
    except TypeError as exc:
        problems.append(f"a numeric setting has the wrong type ({exc})")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None) -> EngineConfig:
    if path is None:
        return config_from_dict({})
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {p}: {exc.strerror or exc}"]) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config {p} is not valid YAML/JSON: {exc}"]) from None
    return config_from_dict(data, p.parent)
