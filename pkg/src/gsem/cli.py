"""Command-line entry point: ``gsem build|retrieve|episode|simulate|stats|export|replay``.

Exit status: 0 on success, 2 for usage, configuration or data errors,
3 when a model provider fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, EngineConfig, load_config
from .construction import BuildError, build_memory
from .episode import EpisodeStageError, append_record, read_log, replay, run_episode
from .export import entity_dot, experience_dot, stats_json
from .graph import GraphError, MemoryGraph, read_snapshot, save_snapshot, write_snapshot_atomic
from .model import load_cases
from .providers import ProviderError
from .retrieval import LLMPolicy, RetrievalError, make_greedy, retrieve
from .similarity import EdgeBuildAborted
from .simulate import SyntheticScenario, run_simulation

log = logging.getLogger("gsem")

EXIT_OK = 0
EXIT_DATA = 2
EXIT_PROVIDER = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA) -> None:
        super().__init__(message)
        self.code = code


def _read_text(path: str, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _load_records(path: str, what: str) -> list:
    text = _read_text(path, what)
    try:
        if path.endswith(".jsonl"):
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        data = json.loads(text)
    except ValueError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}") from None
    return data if isinstance(data, list) else [data]


def _cases(path: str):
    try:
        return load_cases(_load_records(path, "dataset"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"bad case record in {path}: {exc}") from None


def _snapshot(path: str) -> MemoryGraph:
    try:
        return read_snapshot(path)
    except OSError as exc:
        raise CliError(f"cannot read snapshot {path}: {exc.strerror or exc}") from None
    except GraphError as exc:
        raise CliError(f"{path}: {exc}") from None


def _embedder(cfg: EngineConfig):
    emb = cfg.provider("embedding").embedder()
    if emb is None:
        raise CliError("no embedding provider configured (providers.embedding)")
    return emb


def _chat(cfg: EngineConfig, role: str, required: bool = True):
    chat = cfg.provider(role).chat()
    if chat is None and required:
        raise CliError(f"no chat provider configured for providers.{role}")
    return chat


def _policy(cfg: EngineConfig, name: str):
    if name == "greedy":
        return make_greedy(cfg.retrieval.collect_threshold)
    chat = _chat(cfg, "retrieval_policy", required=False)
    if chat is None:
        raise CliError("--policy llm needs providers.retrieval_policy to be configured")
    return LLMPolicy(chat, cfg.retrieval.collect_threshold)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# --- commands ----------------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    cases = _cases(args.dataset)
    if not cases:
        raise CliError(f"dataset {args.dataset} has no cases")
    generation = _chat(cfg, "generation")
    judge = _chat(cfg, "judge", required=False) or generation
    g, report = build_memory(cases, generation, _embedder(cfg), cfg.construction, judge=judge)
    write_snapshot_atomic(g, args.out)
    summary = json.dumps(report.summary(g), indent=1, sort_keys=True) + "\n"
    _write(args.report, summary)
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    g = _snapshot(args.snapshot)
    if len(g) == 0:
        raise CliError("empty memory")
    policy = _policy(cfg, args.policy)
    chat = _chat(cfg, "retrieval_policy", required=False)
    _, trace = retrieve(g, args.query, chat, _embedder(cfg), cfg.retrieval, policy)
    _write(args.out, trace.to_json())
    return EXIT_OK


def cmd_episode(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    g = _snapshot(args.snapshot)
    cases = _cases(args.case)
    answerer = _chat(cfg, "generation")
    judge = _chat(cfg, "judge", required=False) or answerer
    policy = _policy(cfg, args.policy)
    chat = _chat(cfg, "retrieval_policy", required=False)
    embed = _embedder(cfg)
    records = []
    for case in cases:
        try:
            rec, _, _ = run_episode(
                g, case, answerer=answerer, policy_chat=chat, embed=embed, judge=judge,
                retrieval_cfg=cfg.retrieval, evolution_cfg=cfg.evolution, policy=policy,
                master_seed=cfg.master_seed, retries=cfg.construction.retries,
            )
        except EpisodeStageError as exc:
            code = EXIT_PROVIDER if isinstance(exc.cause, ProviderError) else EXIT_DATA
            raise CliError(f"episode {case.case_id}: stage {exc}", code) from None
        records.append(rec)
    write_snapshot_atomic(g, args.snapshot)
    for rec in records:
        append_record(args.log, rec)
        sys.stdout.write(rec.to_json() + "\n")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    scenario = {}
    if args.scenario:
        try:
            scenario = yaml.safe_load(_read_text(args.scenario, "scenario")) or {}
        except yaml.YAMLError as exc:
            raise CliError(f"scenario {args.scenario} is not valid YAML/JSON: {exc}") from None
        if not isinstance(scenario, dict):
            raise CliError(f"scenario {args.scenario} must be a mapping")
    if args.seed is not None:
        scenario["rng_seed"] = args.seed
    try:
        sc = SyntheticScenario.from_dict(scenario)
        res = run_simulation(
            sc, cfg.retrieval, cfg.evolution, cfg.similarity_weights, cfg.construction.theta_edge
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid scenario: {exc}") from None
    _write(args.out, res.to_csv())
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    _write(args.out, stats_json(_snapshot(args.snapshot)))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    if args.format != "dot":
        raise CliError(f"unknown export format {args.format!r} (supported: dot)")
    g = _snapshot(args.snapshot)
    if args.layer == "entity":
        if not args.id:
            raise CliError("--layer entity needs --id")
        if args.id not in g.nodes:
            raise CliError(f"unknown experience id {args.id!r}")
        text = entity_dot(g, args.id)
    else:
        text = experience_dot(g)
    _write(args.out, text)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    g = _snapshot(args.snapshot)
    try:
        records = read_log(args.log)
    except OSError as exc:
        raise CliError(f"cannot read episode log {args.log}: {exc.strerror or exc}") from None
    try:
        replay(g, records)
    except (ValueError, KeyError) as exc:
        raise CliError(f"replay failed: {exc}") from None
    _write(args.out, save_snapshot(g))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsem", description="Experience memory graph engine")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a memory snapshot from historical cases")
    b.add_argument("--dataset", required=True, help="cases as a JSON array or JSON lines")
    b.add_argument("--config", help="engine config (YAML or JSON)")
    b.add_argument("--out", required=True, help="snapshot path to write")
    b.add_argument("--report", help="build report path (default: stdout)")
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("retrieve", help="retrieve experiences for a query and print the trace")
    r.add_argument("--snapshot", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--config")
    r.add_argument("--policy", choices=("greedy", "llm"), default="greedy")
    r.add_argument("--out", help="trace path (default: stdout)")
    r.set_defaults(func=cmd_retrieve)

    e = sub.add_parser("episode", help="retrieve, answer, judge and evolve; rewrites the snapshot")
    e.add_argument("--snapshot", required=True)
    e.add_argument("--case", required=True, help="one case object, an array, or JSON lines")
    e.add_argument("--config")
    e.add_argument("--log", required=True, help="episode log (JSON lines, appended)")
    e.add_argument("--policy", choices=("greedy", "llm"), default="greedy")
    e.set_defaults(func=cmd_episode)

    s = sub.add_parser("simulate", help="run the synthetic evolution simulator")
    s.add_argument("--scenario", help="scenario overrides (YAML or JSON)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="override the scenario rng_seed")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_simulate)

    st = sub.add_parser("stats", help="counts and histograms of a snapshot")
    st.add_argument("--snapshot", required=True)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    x = sub.add_parser("export", help="GraphViz export of a snapshot")
    x.add_argument("--snapshot", required=True)
    x.add_argument("--format", default="dot")
    x.add_argument("--layer", choices=("experience", "entity"), default="experience")
    x.add_argument("--id", help="experience id for --layer entity")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    rp = sub.add_parser("replay", help="re-apply an episode log to a snapshot")
    rp.add_argument("--snapshot", required=True, help="starting snapshot")
    rp.add_argument("--log", required=True)
    rp.add_argument("--out", help="resulting snapshot (default: stdout)")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_DATA
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"gsem {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"gsem {args.command}: invalid config: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EdgeBuildAborted as exc:
        print(f"gsem {args.command}: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except ProviderError as exc:
        print(f"gsem {args.command}: provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (BuildError, RetrievalError, GraphError, ValueError) as exc:
        print(f"gsem {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
