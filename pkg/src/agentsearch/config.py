"""Layered run configuration and backend construction.

Precedence: built-in defaults < config file < environment < command-line
flags. The fully resolved mapping is embedded as the header line of every
output file so a run can be reproduced from its artifacts.

Defaults are offline-first: stub embedder, identity-order reranker, exact-
match judge. Live OpenAI-compatible endpoints are opted into per backend in
the config file; secrets come only from the environment.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .agent import RetrieverBinding
from .backends import (
    ChatBackend,
    EndpointConfig,
    IdentityRankingBackend,
    OpenAIChatClient,
    OpenAIEmbeddingClient,
    ScriptedChatBackend,
    StubEmbedder,
    load_script_file,
    scripted_message_from_dict,
)
from .composer import CompositionConfig
from .evaluation import ExactMatchJudge, LlmJudge
from .model import Corpus, QAExample, Transformation

DEFAULT_API_KEY_ENV = "AGENTSEARCH_API_KEY"

DEFAULTS: dict = {
    "seed": 0,
    "workers": 4,
    "deterministic": False,
    "backends": {
        "agent": {"kind": "scripted", "path": None, "temperature": 0.6},
        "embedder": {"kind": "stub", "dim": 64, "seed": None},
        "oracle": {"kind": "identity", "temperature": 0.0},
        "judge": {"kind": "exact", "temperature": 0.0},
        "analysis": {"kind": "scripted", "path": None, "temperature": 0.0},
    },
    "retriever": {
        "kind": "dense",
        "top_k": 5,
        "snippet_tokens": 512,
        "rerank": {"enabled": False, "top_n": 20},
    },
    "composer": {
        "transformation": "current_reasoning",
        "window_k": None,
        "history_token_budget": 8192,
    },
    "agent": {"max_turns": 60, "search_tool": True, "visit_tool": False},
    "synth": {"pool_k": 50},
    "index": {"k1": 1.2, "b": 0.75},
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def resolve(file_path: str | Path | None = None, flag_overrides: dict | None = None) -> dict:
    """Defaults, then file, then flags. Deterministic mode forces one worker."""
    cfg = merge(DEFAULTS, load_config_file(file_path))
    if flag_overrides:
        cfg = merge(cfg, flag_overrides)
    if cfg.get("deterministic"):
        cfg["workers"] = 1
    return cfg


def _endpoint(section: dict) -> EndpointConfig:
    for required in ("base_url", "model"):
        if not section.get(required):
            raise ConfigError(f"openai backend needs {required!r}")
    return EndpointConfig(
        base_url=section["base_url"],
        model=section["model"],
        api_key=section.get("api_key", ""),
        api_key_env=section.get("api_key_env", DEFAULT_API_KEY_ENV),
        timeout_s=float(section.get("timeout_s", 60.0)),
        max_attempts=int(section.get("max_attempts", 4)),
        backoff_initial_s=float(section.get("backoff_initial_s", 0.5)),
        max_in_flight=int(section.get("max_in_flight", 8)),
    )


def build_embedder(cfg: dict):
    section = cfg["backends"]["embedder"]
    if section["kind"] == "stub":
        seed = section.get("seed")
        return StubEmbedder(dim=int(section.get("dim", 64)),
                            seed=int(cfg["seed"] if seed is None else seed))
    if section["kind"] == "openai":
        return OpenAIEmbeddingClient(_endpoint(section))
    raise ConfigError(f"unknown embedder kind: {section['kind']!r}")


def build_chat_backend(section: dict) -> ChatBackend:
    """One shared chat backend for oracle/judge/analysis roles."""
    kind = section.get("kind")
    if kind == "identity":
        return IdentityRankingBackend()
    if kind == "scripted":
        if not section.get("path"):
            raise ConfigError("scripted backend needs a script path")
        raw = json.loads(Path(section["path"]).read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ConfigError("a flat scripted backend file must hold a JSON list")
        return ScriptedChatBackend([scripted_message_from_dict(m) for m in raw])
    if kind == "openai":
        return OpenAIChatClient(_endpoint(section))
    raise ConfigError(f"unknown chat backend kind: {kind!r}")


def build_agent_factory(cfg: dict):
    """Per-example agent construction (scripted agents replay per qa id)."""
    section = cfg["backends"]["agent"]
    kind = section.get("kind")
    if kind == "scripted":
        if not section.get("path"):
            raise ConfigError("scripted agent needs a script path")
        scripts = load_script_file(section["path"])

        def factory(qa: QAExample) -> ChatBackend:
            if qa.id not in scripts:
                raise ConfigError(f"no script for qa id {qa.id!r}")
            return ScriptedChatBackend(scripts[qa.id])

        return factory
    if kind == "openai":
        client = OpenAIChatClient(_endpoint(section))
        return lambda qa: client
    raise ConfigError(f"unknown agent kind: {kind!r}")


def build_judge(cfg: dict):
    section = cfg["backends"]["judge"]
    if section["kind"] == "exact":
        return ExactMatchJudge()
    if section["kind"] == "openai":
        template = section.get("template", "judge_default")
        return LlmJudge(OpenAIChatClient(_endpoint(section)), template_name=template)
    raise ConfigError(f"unknown judge kind: {section['kind']!r}")


def build_composition(cfg: dict) -> CompositionConfig:
    section = cfg["composer"]
    window_k = section.get("window_k")
    if isinstance(window_k, str) and window_k != "all":
        window_k = int(window_k)
    try:
        transformation = Transformation(section["transformation"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return CompositionConfig(
        transformation=transformation,
        window_k=window_k,
        history_token_budget=int(section.get("history_token_budget", 8192)),
    )


def build_binding(cfg: dict, corpus: Corpus, index_dir: str | Path,
                  composition: CompositionConfig | None = None):
    """Load the configured index from disk and wrap it into a search binding."""
    from .retrieval import load_bm25, load_dense
    from .synth import RerankingBinding

    section = cfg["retriever"]
    composition = composition or build_composition(cfg)
    kind = section["kind"]
    if kind == "dense":
        binding = RetrieverBinding(
            corpus=corpus,
            config=composition,
            dense_index=load_dense(index_dir, corpus),
            embedder=build_embedder(cfg),
            top_k=int(section.get("top_k", 5)),
            snippet_tokens=int(section.get("snippet_tokens", 512)),
        )
    elif kind == "bm25":
        binding = RetrieverBinding(
            corpus=corpus,
            config=composition,
            bm25_index=load_bm25(index_dir, corpus),
            top_k=int(section.get("top_k", 5)),
            snippet_tokens=int(section.get("snippet_tokens", 512)),
        )
    else:
        raise ConfigError(f"unknown retriever kind: {kind!r}")

    rerank = section.get("rerank", {})
    if rerank.get("enabled"):
        llm = build_chat_backend(cfg["backends"]["oracle"])
        return RerankingBinding(base=binding, llm=llm,
                                top_n=int(rerank.get("top_n", 20)),
                                depth=int(rerank.get("depth", rerank.get("top_n", 20))))
    return binding
