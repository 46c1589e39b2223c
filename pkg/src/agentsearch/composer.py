"""Turning a trajectory prefix into a retrieval input.

Each transformation selects a different slice of the episode history and
renders it through a versioned template resource (``templates/*.txt``). The
rendered strings are golden-tested byte-for-byte, so template edits are
deliberate acts.

Degenerate windows: a history window that contains only the current turn is
rendered in the single-turn reasoning format, so ``window_k=1`` (or any window
at turn 1) coincides exactly with the current-reasoning transformation, and a
window covering the whole prefix coincides with the full queries-and-
reasonings transformation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .model import ComposedQuery, Search, Transformation, Turn
from .retrieval import WhitespaceTokenizer

_SECTION_RE = re.compile(r"^\[(instruction|query|turn|system|user)\]$")
_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")

TEMPLATE_BY_TRANSFORMATION = {
    Transformation.NONE: "retrieval_none",
    Transformation.CURRENT_REASONING: "retrieval_current_reasoning",
    Transformation.GLOBAL_QUESTION: "retrieval_global_question",
    Transformation.PRIOR_QUERIES: "retrieval_prior_queries",
    Transformation.PRIOR_QUERIES_REASONINGS: "retrieval_prior_queries_reasonings",
    Transformation.PRIOR_QUERIES_REASONINGS_DOCS: "retrieval_prior_queries_reasonings_docs",
    Transformation.WINDOW_K: "retrieval_prior_queries_reasonings",
}


class MissingReasoning(ValueError):
    pass


class MissingGlobalQuestion(ValueError):
    pass


class NotSearchTurn(ValueError):
    pass


class MissingObservation(ValueError):
    pass


@lru_cache(maxsize=None)
def load_template(name: str) -> dict[str, str]:
    """Parse a ``[section]``-structured template resource into its sections."""
    text = resources.files("agentsearch").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            current = sections.setdefault(m.group(1), [])
        elif current is not None:
            current.append(line)
        elif line.strip():
            raise ValueError(f"template {name}: content before first section header")
    return {k: "\n".join(v) for k, v in sections.items()}


def fill(template: str, **values: str) -> str:
    """Substitute ``{name}`` placeholders; unknown names and stray braces pass through."""
    return _PLACEHOLDER_RE.sub(
        lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0),
        template,
    )


@dataclass(frozen=True)
class CompositionConfig:
    """Which transformation to apply and its knobs.

    ``window_k`` accepts any positive int or "all". ``history_token_budget``
    bounds the rendered body of the docs-bearing variant (whitespace tokens);
    whole oldest turns are dropped first and the current query always stays.
    """

    transformation: Transformation = Transformation.CURRENT_REASONING
    window_k: int | str | None = None
    history_token_budget: int = 8192
    global_question: str | None = None

    def __post_init__(self):
        if isinstance(self.window_k, int) and self.window_k < 1:
            raise ValueError("window_k must be a positive integer or 'all'")
        if isinstance(self.window_k, str) and self.window_k != "all":
            raise ValueError("window_k must be a positive integer or 'all'")
        if self.transformation is Transformation.WINDOW_K and self.window_k is None:
            raise ValueError("window_k transformation requires window_k")
        if self.history_token_budget < 1:
            raise ValueError("history_token_budget must be >= 1")


def _search_query(turn: Turn) -> str:
    assert isinstance(turn.action, Search)
    return turn.action.query


def _single_turn_body(reasoning: str, query: str,
                      transformation: Transformation,
                      window_k: int | str | None) -> ComposedQuery:
    tpl = load_template("retrieval_current_reasoning")
    return ComposedQuery(
        instruction=tpl["instruction"],
        body=fill(tpl["query"], reasoning=reasoning, query=query),
        transformation=transformation,
        window_k=window_k,
    )


def _history_body(name: str, entries: Sequence[str], query: str) -> tuple[str, str]:
    tpl = load_template(name)
    history = "".join(entry + "\n\n" for entry in entries)
    return tpl["instruction"], fill(tpl["query"], history=history, query=query)


def compose(history: Sequence[Turn], config: CompositionConfig) -> ComposedQuery:
    """Build the retrieval input for the trajectory prefix ending in a search turn.

    The last turn must carry a Search action (its observation may still be
    pending). History variants render prior *search* turns only; visit turns
    contribute nothing to the browsing-history templates.
    """
    if not history or not isinstance(history[-1].action, Search):
        raise NotSearchTurn("compose requires a prefix ending in a search turn")
    current = history[-1]
    query = _search_query(current)
    prior = [t for t in history[:-1] if isinstance(t.action, Search)]
    t = config.transformation

    if t is Transformation.NONE:
        tpl = load_template("retrieval_none")
        return ComposedQuery(tpl["instruction"], fill(tpl["query"], query=query), t)

    if t is Transformation.CURRENT_REASONING:
        if not current.reasoning:
            raise MissingReasoning(f"turn {current.index} has no reasoning")
        return _single_turn_body(current.reasoning, query, t, None)

    if t is Transformation.GLOBAL_QUESTION:
        if not config.global_question:
            raise MissingGlobalQuestion("global_question transformation needs the question")
        tpl = load_template("retrieval_global_question")
        body = fill(tpl["query"], question=config.global_question, query=query)
        return ComposedQuery(tpl["instruction"], body, t)

    if t is Transformation.PRIOR_QUERIES:
        name = TEMPLATE_BY_TRANSFORMATION[t]
        turn_tpl = load_template(name)["turn"]
        entries = [fill(turn_tpl, index=str(i), query=_search_query(pt))
                   for i, pt in enumerate(prior, start=1)]
        instruction, body = _history_body(name, entries, query)
        return ComposedQuery(instruction, body, t)

    if t is Transformation.PRIOR_QUERIES_REASONINGS:
        if not prior:
            return _single_turn_body(current.reasoning, query, t, None)
        name = TEMPLATE_BY_TRANSFORMATION[t]
        turn_tpl = load_template(name)["turn"]
        entries = [fill(turn_tpl, index=str(i), reasoning=pt.reasoning, query=_search_query(pt))
                   for i, pt in enumerate(prior, start=1)]
        instruction, body = _history_body(name, entries, query)
        return ComposedQuery(instruction, body, t)

    if t is Transformation.PRIOR_QUERIES_REASONINGS_DOCS:
        return _compose_docs(prior, query, config)

    if t is Transformation.WINDOW_K:
        k = config.window_k
        window_prior = prior if k == "all" else prior[max(0, len(prior) - (k - 1)):]
        if not window_prior:
            return _single_turn_body(current.reasoning, query, t, k)
        name = TEMPLATE_BY_TRANSFORMATION[t]
        turn_tpl = load_template(name)["turn"]
        entries = [fill(turn_tpl, index=str(i), reasoning=pt.reasoning, query=_search_query(pt))
                   for i, pt in enumerate(window_prior, start=1)]
        instruction, body = _history_body(name, entries, query)
        return ComposedQuery(instruction, body, t, window_k=k)

    raise ValueError(f"unknown transformation: {t}")


def _docs_entry(turn_tpl: str, index: int, turn: Turn) -> str:
    if turn.observation is None:
        raise MissingObservation(f"turn {turn.index} has no observation")
    results = turn.observation if isinstance(turn.observation, tuple) else ()
    joined = "\n\n".join(r.snippet for r in results)
    return fill(turn_tpl, index=str(index), reasoning=turn.reasoning,
                query=_search_query(turn), count=str(len(results)), results=joined)


def _compose_docs(prior: list[Turn], query: str, config: CompositionConfig) -> ComposedQuery:
    """Docs-bearing history, truncated to the most recent whole turns that fit.

    Kept turns are renumbered from 1. If even the bare header plus current
    query exceeds the budget, that minimal body is returned anyway: the
    current query is never dropped or split.
    """
    name = TEMPLATE_BY_TRANSFORMATION[Transformation.PRIOR_QUERIES_REASONINGS_DOCS]
    turn_tpl = load_template(name)["turn"]
    counter = WhitespaceTokenizer()
    for keep in range(len(prior), -1, -1):
        kept = prior[len(prior) - keep:]
        entries = [_docs_entry(turn_tpl, i, pt) for i, pt in enumerate(kept, start=1)]
        instruction, body = _history_body(name, entries, query)
        if counter.count(body) <= config.history_token_budget or keep == 0:
            return ComposedQuery(instruction, body, Transformation.PRIOR_QUERIES_REASONINGS_DOCS)
    raise AssertionError("unreachable")


def render_retrieval_prompt(composed: ComposedQuery) -> str:
    """Final two-part string handed to the embedding backend.

    The outer ``Query:`` label is deliberate even when the body itself opens
    with a ``Reasoning:``/``Query:`` block; instruction-tuned embedding
    backbones expect the instruction/query framing on every input.
    """
    return f"Instruction: {composed.instruction}\nQuery: {composed.body}"
