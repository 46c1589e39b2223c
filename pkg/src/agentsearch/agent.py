"""ReAct episode driver: agent chat, action parsing, tool execution.

The agent may act through structured tool calls or through inline
``<search>``/``<visit>``/``<answer>`` tags; tags are the fallback so plain
text-completion backends work unchanged. Observations are fed back as user
messages, and every search observation is produced fresh by the bound
retriever in the same turn — nothing is cached across turns.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

from .backends import BackendError, ChatBackend, ChatMessage, Decoding, Embedder, chat_request
from .composer import (
    CompositionConfig,
    MissingGlobalQuestion,
    MissingObservation,
    MissingReasoning,
    NotSearchTurn,
    compose,
)
from .model import (
    Action,
    Answer,
    Corpus,
    QAExample,
    RetrievalResult,
    Search,
    Trajectory,
    Transformation,
    Turn,
    Visit,
)
from .retrieval import (
    Bm25Index,
    DEFAULT_SNIPPET_TOKENS,
    DenseIndex,
    attach_snippets,
    search_bm25,
    search_dense,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 60
DEFAULT_TOP_K = 5
VISIT_CHAR_CAP = 40_000


class UnparseableAction(Exception):
    pass


def tool_schema(search: bool = True, visit: bool = False) -> tuple[dict, ...]:
    """OpenAI-style declarations for the enabled tools plus answer."""
    defs = []
    if search:
        defs.append(_tool("search", "Search the corpus for documents relevant to a query.",
                          {"query": "the search query"}))
    if visit:
        defs.append(_tool("visit", "Open the full text of a document by its id.",
                          {"doc_id": "the id of the document to open"}))
    defs.append(_tool("answer", "Give the final answer and end the episode.",
                      {"text": "the final answer"}))
    return tuple(defs)


def _tool(name: str, description: str, params: dict[str, str]) -> dict:
    return {
        "type": "function",
        "function": {
            "name": name,
            "description": description,
            "parameters": {
                "type": "object",
                "properties": {k: {"type": "string", "description": v} for k, v in params.items()},
                "required": list(params),
            },
        },
    }


def default_system_prompt(search: bool = True, visit: bool = False) -> str:
    lines = [
        "You are a research agent answering a question by searching a document corpus.",
        "Think step by step before each action. Then act with exactly one of:",
        "<search>your query</search> to run a search",
    ]
    if visit:
        lines.append("<visit>document id</visit> to open a document's full text")
    lines.append("<answer>your final answer</answer> to finish")
    return "\n".join(lines)


_TAG_RE = re.compile(r"<(search|visit|answer)>(.*?)</\1>", re.DOTALL)


def parse_action(message: ChatMessage) -> tuple[str, Action]:
    """Split an assistant message into (reasoning, action).

    Structured tool calls win; otherwise the first action tag is used and the
    text before it becomes the reasoning.
    """
    if message.tool_calls:
        call = message.tool_calls[0]
        reasoning = message.content.strip()
        args = call.arguments
        try:
            if call.name == "search":
                return reasoning, Search(str(args.get("query", "")))
            if call.name == "visit":
                return reasoning, Visit(str(args.get("doc_id", "")))
            if call.name == "answer":
                return reasoning, Answer(str(args.get("text", "")))
        except ValueError as exc:
            raise UnparseableAction(str(exc)) from exc
        raise UnparseableAction(f"unknown tool: {call.name!r}")

    m = _TAG_RE.search(message.content)
    if not m:
        raise UnparseableAction("no tool call and no action tag in message")
    reasoning = message.content[: m.start()].strip()
    payload = m.group(2).strip()
    try:
        if m.group(1) == "search":
            return reasoning, Search(payload)
        if m.group(1) == "visit":
            return reasoning, Visit(payload)
        return reasoning, Answer(payload)
    except ValueError as exc:
        raise UnparseableAction(str(exc)) from exc


class SearchBinding(Protocol):
    """What an episode needs from its retriever side."""

    def search(self, qa: QAExample, history: tuple[Turn, ...]) -> list[RetrievalResult]: ...

    def visit(self, doc_id: str) -> str: ...


@dataclass
class RetrieverBinding:
    """Index + composition config + snippet policy, bound into one searcher.

    Exactly one of ``dense_index``/``bm25_index`` must be set. BM25 searches
    the composed *body* (instructions would pollute term statistics).
    """

    corpus: Corpus
    config: CompositionConfig
    dense_index: DenseIndex | None = None
    embedder: Embedder | None = None
    bm25_index: Bm25Index | None = None
    top_k: int = DEFAULT_TOP_K
    snippet_tokens: int = DEFAULT_SNIPPET_TOKENS
    visit_char_cap: int = VISIT_CHAR_CAP

    def __post_init__(self):
        if (self.dense_index is None) == (self.bm25_index is None):
            raise ValueError("set exactly one of dense_index or bm25_index")
        if self.dense_index is not None and self.embedder is None:
            raise ValueError("dense retrieval needs an embedder")

    def _config_for(self, qa: QAExample) -> CompositionConfig:
        if self.config.transformation is Transformation.GLOBAL_QUESTION:
            return replace(self.config, global_question=qa.question)
        return self.config

    def search_k(self, qa: QAExample, history: tuple[Turn, ...], k: int) -> list[RetrievalResult]:
        composed = compose(history, self._config_for(qa))
        if self.dense_index is not None:
            results = search_dense(self.dense_index, composed, self.embedder, k)
        else:
            results = search_bm25(self.bm25_index, composed.body, k)
        return attach_snippets(results, self.corpus, self.snippet_tokens)

    def search(self, qa: QAExample, history: tuple[Turn, ...]) -> list[RetrievalResult]:
        return self.search_k(qa, history, self.top_k)

    def visit(self, doc_id: str) -> str:
        return self.corpus.get(doc_id).text[: self.visit_char_cap]


def render_search_observation(results: Sequence[RetrievalResult]) -> str:
    lines = [f"Found {len(results)} results:"]
    for i, r in enumerate(results, start=1):
        lines.append(f"[{i}] (id: {r.doc_id}) {r.snippet}")
    return "\n\n".join(lines)


_CORRECTIVE = (
    "Your last message contained no valid action. Reply with exactly one of "
    "<search>query</search>, <visit>doc id</visit> or <answer>final answer</answer>."
)


def run_episode(qa: QAExample, agent: ChatBackend, binding: SearchBinding, *,
                search_tool: bool = True, visit_tool: bool = False,
                max_turns: int = DEFAULT_MAX_TURNS,
                decoding: Decoding = Decoding(temperature=0.6),
                agent_tag: str = "", retriever_tag: str = "",
                system_prompt: str | None = None) -> Trajectory:
    """Run one ReAct episode; never raises on backend trouble.

    A turn whose message cannot be parsed (or names a disabled tool) is a
    no-op: it consumes one turn of the cap, the agent is re-prompted once,
    and a second consecutive failure aborts the episode with a failure tag.
    Backend outages likewise end the episode as a truncated trajectory.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    schema = tool_schema(search_tool, visit_tool)
    messages: list[dict] = [
        {"role": "system", "content": system_prompt or default_system_prompt(search_tool, visit_tool)},
        {"role": "user", "content": qa.question},
    ]
    turns: list[Turn] = []
    final_answer: str | None = None
    failure: str | None = None
    reprompted = False

    for _ in range(max_turns):
        try:
            msg = agent.chat(chat_request(messages, decoding, schema))
        except BackendError as exc:
            failure = f"backend: {exc}"
            break
        messages.append({"role": "assistant", "content": msg.content})

        try:
            reasoning, action = parse_action(msg)
            if isinstance(action, Search) and not search_tool:
                raise UnparseableAction("search tool is disabled")
            if isinstance(action, Visit) and not visit_tool:
                raise UnparseableAction("visit tool is disabled")
        except UnparseableAction as exc:
            if reprompted:
                failure = f"unparseable action after re-prompt: {exc}"
                break
            reprompted = True
            messages.append({"role": "user", "content": _CORRECTIVE})
            continue
        reprompted = False

        index = len(turns) + 1
        if isinstance(action, Answer):
            turns.append(Turn(index=index, reasoning=reasoning, action=action))
            final_answer = action.text
            break
        if isinstance(action, Search):
            pending = Turn(index=index, reasoning=reasoning, action=action)
            try:
                results = binding.search(qa, tuple(turns) + (pending,))
            except BackendError as exc:
                failure = f"backend: {exc}"
                break
            except (MissingReasoning, MissingGlobalQuestion, MissingObservation,
                    NotSearchTurn) as exc:
                failure = f"compose: {exc}"
                break
            turns.append(replace(pending, observation=tuple(results)))
            messages.append({"role": "user", "content": render_search_observation(results)})
        else:
            try:
                text = binding.visit(action.doc_id)
            except KeyError:
                text = f"No document found with id {action.doc_id!r}."
            turns.append(Turn(index=index, reasoning=reasoning, action=action, observation=text))
            messages.append({"role": "user", "content": text})

    return Trajectory(
        qa_id=qa.id,
        turns=tuple(turns),
        final_answer=final_answer,
        success=None,
        agent_tag=agent_tag,
        retriever_tag=retriever_tag,
        failure=failure,
    )


AgentFactory = Callable[[QAExample], ChatBackend]


def run_episodes(qas: Sequence[QAExample], agent_factory: AgentFactory,
                 binding: SearchBinding, *, workers: int = 4,
                 **episode_kwargs) -> list[Trajectory]:
    """Run independent episodes, up to ``workers`` at a time, preserving order."""
    if workers <= 1:
        return [run_episode(qa, agent_factory(qa), binding, **episode_kwargs) for qa in qas]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_episode, qa, agent_factory(qa), binding, **episode_kwargs)
                   for qa in qas]
        return [f.result() for f in futures]
