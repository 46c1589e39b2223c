"""Training-data synthesis via rollout-coupled oracle reranking.

For every search turn of a rollout: take the query-only retriever's top-50,
prepend the example's evidence documents (file order, deduplicated by id),
have an answer-aware LLM rank the pool listwise, then label rank 1 as the
positive and the bottom seven as hard negatives. The top five ranked
documents flow back to the agent as that turn's observation, so labeling and
rollout share one pass.

Also hosts the plain listwise reranker (no question/answer shown) used as a
retrieval baseline.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

from .agent import RetrieverBinding, run_episode
from .backends import ChatBackend, Decoding, chat_request
from .composer import fill, load_template
from .evaluation import JudgeUnavailable, judge_accuracy
from .model import (
    Corpus,
    Document,
    QAExample,
    RetrievalResult,
    TrainingInstance,
    Trajectory,
    Transformation,
    Turn,
    read_jsonl,
    validate_training_instance,
    write_jsonl,
)
from .retrieval import DEFAULT_SNIPPET_TOKENS, snippet

logger = logging.getLogger(__name__)

POOL_RETRIEVAL_K = 50
RERANK_TOP_N = 20
MIN_POOL_FOR_INSTANCE = 8  # 1 positive + 7 hard negatives


class ParsedRanking(NamedTuple):
    order: tuple[int, ...]
    fallback: bool  # True when no usable ids were found and identity was substituted


_BRACKETED_INT_RE = re.compile(r"\[(\d+)\]")


def parse_ranking(text: str, n: int) -> ParsedRanking:
    """Recover a permutation of 1..n from listwise-ranking model output.

    Bracketed integers are read left to right; out-of-range ids are dropped,
    repeats keep their first occurrence, and missing ids are appended in
    ascending order. If nothing usable is found the identity order is
    returned with the fallback flag set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: list[int] = []
    have: set[int] = set()
    for m in _BRACKETED_INT_RE.finditer(text):
        i = int(m.group(1))
        if 1 <= i <= n and i not in have:
            seen.append(i)
            have.add(i)
    if not seen:
        return ParsedRanking(tuple(range(1, n + 1)), fallback=True)
    seen.extend(i for i in range(1, n + 1) if i not in have)
    return ParsedRanking(tuple(seen), fallback=False)


def _passage_block(texts: Sequence[str]) -> str:
    return "\n".join(f"[{i}]: {t}" for i, t in enumerate(texts, start=1))


def render_oracle_rerank_prompt(passages: Sequence[str], query: str,
                                question: str, answer: str) -> tuple[str, str]:
    tpl = load_template("oracle_rerank")
    user = fill(tpl["user"], question=question, correct_answer=answer, query=query,
                num=str(len(passages)), passages=_passage_block(passages))
    return tpl["system"], user


def oracle_rerank(candidates: Sequence[Document], query: str, question: str,
                  answer: str, llm: ChatBackend, *,
                  snippet_tokens: int = DEFAULT_SNIPPET_TOKENS,
                  decoding: Decoding = Decoding(temperature=0.0)) -> ParsedRanking:
    """Answer-aware listwise ranking of the candidate pool.

    Returns 1-based candidate indices, best first. Candidates are rendered as
    snippets under the same token budget the agent sees.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    passages = [snippet(d, snippet_tokens) for d in candidates]
    system, user = render_oracle_rerank_prompt(passages, query, question, answer)
    reply = llm.chat(chat_request(
        [{"role": "system", "content": system}, {"role": "user", "content": user}],
        decoding,
    ))
    ranking = parse_ranking(reply.content, len(candidates))
    if ranking.fallback:
        logger.warning("oracle produced no usable ranking; identity order used")
    return ranking


def render_listwise_rerank_prompt(passages: Sequence[str], query: str) -> tuple[str, str]:
    tpl = load_template("listwise_rerank")
    user = fill(tpl["user"], query=query, num=str(len(passages)),
                passages=_passage_block(passages))
    return tpl["system"], user


def listwise_rerank(candidates: Sequence[Document], query: str, llm: ChatBackend,
                    top_n: int = RERANK_TOP_N, *,
                    snippet_tokens: int = DEFAULT_SNIPPET_TOKENS,
                    decoding: Decoding = Decoding(temperature=0.0)) -> list[Document]:
    """Plain listwise rerank (no answer shown) of the first ``top_n`` candidates.

    The tail beyond ``top_n`` is returned untouched.
    """
    head = list(candidates[:top_n])
    tail = list(candidates[top_n:])
    if len(head) <= 1:
        return head + tail
    passages = [snippet(d, snippet_tokens) for d in head]
    system, user = render_listwise_rerank_prompt(passages, query)
    reply = llm.chat(chat_request(
        [{"role": "system", "content": system}, {"role": "user", "content": user}],
        decoding,
    ))
    ranking = parse_ranking(reply.content, len(head))
    return [head[i - 1] for i in ranking.order] + tail


def candidate_pool(evidence_docs: Sequence[Document],
                   retrieved: Sequence[Document]) -> list[Document]:
    """Evidence first (file order), then retrieved docs, deduplicated by id."""
    pool: list[Document] = []
    seen: set[str] = set()
    for doc in list(evidence_docs) + list(retrieved):
        if doc.id not in seen:
            pool.append(doc)
            seen.add(doc.id)
    return pool


@dataclass
class SynthesisResult:
    trajectory: Trajectory
    instances: list[TrainingInstance]
    skipped_turns: list[int]
    oracle_fallbacks: int = 0


class _SynthBinding:
    """Search binding that runs the oracle labeling pipeline at every search turn."""

    def __init__(self, base: RetrieverBinding, oracle: ChatBackend, corpus: Corpus,
                 pool_k: int = POOL_RETRIEVAL_K, top_k: int | None = None):
        if base.config.transformation is not Transformation.NONE:
            raise ValueError("synthesis retrieves with the query-only transformation")
        self.base = base
        self.oracle = oracle
        self.corpus = corpus
        self.pool_k = pool_k
        self.top_k = top_k if top_k is not None else base.top_k
        self.instances: list[TrainingInstance] = []
        self.skipped_turns: list[int] = []
        self.oracle_fallbacks = 0

    def search(self, qa: QAExample, history: tuple[Turn, ...]) -> list[RetrievalResult]:
        current = history[-1]
        query = current.action.query  # type: ignore[union-attr]
        retrieved = self.base.search_k(qa, history, self.pool_k)
        evidence_docs = [self.corpus.get(i) for i in qa.evidence if i in self.corpus]
        retrieved_docs = [self.corpus.get(r.doc_id) for r in retrieved]
        pool = candidate_pool(evidence_docs, retrieved_docs)

        ranking = oracle_rerank(pool, query, qa.question, qa.answer, self.oracle,
                                snippet_tokens=self.base.snippet_tokens)
        if ranking.fallback:
            self.oracle_fallbacks += 1
        ranked = [pool[i - 1] for i in ranking.order]

        if len(pool) >= MIN_POOL_FOR_INSTANCE:
            self.instances.append(TrainingInstance(
                reasoning=current.reasoning,
                query=query,
                positive=ranked[0],
                negatives=tuple(ranked[-7:]),
                qa_id=qa.id,
                turn_index=current.index,
            ))
        else:
            logger.warning("qa %s turn %d: pool of %d is too small for an instance",
                           qa.id, current.index, len(pool))
            self.skipped_turns.append(current.index)

        top = ranked[: self.top_k]
        return [
            RetrievalResult(doc_id=d.id, score=1.0 / rank,
                            snippet=snippet(d, self.base.snippet_tokens))
            for rank, d in enumerate(top, start=1)
        ]

    def visit(self, doc_id: str) -> str:
        return self.base.visit(doc_id)


def synthesize(qa: QAExample, agent: ChatBackend, retriever: RetrieverBinding,
               oracle: ChatBackend, corpus: Corpus, *,
               pool_k: int = POOL_RETRIEVAL_K,
               **episode_kwargs) -> SynthesisResult:
    """One rollout with per-turn oracle labeling; returns trajectory + instances."""
    binding = _SynthBinding(retriever, oracle, corpus, pool_k=pool_k)
    trajectory = run_episode(qa, agent, binding, **episode_kwargs)
    return SynthesisResult(
        trajectory=trajectory,
        instances=binding.instances,
        skipped_turns=binding.skipped_turns,
        oracle_fallbacks=binding.oracle_fallbacks,
    )


def rejection_filter(results: Sequence[SynthesisResult],
                     qa_set: Sequence[QAExample], judge=None) -> list[SynthesisResult]:
    """Keep only rollouts whose final answer the judge accepts.

    Rollouts without a final answer are dropped outright; judge outages mark
    the rollout unjudged and it is excluded (logged, never crashes).
    """
    qa_map = {qa.id: qa for qa in qa_set}
    kept = []
    for res in results:
        traj = res.trajectory
        if traj.final_answer is None:
            continue
        qa = qa_map[traj.qa_id]
        try:
            accepted = judge_accuracy(traj.final_answer, qa, judge)
        except JudgeUnavailable as exc:
            logger.warning("qa %s left unjudged and excluded: %s", qa.id, exc)
            continue
        if accepted:
            kept.append(replace(res, trajectory=replace(traj, success=True)))
    return kept


def export_dataset(instances: Sequence[TrainingInstance], path: str | Path,
                   header: dict | None = None) -> int:
    """Write instances as newline-delimited JSON; invalid rows abort the export."""
    problems: list[str] = []
    for inst in instances:
        problems.extend(validate_training_instance(inst))
    if problems:
        raise ValueError("invalid training instances: " + "; ".join(problems))
    return write_jsonl(path, (inst.to_dict() for inst in instances), header=header)


def load_dataset(path: str | Path) -> list[TrainingInstance]:
    return [TrainingInstance.from_dict(obj) for obj in read_jsonl(path)]


def synthesis_stats(results: Sequence[SynthesisResult],
                    kept: Sequence[SynthesisResult]) -> dict:
    """The stats sidecar written next to an exported dataset."""
    instances = sum(len(r.instances) for r in kept)
    return {
        "trajectories_run": len(results),
        "kept": len(kept),
        "instances": instances,
        "mean_instances_per_trajectory": instances / len(kept) if kept else 0.0,
    }


@dataclass
class RerankingBinding:
    """Retrieval baseline: first-stage retrieve, then plain listwise rerank.

    Retrieves ``depth`` candidates, reranks the first ``top_n`` with the LLM,
    and returns the binding's usual top-k as snippets.
    """

    base: RetrieverBinding
    llm: ChatBackend
    top_n: int = RERANK_TOP_N
    depth: int = RERANK_TOP_N

    def search(self, qa: QAExample, history: tuple[Turn, ...]) -> list[RetrievalResult]:
        current = history[-1]
        query = current.action.query  # type: ignore[union-attr]
        retrieved = self.base.search_k(qa, history, self.depth)
        docs = [self.base.corpus.get(r.doc_id) for r in retrieved]
        reranked = listwise_rerank(docs, query, self.llm, self.top_n,
                                   snippet_tokens=self.base.snippet_tokens)
        top = reranked[: self.base.top_k]
        return [
            RetrievalResult(doc_id=d.id, score=1.0 / rank,
                            snippet=snippet(d, self.base.snippet_tokens))
            for rank, d in enumerate(top, start=1)
        ]

    def visit(self, doc_id: str) -> str:
        return self.base.visit(doc_id)
