"""Core domain types for agentic retrieval runs, plus their JSONL serialization.

Everything here is an immutable value object; instances are safe to share
across worker threads. Construction enforces the structural invariants that
would make downstream code crash (turn ordering, action shapes); content
invariants that callers may legitimately want to *report* instead of raise
(duplicate corpus ids, empty texts) live in the ``validate_*`` functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union


@dataclass(frozen=True)
class Document:
    """One indexable text unit. ``id`` must be unique within a corpus."""

    id: str
    text: str
    title: str | None = None
    url: str | None = None

    def to_dict(self) -> dict:
        obj: dict = {"id": self.id}
        if self.title is not None:
            obj["title"] = self.title
        if self.url is not None:
            obj["url"] = self.url
        obj["text"] = self.text
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "Document":
        return cls(
            id=obj["id"],
            text=obj["text"],
            title=obj.get("title"),
            url=obj.get("url"),
        )


class Corpus:
    """Ordered document collection with id lookup.

    Duplicate ids are tolerated at construction (first occurrence wins in the
    lookup map) so that ``validate_corpus`` can report them instead of the
    constructor blowing up on user-supplied files.
    """

    def __init__(self, documents: Iterable[Document]):
        self._docs: tuple[Document, ...] = tuple(documents)
        by_id: dict[str, Document] = {}
        for doc in self._docs:
            by_id.setdefault(doc.id, doc)
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Corpus) and self._docs == other._docs

    @property
    def documents(self) -> tuple[Document, ...]:
        return self._docs

    def get(self, doc_id: str) -> Document:
        """Return the document with ``doc_id``; KeyError if absent."""
        return self._by_id[doc_id]

    def ids(self) -> list[str]:
        return [d.id for d in self._docs]


def validate_corpus(corpus: Corpus) -> list[str]:
    """Report every Document/Corpus invariant violation; empty list means valid."""
    violations: list[str] = []
    seen: set[str] = set()
    for pos, doc in enumerate(corpus):
        if not doc.id:
            violations.append(f"document at position {pos}: empty id")
        elif doc.id in seen:
            violations.append(f"duplicate id: {doc.id!r}")
        else:
            seen.add(doc.id)
        if not doc.text:
            violations.append(f"document {doc.id!r}: empty text")
    return violations


@dataclass(frozen=True)
class QAExample:
    """A (question, answer, evidence) triple.

    ``evidence`` keeps the file order of the ids: synthesis prepends evidence
    documents to candidate pools in exactly this order.
    """

    id: str
    question: str
    answer: str
    evidence: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "QAExample":
        return cls(
            id=obj["id"],
            question=obj["question"],
            answer=obj["answer"],
            evidence=tuple(obj.get("evidence", ())),
        )


def validate_qa_examples(examples: Sequence[QAExample], corpus: Corpus | None = None) -> list[str]:
    violations: list[str] = []
    seen: set[str] = set()
    for qa in examples:
        if qa.id in seen:
            violations.append(f"duplicate qa id: {qa.id!r}")
        seen.add(qa.id)
        if not qa.answer:
            violations.append(f"qa {qa.id!r}: empty answer")
        if corpus is not None:
            for doc_id in qa.evidence:
                if doc_id not in corpus:
                    violations.append(f"qa {qa.id!r}: evidence id {doc_id!r} not in corpus")
    return violations


@dataclass(frozen=True)
class Search:
    query: str

    def __post_init__(self):
        if not self.query:
            raise ValueError("search query must be non-empty")


@dataclass(frozen=True)
class Visit:
    doc_id: str


@dataclass(frozen=True)
class Answer:
    text: str


Action = Union[Search, Visit, Answer]


def action_to_dict(action: Action) -> dict:
    if isinstance(action, Search):
        return {"type": "search", "query": action.query}
    if isinstance(action, Visit):
        return {"type": "visit", "doc_id": action.doc_id}
    if isinstance(action, Answer):
        return {"type": "answer", "text": action.text}
    raise TypeError(f"not an action: {action!r}")


def action_from_dict(obj: dict) -> Action:
    kind = obj["type"]
    if kind == "search":
        return Search(obj["query"])
    if kind == "visit":
        return Visit(obj["doc_id"])
    if kind == "answer":
        return Answer(obj["text"])
    raise ValueError(f"unknown action type: {kind!r}")


@dataclass(frozen=True)
class RetrievalResult:
    """One retrieved document reference as shown to the agent."""

    doc_id: str
    score: float
    snippet: str

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "score": self.score, "snippet": self.snippet}

    @classmethod
    def from_dict(cls, obj: dict) -> "RetrievalResult":
        return cls(obj["doc_id"], obj["score"], obj["snippet"])


Observation = Union[tuple[RetrievalResult, ...], str, None]


@dataclass(frozen=True)
class Turn:
    """One (reasoning, action, observation) record; indices are 1-based.

    A Search/Visit turn may temporarily carry ``observation=None`` while the
    tool call is still pending inside the episode loop; completed trajectories
    always have observations on tool turns (checked by ``validate_trajectory``
    and guaranteed by the episode runner before a turn is appended).
    """

    index: int
    reasoning: str
    action: Action
    observation: Observation = None

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("turn index must be >= 1")
        if isinstance(self.action, Answer) and self.observation is not None:
            raise ValueError("answer turns carry no observation")
        if isinstance(self.action, Search) and isinstance(self.observation, str):
            raise ValueError("search observations are retrieval results, not text")
        if isinstance(self.action, Visit) and isinstance(self.observation, tuple):
            raise ValueError("visit observations are document text, not results")

    def to_dict(self) -> dict:
        obj: dict = {
            "index": self.index,
            "reasoning": self.reasoning,
            "action": action_to_dict(self.action),
        }
        if isinstance(self.observation, tuple):
            obj["observation"] = [r.to_dict() for r in self.observation]
        else:
            obj["observation"] = self.observation
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "Turn":
        raw = obj.get("observation")
        observation: Observation
        if isinstance(raw, list):
            observation = tuple(RetrievalResult.from_dict(r) for r in raw)
        else:
            observation = raw
        return cls(
            index=obj["index"],
            reasoning=obj["reasoning"],
            action=action_from_dict(obj["action"]),
            observation=observation,
        )


@dataclass(frozen=True)
class Trajectory:
    """Full record of one agent episode over a QA example.

    ``success`` is tri-state: None until a judge has looked at the final
    answer. ``failure`` is set when the episode aborted (backend outage,
    unparseable agent output) and the trajectory is truncated.
    """

    qa_id: str
    turns: tuple[Turn, ...]
    final_answer: str | None = None
    success: bool | None = None
    agent_tag: str = ""
    retriever_tag: str = ""
    failure: str | None = None

    def __post_init__(self):
        for pos, turn in enumerate(self.turns, start=1):
            if turn.index != pos:
                raise ValueError(f"turn indices must be consecutive from 1, got {turn.index} at position {pos}")
        answer_positions = [i for i, t in enumerate(self.turns) if isinstance(t.action, Answer)]
        if len(answer_positions) > 1:
            raise ValueError("at most one answer action per trajectory")
        if answer_positions and answer_positions[0] != len(self.turns) - 1:
            raise ValueError("the answer action must be the last turn")

    @property
    def search_calls(self) -> int:
        return sum(1 for t in self.turns if isinstance(t.action, Search))

    @property
    def visit_calls(self) -> int:
        return sum(1 for t in self.turns if isinstance(t.action, Visit))

    def to_dict(self) -> dict:
        obj: dict = {
            "qa_id": self.qa_id,
            "turns": [t.to_dict() for t in self.turns],
            "final_answer": self.final_answer,
            "success": self.success,
            "agent_tag": self.agent_tag,
            "retriever_tag": self.retriever_tag,
        }
        if self.failure is not None:
            obj["failure"] = self.failure
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "Trajectory":
        return cls(
            qa_id=obj["qa_id"],
            turns=tuple(Turn.from_dict(t) for t in obj["turns"]),
            final_answer=obj.get("final_answer"),
            success=obj.get("success"),
            agent_tag=obj.get("agent_tag", ""),
            retriever_tag=obj.get("retriever_tag", ""),
            failure=obj.get("failure"),
        )


def validate_trajectory(traj: Trajectory) -> list[str]:
    """Report content-level violations on a stored trajectory."""
    violations = []
    for turn in traj.turns:
        if isinstance(turn.action, (Search, Visit)) and turn.observation is None:
            violations.append(f"{traj.qa_id}: turn {turn.index} has no observation")
    if traj.final_answer is not None and not traj.turns:
        violations.append(f"{traj.qa_id}: final answer without any turns")
    return violations


class Transformation(str, Enum):
    """How a trajectory prefix is turned into a retrieval input."""

    NONE = "none"
    CURRENT_REASONING = "current_reasoning"
    GLOBAL_QUESTION = "global_question"
    PRIOR_QUERIES = "prior_queries"
    PRIOR_QUERIES_REASONINGS = "prior_queries_reasonings"
    PRIOR_QUERIES_REASONINGS_DOCS = "prior_queries_reasonings_docs"
    WINDOW_K = "window_k"


@dataclass(frozen=True)
class ComposedQuery:
    """A rendered-ready retrieval input: instruction text plus query body."""

    instruction: str
    body: str
    transformation: Transformation
    window_k: int | str | None = None

    def __post_init__(self):
        if self.transformation is Transformation.WINDOW_K and self.window_k is None:
            raise ValueError("window_k transformation requires window_k")
        if isinstance(self.window_k, int) and self.window_k < 1:
            raise ValueError("window_k must be a positive integer or 'all'")
        if isinstance(self.window_k, str) and self.window_k != "all":
            raise ValueError("window_k must be a positive integer or 'all'")

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "body": self.body,
            "transformation": self.transformation.value,
            "window_k": self.window_k,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ComposedQuery":
        return cls(
            instruction=obj["instruction"],
            body=obj["body"],
            transformation=Transformation(obj["transformation"]),
            window_k=obj.get("window_k"),
        )


NUM_HARD_NEGATIVES = 7


@dataclass(frozen=True)
class TrainingInstance:
    """One contrastive training row: (reasoning, query) vs positive and negatives.

    Deliberately permissive at construction so that malformed rows can be
    *reported* by ``validate_training_instance`` (export refuses to write them).
    """

    reasoning: str
    query: str
    positive: Document
    negatives: tuple[Document, ...]
    qa_id: str
    turn_index: int

    def to_dict(self) -> dict:
        return {
            "reasoning": self.reasoning,
            "query": self.query,
            "positive": {"id": self.positive.id, "text": self.positive.text},
            "negatives": [{"id": d.id, "text": d.text} for d in self.negatives],
            "qa_id": self.qa_id,
            "turn_index": self.turn_index,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingInstance":
        return cls(
            reasoning=obj["reasoning"],
            query=obj["query"],
            positive=Document(id=obj["positive"]["id"], text=obj["positive"]["text"]),
            negatives=tuple(Document(id=d["id"], text=d["text"]) for d in obj["negatives"]),
            qa_id=obj["qa_id"],
            turn_index=obj["turn_index"],
        )


def validate_training_instance(inst: TrainingInstance) -> list[str]:
    violations = []
    if len(inst.negatives) != NUM_HARD_NEGATIVES:
        violations.append(
            f"{inst.qa_id} turn {inst.turn_index}: expected {NUM_HARD_NEGATIVES} negatives, got {len(inst.negatives)}"
        )
    neg_ids = [d.id for d in inst.negatives]
    if len(set(neg_ids)) != len(neg_ids):
        violations.append(f"{inst.qa_id} turn {inst.turn_index}: negatives share an id")
    if inst.positive.id in neg_ids:
        violations.append(f"{inst.qa_id} turn {inst.turn_index}: positive also appears as a negative")
    return violations


@dataclass(frozen=True)
class ExampleRow:
    """Per-example evaluation record. ``correct`` is None when unjudged."""

    qa_id: str
    correct: bool | None
    recall: float
    search_calls: int
    visit_calls: int

    def to_dict(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "correct": self.correct,
            "recall": self.recall,
            "search_calls": self.search_calls,
            "visit_calls": self.visit_calls,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExampleRow":
        return cls(
            qa_id=obj["qa_id"],
            correct=obj["correct"],
            recall=obj["recall"],
            search_calls=obj["search_calls"],
            visit_calls=obj["visit_calls"],
        )


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    recall: float
    mean_search_calls: float
    mean_visit_calls: float
    zero_recall_rate: float
    mean_search_calls_given_zero_recall: float
    rows: tuple[ExampleRow, ...]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "mean_search_calls": self.mean_search_calls,
            "mean_visit_calls": self.mean_visit_calls,
            "zero_recall_rate": self.zero_recall_rate,
            "mean_search_calls_given_zero_recall": self.mean_search_calls_given_zero_recall,
            "rows": [r.to_dict() for r in self.rows],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            accuracy=obj["accuracy"],
            recall=obj["recall"],
            mean_search_calls=obj["mean_search_calls"],
            mean_visit_calls=obj["mean_visit_calls"],
            zero_recall_rate=obj["zero_recall_rate"],
            mean_search_calls_given_zero_recall=obj["mean_search_calls_given_zero_recall"],
            rows=tuple(ExampleRow.from_dict(r) for r in obj["rows"]),
        )


# --- newline-delimited JSON files -----------------------------------------

HEADER_KEY = "_config"


def read_jsonl(path: str | Path) -> Iterator[dict]:
    """Yield one object per non-empty line, skipping provenance header lines."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and HEADER_KEY in obj:
                continue
            yield obj


def write_jsonl(path: str | Path, objs: Iterable[dict], header: dict | None = None) -> int:
    """Write objects one per line; optional provenance header as the first line."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({HEADER_KEY: header}, ensure_ascii=False) + "\n")
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_corpus(path: str | Path) -> Corpus:
    return Corpus(Document.from_dict(obj) for obj in read_jsonl(path))


def write_corpus(path: str | Path, corpus: Corpus, header: dict | None = None) -> int:
    return write_jsonl(path, (d.to_dict() for d in corpus), header=header)


def read_qa_examples(path: str | Path) -> list[QAExample]:
    return [QAExample.from_dict(obj) for obj in read_jsonl(path)]


def write_qa_examples(path: str | Path, examples: Iterable[QAExample], header: dict | None = None) -> int:
    return write_jsonl(path, (qa.to_dict() for qa in examples), header=header)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return [Trajectory.from_dict(obj) for obj in read_jsonl(path)]


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory], header: dict | None = None) -> int:
    return write_jsonl(path, (t.to_dict() for t in trajectories), header=header)
