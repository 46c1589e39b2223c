"""Redundancy and noise analyses over reasoning traces.

Two instruments: atomic-clue decomposition with per-turn coverage (how much
of the episode's information the last k reasonings already carry), and
two-step claim grading (how much correct signal vs. incorrect noise the last
k reasonings add). Both lean on an annotation LLM; parsed output is repaired
leniently because models love wrapping lists in prose and code fences.
"""

from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .backends import ChatBackend, Decoding, chat_request
from .composer import fill, load_template
from .model import QAExample, Search, Trajectory

logger = logging.getLogger(__name__)


class UnparseableList(ValueError):
    pass


class UnparseableJson(ValueError):
    pass


@dataclass(frozen=True)
class ClueSet:
    """Atomic clues for one trajectory plus which turns mention which clues."""

    clues: tuple[str, ...]
    per_turn: Mapping[int, frozenset[int]]


@dataclass(frozen=True)
class ClaimAnnotation:
    turn_index: int
    correct_claims: tuple[str, ...]
    incorrect_claims: tuple[str, ...]

    def __post_init__(self):
        if set(self.correct_claims) & set(self.incorrect_claims):
            raise ValueError("a claim cannot be both correct and incorrect")


_FENCE_RE = re.compile(r"^```[\w-]*\n|\n?```$", re.MULTILINE)


def _strip_fences(text: str) -> str:
    return _FENCE_RE.sub("", text.strip()).strip()


def parse_py_list(text: str) -> list:
    """Pull the outermost ``[...]`` literal out of model output."""
    cleaned = _strip_fences(text)
    start, end = cleaned.find("["), cleaned.rfind("]")
    if start == -1 or end <= start:
        raise UnparseableList(f"no list literal in: {cleaned[:80]!r}")
    try:
        value = ast.literal_eval(cleaned[start : end + 1])
    except (ValueError, SyntaxError) as exc:
        raise UnparseableList(f"bad list literal: {exc}") from exc
    if not isinstance(value, list):
        raise UnparseableList(f"literal is not a list: {type(value).__name__}")
    return value


def parse_json_object(text: str) -> dict:
    """Pull the outermost ``{...}`` object out of model output (quotes lenient)."""
    cleaned = _strip_fences(text)
    start, end = cleaned.find("{"), cleaned.rfind("}")
    if start == -1 or end <= start:
        raise UnparseableJson(f"no JSON object in: {cleaned[:80]!r}")
    blob = cleaned[start : end + 1]
    try:
        value = json.loads(blob)
    except ValueError:
        try:
            value = ast.literal_eval(blob)
        except (ValueError, SyntaxError) as exc:
            raise UnparseableJson(f"bad JSON object: {exc}") from exc
    if not isinstance(value, dict):
        raise UnparseableJson("parsed value is not an object")
    return value


_DECODING = Decoding(temperature=0.0)


def _chat(llm: ChatBackend, template: str, *, system_from_template: bool = True, **values) -> str:
    tpl = load_template(template)
    messages = []
    if system_from_template and "system" in tpl:
        messages.append({"role": "system", "content": tpl["system"]})
    messages.append({"role": "user", "content": fill(tpl["user"], **values)})
    return llm.chat(chat_request(messages, _DECODING)).content


def decompose_clues(reasonings: Sequence[str], llm: ChatBackend) -> list[str]:
    """Distill an episode's reasonings into short, distinct clue statements."""
    if not reasonings:
        raise ValueError("reasonings must be non-empty")
    reply = _chat(llm, "atomic_clues", reasonings="\n---\n".join(reasonings))
    clues = parse_py_list(reply)
    if not all(isinstance(c, str) for c in clues):
        raise UnparseableList("clue list contains non-strings")
    return clues


def assign_clues(reasoning: str, clues: Sequence[str], llm: ChatBackend) -> set[int]:
    """Which clue ordinals (1-based) does this reasoning mention?

    Out-of-range ordinals from the model are dropped with a warning.
    """
    if not clues:
        raise ValueError("clues must be non-empty")
    reply = _chat(llm, "atomic_clues_assignment", reasoning=reasoning,
                  clues_list=repr(list(clues)))
    raw = parse_py_list(reply)
    picked: set[int] = set()
    for item in raw:
        if not isinstance(item, int):
            raise UnparseableList(f"clue ordinal is not an int: {item!r}")
        if 1 <= item <= len(clues):
            picked.add(item)
        else:
            logger.warning("clue ordinal %d out of range 1..%d; dropped", item, len(clues))
    return picked


def coverage_ratio(clue_set: ClueSet, k: int | str, t: int) -> float:
    """Share of the clues from turns 1..t that the last k turns already cover.

    An empty all-history union counts as fully covered (ratio 1.0).
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    everything: set[int] = set()
    for turn in range(1, t + 1):
        everything |= clue_set.per_turn.get(turn, frozenset())
    if not everything:
        return 1.0
    start = 1 if k == "all" else max(1, t - int(k) + 1)
    window: set[int] = set()
    for turn in range(start, t + 1):
        window |= clue_set.per_turn.get(turn, frozenset())
    return len(window) / len(everything)


def extract_hop_answers(qa: QAExample, evidence_texts: Sequence[str],
                        llm: ChatBackend) -> list[str]:
    """Step one of noise grading: the intermediate answer for every hop."""
    if not evidence_texts:
        raise ValueError("evidence_texts must be non-empty")
    reply = _chat(llm, "noise_step1", query=qa.question, answer=qa.answer,
                  evidence="\n\n".join(evidence_texts))
    obj = parse_json_object(reply)
    if "multi_hop_answers" not in obj:
        raise UnparseableJson("missing key 'multi_hop_answers'")
    hops = obj["multi_hop_answers"]
    if not isinstance(hops, list) or not all(isinstance(h, str) for h in hops):
        raise UnparseableJson("'multi_hop_answers' is not a list of strings")
    return hops


def classify_claims(reasoning: str, qa: QAExample, hop_answers: Sequence[str],
                    llm: ChatBackend, turn_index: int = 0) -> ClaimAnnotation:
    """Step two of noise grading: split one reasoning's claims by correctness."""
    if not hop_answers:
        raise ValueError("hop_answers must be non-empty")
    reply = _chat(llm, "noise_step2", query=qa.question,
                  hops_answer_list=repr(list(hop_answers)), reasoning_text=reasoning)
    obj = parse_json_object(reply)
    for key in ("correct_claims", "incorrect_claims"):
        if key not in obj or not isinstance(obj[key], list):
            raise UnparseableJson(f"missing or malformed key {key!r}")
    correct = tuple(str(c) for c in obj["correct_claims"])
    incorrect = tuple(str(c) for c in obj["incorrect_claims"] if c not in correct)
    if len(incorrect) != len(obj["incorrect_claims"]):
        logger.warning("turn %d: dropped claims listed as both correct and incorrect", turn_index)
    return ClaimAnnotation(turn_index=turn_index, correct_claims=correct,
                           incorrect_claims=incorrect)


def claim_counts(annotations: Sequence[ClaimAnnotation], k: int, t: int) -> tuple[int, int]:
    """(correct, incorrect) claim totals over the last k of turns 1..t."""
    if k < 1 or t < 1:
        raise ValueError("k and t must be >= 1")
    by_turn = {a.turn_index: a for a in annotations}
    start = max(1, t - k + 1)
    correct = incorrect = 0
    for turn in range(start, t + 1):
        ann = by_turn.get(turn)
        if ann is not None:
            correct += len(ann.correct_claims)
            incorrect += len(ann.incorrect_claims)
    return correct, incorrect


# --- trajectory-level pipelines and cache ------------------------------------


def search_reasonings(traj: Trajectory) -> list[tuple[int, str]]:
    """(turn index, reasoning) for every search turn, in order."""
    return [(t.index, t.reasoning) for t in traj.turns if isinstance(t.action, Search)]


class AnnotationCache:
    """Resumable JSONL store for LLM annotations, keyed by (qa_id, kind, turn)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[tuple[str, str, int], dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        obj = json.loads(line)
                        self._entries[(obj["qa_id"], obj["kind"], obj["turn"])] = obj["value"]

    def get(self, qa_id: str, kind: str, turn: int = 0):
        return self._entries.get((qa_id, kind, turn))

    def put(self, qa_id: str, kind: str, turn: int, value) -> None:
        self._entries[(qa_id, kind, turn)] = value
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"qa_id": qa_id, "kind": kind, "turn": turn, "value": value},
                                ensure_ascii=False) + "\n")


def annotate_clues(traj: Trajectory, llm: ChatBackend,
                   cache: AnnotationCache | None = None) -> ClueSet | None:
    """Decompose one trajectory's reasonings and assign clues per turn."""
    pairs = search_reasonings(traj)
    if not pairs:
        return None
    cached = cache.get(traj.qa_id, "clues") if cache else None
    if cached is not None:
        clues = list(cached)
    else:
        clues = decompose_clues([r for _, r in pairs], llm)
        if cache:
            cache.put(traj.qa_id, "clues", 0, clues)
    if not clues:
        return ClueSet(clues=(), per_turn={idx: frozenset() for idx, _ in pairs})
    per_turn: dict[int, frozenset[int]] = {}
    for idx, reasoning in pairs:
        cached = cache.get(traj.qa_id, "assign", idx) if cache else None
        if cached is not None:
            picked = set(cached)
        else:
            picked = assign_clues(reasoning, clues, llm)
            if cache:
                cache.put(traj.qa_id, "assign", idx, sorted(picked))
        per_turn[idx] = frozenset(picked)
    return ClueSet(clues=tuple(clues), per_turn=per_turn)


def coverage_series(clue_sets: Sequence[ClueSet], ks: Sequence[int | str]) -> dict:
    """Mean coverage ratio per k, averaged across trajectories at their last turn."""
    series = {}
    for k in ks:
        ratios = []
        for cs in clue_sets:
            if not cs.per_turn:
                continue
            t = max(cs.per_turn)
            ratios.append(coverage_ratio(cs, k, t))
        series[str(k)] = sum(ratios) / len(ratios) if ratios else 0.0
    return series


def claims_series(per_traj_annotations: Sequence[Sequence[ClaimAnnotation]],
                  ks: Sequence[int]) -> dict:
    """Mean correct/incorrect claim totals within the last k turns, across trajectories."""
    series = {}
    for k in ks:
        correct_totals, incorrect_totals = [], []
        for annotations in per_traj_annotations:
            if not annotations:
                continue
            t = max(a.turn_index for a in annotations)
            c, i = claim_counts(annotations, k, t)
            correct_totals.append(c)
            incorrect_totals.append(i)
        n = len(correct_totals)
        series[str(k)] = {
            "correct": sum(correct_totals) / n if n else 0.0,
            "incorrect": sum(incorrect_totals) / n if n else 0.0,
        }
    return series
