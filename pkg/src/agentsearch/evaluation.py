"""End-to-end run metrics: answer accuracy, evidence recall, call counts.

Recall is defined over *search* observations only — the union of every doc id
the agent's search calls ever surfaced, intersected with the ground-truth
evidence set. Visit calls are tallied separately and never count toward
recall.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

from .backends import BackendError, ChatBackend, Decoding, chat_request
from .composer import fill, load_template
from .model import EvalReport, ExampleRow, QAExample, Search, Trajectory

logger = logging.getLogger(__name__)


class EmptyEvidence(ValueError):
    pass


class EmptyRun(ValueError):
    pass


class JudgeUnavailable(Exception):
    pass


def retrieved_ids(trajectory: Trajectory) -> set[str]:
    """Union of doc ids over all search observations."""
    ids: set[str] = set()
    for turn in trajectory.turns:
        if isinstance(turn.action, Search) and isinstance(turn.observation, tuple):
            ids.update(r.doc_id for r in turn.observation)
    return ids


def recall(trajectory: Trajectory, evidence: set[str] | Sequence[str]) -> float:
    evidence_set = set(evidence)
    if not evidence_set:
        raise EmptyEvidence("recall needs a non-empty evidence set")
    return len(retrieved_ids(trajectory) & evidence_set) / len(evidence_set)


def normalize_answer(text: str) -> str:
    """Trim, collapse internal whitespace, casefold — and nothing else."""
    return " ".join(text.split()).casefold()


class ExactMatchJudge:
    """Offline judge: normalized string equality with the gold answer."""

    def judge(self, prediction: str, qa: QAExample) -> bool:
        return normalize_answer(prediction) == normalize_answer(qa.answer)


_INCORRECT_RE = re.compile(r"\bINCORRECT\b")
_CORRECT_RE = re.compile(r"\bCORRECT\b")


class LlmJudge:
    """LLM-as-judge over a prompt template with a CORRECT/INCORRECT verdict."""

    def __init__(self, backend: ChatBackend, template_name: str = "judge_default",
                 decoding: Decoding = Decoding(temperature=0.0)):
        self.backend = backend
        self.template_name = template_name
        self.decoding = decoding

    def judge(self, prediction: str, qa: QAExample) -> bool:
        tpl = load_template(self.template_name)
        user = fill(tpl["user"], question=qa.question, answer=qa.answer, prediction=prediction)
        messages = [{"role": "system", "content": tpl["system"]},
                    {"role": "user", "content": user}]
        try:
            reply = self.backend.chat(chat_request(messages, self.decoding))
        except BackendError as exc:
            raise JudgeUnavailable(str(exc)) from exc
        if _INCORRECT_RE.search(reply.content):
            return False
        if _CORRECT_RE.search(reply.content):
            return True
        raise JudgeUnavailable(f"no verdict token in judge reply: {reply.content[:80]!r}")


def judge_accuracy(final_answer: str | None, qa: QAExample, judge=None) -> bool:
    """Whether the final answer is correct; absent answers are always wrong."""
    if final_answer is None:
        return False
    return (judge or ExactMatchJudge()).judge(final_answer, qa)


@dataclass(frozen=True)
class ZeroRecallStats:
    rate: float
    mean_searches_given_zero: float


def zero_recall_stats(report: EvalReport) -> ZeroRecallStats:
    """Fraction of examples with zero recall, and their mean search count."""
    if not report.rows:
        raise EmptyRun("report has no rows")
    return _zero_recall(report.rows)


def aggregate(trajectories: Sequence[Trajectory], qa_set: Sequence[QAExample] | Mapping[str, QAExample],
              judge=None) -> EvalReport:
    """Per-example rows plus arithmetic means over them.

    Examples whose judge call failed are kept in the rows with
    ``correct=None`` and excluded from the accuracy denominator only.
    """
    if not trajectories:
        raise EmptyRun("no trajectories to aggregate")
    qa_map = qa_set if isinstance(qa_set, Mapping) else {qa.id: qa for qa in qa_set}
    judge = judge or ExactMatchJudge()

    rows: list[ExampleRow] = []
    for traj in trajectories:
        qa = qa_map[traj.qa_id]
        try:
            correct: bool | None = judge_accuracy(traj.final_answer, qa, judge)
        except JudgeUnavailable as exc:
            logger.warning("qa %s left unjudged: %s", qa.id, exc)
            correct = None
        rows.append(ExampleRow(
            qa_id=traj.qa_id,
            correct=correct,
            recall=recall(traj, qa.evidence),
            search_calls=traj.search_calls,
            visit_calls=traj.visit_calls,
        ))

    judged = [r for r in rows if r.correct is not None]
    accuracy = sum(1 for r in judged if r.correct) / len(judged) if judged else 0.0
    n = len(rows)
    zr = _zero_recall(rows)
    return EvalReport(
        accuracy=accuracy,
        recall=sum(r.recall for r in rows) / n,
        mean_search_calls=sum(r.search_calls for r in rows) / n,
        mean_visit_calls=sum(r.visit_calls for r in rows) / n,
        zero_recall_rate=zr.rate,
        mean_search_calls_given_zero_recall=zr.mean_searches_given_zero,
        rows=tuple(rows),
    )


def _zero_recall(rows: Sequence[ExampleRow]) -> ZeroRecallStats:
    zero = [r for r in rows if r.recall == 0.0]
    rate = len(zero) / len(rows)
    mean = sum(r.search_calls for r in zero) / len(zero) if zero else 0.0
    return ZeroRecallStats(rate=rate, mean_searches_given_zero=mean)


def render_table(report: EvalReport) -> str:
    """Aligned plain-text summary; columns follow Accuracy, Recall, Search Calls."""
    with_visits = any(r.visit_calls for r in report.rows)
    headers = ["Accuracy", "Recall", "Search Calls"]
    calls = f"{report.mean_search_calls:.2f}"
    if with_visits:
        calls += f" + {report.mean_visit_calls:.2f} Visit"
    values = [f"{report.accuracy * 100:.2f}", f"{report.recall * 100:.2f}", calls]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    extra = (f"zero-recall rate {report.zero_recall_rate * 100:.2f}%"
             f", mean searches given zero recall {report.mean_search_calls_given_zero_recall:.2f}")
    return f"{head}\n{body}\n{extra}"
