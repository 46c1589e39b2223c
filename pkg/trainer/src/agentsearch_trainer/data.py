"""Dataset loading, schema validation, and training-input rendering.

The training input for an instance is rendered through the *same* template
resource file the retrieval harness ships (``templates/
retrieval_current_reasoning.txt``), with identical substitution semantics, so
the string a trained encoder sees matches what the harness embeds at search
time byte for byte.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

NUM_NEGATIVES = 7

_SECTION_RE = re.compile(r"^\[(instruction|query|turn|system|user)\]$")
_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


class SchemaError(ValueError):
    pass


def _load_sections(name: str) -> dict[str, str]:
    text = resources.files("agentsearch").joinpath(f"templates/{name}.txt") \
        .read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            current = sections.setdefault(m.group(1), [])
        elif current is not None:
            current.append(line)
    return {k: "\n".join(v) for k, v in sections.items()}


def _fill(template: str, **values: str) -> str:
    return _PLACEHOLDER_RE.sub(
        lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0),
        template,
    )


def render_query_input(reasoning: str, query: str) -> str:
    """The instruction-plus-query string for one (reasoning, query) pair."""
    tpl = _load_sections("retrieval_current_reasoning")
    body = _fill(tpl["query"], reasoning=reasoning, query=query)
    return f"Instruction: {tpl['instruction']}\nQuery: {body}"


@dataclass(frozen=True)
class TrainingRow:
    reasoning: str
    query: str
    positive: str       # document text
    negatives: tuple[str, ...]
    qa_id: str
    turn_index: int


def _check_row(obj: dict, line_no: int) -> TrainingRow:
    for key in ("reasoning", "query", "positive", "negatives", "qa_id", "turn_index"):
        if key not in obj:
            raise SchemaError(f"line {line_no}: missing field {key!r}")
    positive = obj["positive"]
    negatives = obj["negatives"]
    if not isinstance(positive, dict) or "id" not in positive or "text" not in positive:
        raise SchemaError(f"line {line_no}: positive must be an object with id and text")
    if not isinstance(negatives, list) or len(negatives) != NUM_NEGATIVES:
        raise SchemaError(f"line {line_no}: expected {NUM_NEGATIVES} negatives, "
                          f"got {len(negatives) if isinstance(negatives, list) else type(negatives).__name__}")
    neg_ids = [n.get("id") for n in negatives]
    if len(set(neg_ids)) != len(neg_ids):
        raise SchemaError(f"line {line_no}: negatives share an id")
    if positive["id"] in neg_ids:
        raise SchemaError(f"line {line_no}: positive appears among negatives")
    return TrainingRow(
        reasoning=obj["reasoning"],
        query=obj["query"],
        positive=positive["text"],
        negatives=tuple(n["text"] for n in negatives),
        qa_id=obj["qa_id"],
        turn_index=int(obj["turn_index"]),
    )


def load_training_rows(path: str | Path) -> list[TrainingRow]:
    """Parse and validate a synthesis dataset; any violation aborts."""
    rows: list[TrainingRow] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if isinstance(obj, dict) and "_config" in obj:
                continue  # provenance header
            rows.append(_check_row(obj, line_no))
    if not rows:
        raise SchemaError(f"no training instances in {path}")
    return rows
