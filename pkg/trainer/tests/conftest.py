import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def planted_rows(n=50, markers=5, reps=4):
    """Synthetic instances with an unambiguous lexical signal.

    Each query shares a repeated marker token with its positive; negatives
    carry a different marker. Markers rotate so any window of four
    consecutive instances (one batch) has distinct markers.
    """
    rows = []
    for i in range(n):
        marker = f"signalword{i % markers}"
        plant = (marker + " ") * reps
        negs = []
        for j in range(7):
            other = f"signalword{(i + j + 1) % markers}"
            negs.append({"id": f"n{i}-{j}",
                         "text": f"{(other + ' ') * reps}routine filler log {j}"})
        rows.append({
            "reasoning": f"need {plant.strip()} details",
            "query": f"{plant.strip()} status",
            "positive": {"id": f"p{i}", "text": f"{plant.strip()} confirmed active"},
            "negatives": negs,
            "qa_id": f"qa{i}", "turn_index": 1,
        })
    return rows


@pytest.fixture
def planted_dataset(tmp_path):
    path = tmp_path / "planted.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in planted_rows()) + "\n",
                    encoding="utf-8")
    return path
