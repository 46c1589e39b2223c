"""Loss parity against the harness's fixed-vector parity file.

Re-evaluates every {q, pos, negs, T, expected_loss} row with this package's
tensor math (double precision, log-sum-exp form) and reports the worst
absolute deviation. Rows whose temperature disagrees with an explicitly
requested run temperature are flagged and skipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch


@dataclass
class ParityReport:
    max_deviation: float
    rows_checked: int
    rows_skipped: int
    skipped_lines: list[int] = field(default_factory=list)


def _row_loss(q, pos, negs, temperature: float) -> float:
    qt = torch.tensor(q, dtype=torch.float64)
    pt = torch.tensor(pos, dtype=torch.float64)
    nt = torch.tensor(negs, dtype=torch.float64) if negs else torch.zeros((0, len(q)), dtype=torch.float64)
    sims = [torch.nn.functional.cosine_similarity(qt, pt, dim=0)]
    for i in range(nt.shape[0]):
        sims.append(torch.nn.functional.cosine_similarity(qt, nt[i], dim=0))
    logits = torch.stack(sims) / temperature
    return float(torch.logsumexp(logits, dim=0) - logits[0])


def verify_loss_parity(parity_path: str | Path, temperature: float | None = None) -> ParityReport:
    max_dev = 0.0
    checked = 0
    skipped: list[int] = []
    with open(parity_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if temperature is not None and row["T"] != temperature:
                skipped.append(line_no)
                continue
            loss = _row_loss(row["q"], row["pos"], row["negs"], row["T"])
            max_dev = max(max_dev, abs(loss - row["expected_loss"]))
            checked += 1
    return ParityReport(max_deviation=max_dev, rows_checked=checked,
                        rows_skipped=len(skipped), skipped_lines=skipped)
