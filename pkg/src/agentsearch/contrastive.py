"""Temperature-scaled contrastive objective over cosine similarities.

Reference math for retriever training: the loss of a (query, positive,
negatives) triple is the negative log-softmax of the positive's similarity.
Computed in log-sum-exp form throughout — at the default temperature of 0.01
the naive exponentials overflow float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import DimensionMismatch, EmbeddingVector
from .model import read_jsonl, write_jsonl

DEFAULT_TEMPERATURE = 0.01


class ZeroVector(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = DEFAULT_TEMPERATURE
    include_in_batch_negatives: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    """dot(u, v) / (|u| |v|), in [-1, 1]."""
    if u.dim != v.dim:
        raise DimensionMismatch(f"dims differ: {u.dim} vs {v.dim}")
    a, b = u.as_array(), v.as_array()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def _logits(q: EmbeddingVector, pos: EmbeddingVector,
            negs: Sequence[EmbeddingVector], cfg: LossConfig) -> np.ndarray:
    sims = [cosine(q, pos)] + [cosine(q, n) for n in negs]
    return np.asarray(sims, dtype=np.float64) / cfg.temperature


def contrastive_loss(q: EmbeddingVector, pos: EmbeddingVector,
                     negs: Sequence[EmbeddingVector],
                     cfg: LossConfig = LossConfig()) -> float:
    """-log( exp(s+/T) / (exp(s+/T) + sum_i exp(s-_i/T)) ), stably.

    With no negatives the softmax has a single term and the loss is exactly 0.
    """
    a = _logits(q, pos, negs, cfg)
    shift = float(np.max(a))
    return float(np.log(np.sum(np.exp(a - shift))) + shift - a[0])


@dataclass(frozen=True)
class LossGradient:
    query: np.ndarray
    positive: np.ndarray
    negatives: tuple[np.ndarray, ...]


def _cosine_partials(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """d cos(u, v) w.r.t. u and v, plus the cosine itself."""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    uhat, vhat = u / nu, v / nv
    c = float(np.dot(uhat, vhat))
    du = (vhat - c * uhat) / nu
    dv = (uhat - c * vhat) / nv
    return du, dv, c


def loss_gradient(q: EmbeddingVector, pos: EmbeddingVector,
                  negs: Sequence[EmbeddingVector],
                  cfg: LossConfig = LossConfig()) -> LossGradient:
    """Closed-form gradients of the loss w.r.t. every input vector.

    Chain rule through both the softmax and the cosine normalizations:
    dL/ds+ = (p+ - 1)/T and dL/ds-_i = p_i/T, where p is the softmax of the
    temperature-scaled similarities.
    """
    qa = q.as_array()
    a = _logits(q, pos, negs, cfg)
    shifted = np.exp(a - np.max(a))
    p = shifted / np.sum(shifted)

    grad_q = np.zeros_like(qa)
    dq_pos, dpos, _ = _cosine_partials(qa, pos.as_array())
    w_pos = (p[0] - 1.0) / cfg.temperature
    grad_q += w_pos * dq_pos
    grad_pos = w_pos * dpos

    grad_negs = []
    for i, neg in enumerate(negs, start=1):
        dq_neg, dneg, _ = _cosine_partials(qa, neg.as_array())
        w = p[i] / cfg.temperature
        grad_q += w * dq_neg
        grad_negs.append(w * dneg)

    return LossGradient(query=grad_q, positive=grad_pos, negatives=tuple(grad_negs))


def batch_negatives(i: int, positives: Sequence[EmbeddingVector],
                    own_negatives: Sequence[EmbeddingVector],
                    cfg: LossConfig) -> list[EmbeddingVector]:
    """Negative set for batch item ``i``: its own negatives, plus every other
    item's positive when in-batch negatives are enabled."""
    negs = list(own_negatives)
    if cfg.include_in_batch_negatives:
        negs.extend(p for j, p in enumerate(positives) if j != i)
    return negs


def batch_contrastive_loss(queries: Sequence[EmbeddingVector],
                           positives: Sequence[EmbeddingVector],
                           negatives: Sequence[Sequence[EmbeddingVector]],
                           cfg: LossConfig = LossConfig()) -> list[float]:
    if not (len(queries) == len(positives) == len(negatives)):
        raise ValueError("queries, positives and negatives must align")
    return [
        contrastive_loss(q, p, batch_negatives(i, positives, negatives[i], cfg), cfg)
        for i, (q, p) in enumerate(zip(queries, positives))
    ]


# --- fixed-vector parity file ------------------------------------------------


def write_parity_file(path: str | Path, rows: int = 100, dim: int = 8,
                      seed: int = 0, temperature: float = DEFAULT_TEMPERATURE,
                      max_negatives: int = 7) -> int:
    """Emit {q, pos, negs, T, expected_loss} rows for cross-component checks.

    Row 0 is the crafted symmetric case (the single negative equals the
    positive, so the loss is exactly ln 2); the rest are seeded random vectors
    with 1..max_negatives negatives each.
    """
    rng = np.random.default_rng(seed)

    def vec() -> list[float]:
        v = rng.standard_normal(dim)
        return [float(x) for x in v / np.linalg.norm(v)]

    records = []
    sym_q, sym_pos = vec(), vec()
    records.append({"q": sym_q, "pos": sym_pos, "negs": [sym_pos], "T": temperature})
    for _ in range(rows - 1):
        n_negs = int(rng.integers(1, max_negatives + 1))
        records.append({"q": vec(), "pos": vec(), "negs": [vec() for _ in range(n_negs)],
                        "T": temperature})
    for rec in records:
        cfg = LossConfig(temperature=rec["T"])
        rec["expected_loss"] = contrastive_loss(
            EmbeddingVector(tuple(rec["q"])),
            EmbeddingVector(tuple(rec["pos"])),
            [EmbeddingVector(tuple(n)) for n in rec["negs"]],
            cfg,
        )
    return write_jsonl(path, records)


def check_parity_file(path: str | Path) -> float:
    """Re-evaluate every row with this module's math; return max |deviation|."""
    worst = 0.0
    for rec in read_jsonl(path):
        cfg = LossConfig(temperature=rec["T"])
        loss = contrastive_loss(
            EmbeddingVector(tuple(rec["q"])),
            EmbeddingVector(tuple(rec["pos"])),
            [EmbeddingVector(tuple(n)) for n in rec["negs"]],
            cfg,
        )
        worst = max(worst, abs(loss - rec["expected_loss"]))
    return worst
