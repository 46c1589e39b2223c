"""The contrastive training loop.

Per batch item the loss is the negative log-softmax of the positive's cosine
similarity against its seven mined hard negatives plus, by default, the other
batch items' positives as in-batch negatives. Temperature and defaults follow
the harness's loss reference; hyperparameter defaults are the documented
recipe (lr 1e-4, batch 4, 2 epochs, gradient accumulation 2).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .data import TrainingRow, load_training_rows, render_query_input
from .modeling import build_backbone

DEFAULT_TEMPERATURE = 0.01


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 2
    max_doc_len: int = 4096
    max_query_len: int = 8192
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    grad_accumulation: int = 2
    temperature: float = DEFAULT_TEMPERATURE
    in_batch_negatives: bool = True
    dim: int = 64
    buckets: int = 4096
    seed: int = 0


@dataclass
class TrainResult:
    adapter_path: Path
    curve_path: Path
    step_losses: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)


def batch_logits(model, rows: list[TrainingRow], cfg: TrainConfig) -> torch.Tensor:
    """Per-item similarity logits: [positive | own negatives | in-batch positives].

    Column 0 is the positive; with in-batch negatives on, each item sees
    7 + (batch - 1) negatives.
    """
    queries = [render_query_input(r.reasoning, r.query) for r in rows]
    q = model.encode(queries, max_tokens=cfg.max_query_len)
    p = model.encode([r.positive for r in rows], max_tokens=cfg.max_doc_len)
    flat_negs = [text for r in rows for text in r.negatives]
    n = model.encode(flat_negs, max_tokens=cfg.max_doc_len).view(len(rows), -1, cfg.dim)

    pos_sim = (q * p).sum(dim=-1, keepdim=True)
    neg_sim = torch.bmm(n, q.unsqueeze(-1)).squeeze(-1)
    logits = torch.cat([pos_sim, neg_sim], dim=1)
    if cfg.in_batch_negatives and len(rows) > 1:
        cross = q @ p.T
        off_diag = cross[~torch.eye(len(rows), dtype=torch.bool)].view(len(rows), -1)
        logits = torch.cat([logits, off_diag], dim=1)
    return logits / cfg.temperature


def batch_loss(model, rows: list[TrainingRow], cfg: TrainConfig) -> torch.Tensor:
    logits = batch_logits(model, rows, cfg)
    targets = torch.zeros(len(rows), dtype=torch.long)
    return nn.functional.cross_entropy(logits, targets)


def train(dataset_path: str | Path, backbone_id: str = "hashed-bow",
          cfg: TrainConfig = TrainConfig(), out_dir: str | Path = "trainer-out") -> TrainResult:
    """Fine-tune the adapter on a synthesis dataset; emit weights + loss curve."""
    rows = load_training_rows(dataset_path)
    torch.manual_seed(cfg.seed)
    model = build_backbone(backbone_id, dim=cfg.dim, buckets=cfg.buckets,
                           rank=cfg.adapter_rank, alpha=cfg.adapter_alpha, seed=cfg.seed)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=cfg.lr)

    step_losses: list[float] = []
    epoch_means: list[float] = []
    accumulated = 0
    optimizer.zero_grad()
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for start in range(0, len(rows), cfg.batch_size):
            batch = rows[start : start + cfg.batch_size]
            loss = batch_loss(model, batch, cfg)
            (loss / cfg.grad_accumulation).backward()
            accumulated += 1
            if accumulated % cfg.grad_accumulation == 0:
                optimizer.step()
                optimizer.zero_grad()
            step_losses.append(float(loss.detach()))
            epoch_losses.append(float(loss.detach()))
        if accumulated % cfg.grad_accumulation != 0:
            optimizer.step()
            optimizer.zero_grad()
            accumulated = 0
        epoch_means.append(sum(epoch_losses) / len(epoch_losses))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    adapter_path = out / "adapter.pt"
    torch.save(model.adapter_state(), adapter_path)
    curve_path = out / "loss_curve.json"
    curve_path.write_text(json.dumps({
        "config": asdict(cfg),
        "backbone": backbone_id,
        "instances": len(rows),
        "step_losses": step_losses,
        "epoch_means": epoch_means,
    }, indent=1), encoding="utf-8")
    return TrainResult(adapter_path=adapter_path, curve_path=curve_path,
                       step_losses=step_losses, epoch_means=epoch_means)
