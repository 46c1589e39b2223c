"""Trainer entry point: ``train`` and ``parity`` subcommands."""

from __future__ import annotations

import argparse
import sys

from .data import SchemaError
from .parity import verify_loss_parity
from .training import TrainConfig, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentsearch-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune the adapter on a synthesis dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backbone", default="hashed-bow")
    p.add_argument("--out", default="trainer-out")
    defaults = TrainConfig()
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--max-doc-len", type=int, default=defaults.max_doc_len)
    p.add_argument("--max-query-len", type=int, default=defaults.max_query_len)
    p.add_argument("--adapter-rank", type=int, default=defaults.adapter_rank)
    p.add_argument("--grad-accumulation", type=int, default=defaults.grad_accumulation)
    p.add_argument("--temperature", type=float, default=defaults.temperature)
    p.add_argument("--no-in-batch-negatives", action="store_true")
    p.add_argument("--seed", type=int, default=defaults.seed)

    p = sub.add_parser("parity", help="check loss parity against a parity file")
    p.add_argument("--parity", required=True)
    p.add_argument("--temperature", type=float, default=None,
                   help="skip rows whose T differs from this value")
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "train":
        cfg = TrainConfig(
            lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
            max_doc_len=args.max_doc_len, max_query_len=args.max_query_len,
            adapter_rank=args.adapter_rank, grad_accumulation=args.grad_accumulation,
            temperature=args.temperature,
            in_batch_negatives=not args.no_in_batch_negatives, seed=args.seed,
        )
        try:
            result = train(args.dataset, args.backbone, cfg, args.out)
        except SchemaError as exc:
            print(f"schema error: {exc}", file=sys.stderr)
            return 1
        print(f"trained: epoch mean losses {['%.4f' % m for m in result.epoch_means]}, "
              f"adapter -> {result.adapter_path}")
        return 0

    report = verify_loss_parity(args.parity, args.temperature)
    print(f"parity: max |deviation| = {report.max_deviation:.3e} over "
          f"{report.rows_checked} rows ({report.rows_skipped} skipped)")
    return 0 if report.max_deviation < args.tolerance else 1


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
