"""Single entry point for the whole harness.

Subcommands: ingest, index, rollout, synth, eval, analyze, compose,
loss-check. Exit codes: 0 success, 1 validation failure, 2 backend failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, config, contrastive, evaluation, synth
from .agent import run_episodes
from .backends import BackendError, Decoding
from .composer import CompositionConfig, compose, render_retrieval_prompt
from .model import (
    Transformation,
    read_corpus,
    read_qa_examples,
    read_trajectories,
    validate_corpus,
    validate_qa_examples,
    write_trajectories,
)
from .retrieval import build_bm25, build_dense, corpus_fingerprint, save_bm25, save_dense

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_USAGE = 64


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract is 64
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="agentsearch", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed for stub randomness")
    parser.add_argument("--workers", type=int, help="parallel episodes/annotations")
    parser.add_argument("--deterministic", action="store_true",
                        help="single worker, everything seeded")
    parser.add_argument("--print-config", action="store_true",
                        help="dump the resolved configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("ingest", help="validate corpus/qa files")
    p.add_argument("--corpus", required=True)
    p.add_argument("--qa")

    p = sub.add_parser("index", help="build bm25/dense indexes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["bm25", "dense", "both"], default="both")

    p = sub.add_parser("rollout", help="run agent episodes over a qa file")
    p.add_argument("--qa", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True, help="index directory")
    p.add_argument("--out", required=True)
    p.add_argument("--max-turns", type=int)
    p.add_argument("--transformation", choices=[t.value for t in Transformation])
    p.add_argument("--window-k")
    p.add_argument("--visit", action="store_true", help="enable the visit tool")

    p = sub.add_parser("synth", help="synthesize training data from rollouts")
    p.add_argument("--qa", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="dataset output path")
    p.add_argument("--stats", help="stats sidecar path (default: <out>.stats.json)")
    p.add_argument("--max-turns", type=int)

    p = sub.add_parser("eval", help="compute metrics over stored trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--table", action="store_true", help="print the plain-text table")

    p = sub.add_parser("analyze", help="clue coverage / claim noise series")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="needed for --noise evidence texts")
    p.add_argument("--ks", default="1,2,5,9,17,all")
    p.add_argument("--cache", help="annotation cache path")
    p.add_argument("--noise", action="store_true", help="also run claim grading")

    p = sub.add_parser("compose", help="debug-print a rendered retrieval prompt")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--qa-id", required=True)
    p.add_argument("--turn", type=int, required=True)
    p.add_argument("--transformation", choices=[t.value for t in Transformation])
    p.add_argument("--window-k")
    p.add_argument("--qa", help="qa file (for the global-question transformation)")

    p = sub.add_parser("loss-check", help="evaluate or generate the loss parity file")
    p.add_argument("--parity", required=True)
    p.add_argument("--generate", action="store_true")
    p.add_argument("--rows", type=int, default=100)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--temperature", type=float, default=contrastive.DEFAULT_TEMPERATURE)
    p.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.deterministic:
        overrides["deterministic"] = True
    if getattr(args, "max_turns", None) is not None:
        overrides.setdefault("agent", {})["max_turns"] = args.max_turns
    if getattr(args, "transformation", None):
        overrides.setdefault("composer", {})["transformation"] = args.transformation
    if getattr(args, "window_k", None):
        overrides.setdefault("composer", {})["window_k"] = args.window_k
    if getattr(args, "visit", False):
        overrides.setdefault("agent", {})["visit_tool"] = True
    return overrides


def _cmd_ingest(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    violations = validate_corpus(corpus)
    if args.qa:
        violations += validate_qa_examples(read_qa_examples(args.qa), corpus)
    for v in violations:
        print(f"violation: {v}")
    if violations:
        return EXIT_VALIDATION
    n_qa = len(read_qa_examples(args.qa)) if args.qa else 0
    print(f"ok: {len(corpus)} documents" + (f", {n_qa} qa examples" if args.qa else ""))
    return EXIT_OK


def _cmd_index(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    violations = validate_corpus(corpus)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return EXIT_VALIDATION
    fingerprint = corpus_fingerprint(corpus)
    out = Path(args.out)
    if args.kind in ("bm25", "both"):
        index = build_bm25(corpus, k1=cfg["index"]["k1"], b=cfg["index"]["b"])
        save_bm25(index, out / "bm25", fingerprint)
        print(f"bm25 index: {index.doc_count} docs -> {out / 'bm25'}")
    if args.kind in ("dense", "both"):
        embedder = config.build_embedder(cfg)
        index = build_dense(corpus, embedder)
        save_dense(index, out / "dense", fingerprint,
                   params=cfg["backends"]["embedder"])
        print(f"dense index: {index.doc_count} docs, dim {index.dim} -> {out / 'dense'}")
    return EXIT_OK


def _index_dir(cfg: dict, base: str) -> Path:
    return Path(base) / cfg["retriever"]["kind"]


def _cmd_rollout(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    qas = read_qa_examples(args.qa)
    binding = config.build_binding(cfg, corpus, _index_dir(cfg, args.index))
    factory = config.build_agent_factory(cfg)
    agent_cfg = cfg["agent"]
    trajectories = run_episodes(
        qas, factory, binding,
        workers=cfg["workers"],
        search_tool=agent_cfg["search_tool"],
        visit_tool=agent_cfg["visit_tool"],
        max_turns=agent_cfg["max_turns"],
        decoding=Decoding(temperature=float(cfg["backends"]["agent"].get("temperature", 0.6))),
        agent_tag=cfg["backends"]["agent"].get("model", cfg["backends"]["agent"]["kind"]),
        retriever_tag=cfg["retriever"]["kind"],
    )
    write_trajectories(args.out, trajectories, header=cfg)
    answered = sum(1 for t in trajectories if t.final_answer is not None)
    print(f"rollout: {len(trajectories)} episodes, {answered} answered -> {args.out}")
    return EXIT_OK


def _cmd_synth(args, cfg) -> int:
    corpus = read_corpus(args.corpus)
    qas = read_qa_examples(args.qa)
    composition = CompositionConfig(transformation=Transformation.NONE)
    binding = config.build_binding(cfg, corpus, _index_dir(cfg, args.index), composition)
    factory = config.build_agent_factory(cfg)
    oracle = config.build_chat_backend(cfg["backends"]["oracle"])
    judge = config.build_judge(cfg)
    agent_cfg = cfg["agent"]

    results = [
        synth.synthesize(
            qa, factory(qa), binding, oracle, corpus,
            pool_k=cfg["synth"]["pool_k"],
            search_tool=agent_cfg["search_tool"],
            visit_tool=agent_cfg["visit_tool"],
            max_turns=agent_cfg["max_turns"],
            decoding=Decoding(temperature=float(cfg["backends"]["agent"].get("temperature", 0.6))),
            agent_tag=cfg["backends"]["agent"].get("model", cfg["backends"]["agent"]["kind"]),
            retriever_tag=f"{cfg['retriever']['kind']}+oracle",
        )
        for qa in qas
    ]
    kept = synth.rejection_filter(results, qas, judge)
    instances = [inst for res in kept for inst in res.instances]
    synth.export_dataset(instances, args.out, header=cfg)
    stats = synth.synthesis_stats(results, kept)
    stats_path = Path(args.stats) if args.stats else Path(str(args.out) + ".stats.json")
    stats_path.write_text(json.dumps(stats, indent=1), encoding="utf-8")
    print(f"synth: {stats['trajectories_run']} rollouts, kept {stats['kept']}, "
          f"{stats['instances']} instances -> {args.out}")
    return EXIT_OK


def _cmd_eval(args, cfg) -> int:
    trajectories = read_trajectories(args.trajectories)
    qas = read_qa_examples(args.qa)
    judge = config.build_judge(cfg)
    report = evaluation.aggregate(trajectories, qas, judge)
    if args.out:
        payload = {"_config": cfg}
        payload.update(report.to_dict())
        Path(args.out).write_text(json.dumps(payload, indent=1, ensure_ascii=False),
                                  encoding="utf-8")
    table = evaluation.render_table(report)
    if args.table or not args.out:
        print(table)
    else:
        print(f"eval: {len(report.rows)} examples -> {args.out}")
    return EXIT_OK


def _parse_ks(raw: str) -> list:
    ks: list = []
    for part in raw.split(","):
        part = part.strip()
        ks.append("all" if part == "all" else int(part))
    return ks


def _cmd_analyze(args, cfg) -> int:
    trajectories = read_trajectories(args.trajectories)
    qas = {qa.id: qa for qa in read_qa_examples(args.qa)}
    llm = config.build_chat_backend(cfg["backends"]["analysis"])
    cache = analysis.AnnotationCache(args.cache) if args.cache else None
    ks = _parse_ks(args.ks)

    clue_sets = []
    for traj in trajectories:
        cs = analysis.annotate_clues(traj, llm, cache)
        if cs is not None:
            clue_sets.append(cs)
    out: dict = {"coverage": analysis.coverage_series(clue_sets, ks)}

    if args.noise:
        if not args.corpus:
            raise _UsageError("--noise needs --corpus for evidence texts")
        corpus = read_corpus(args.corpus)
        int_ks = [k for k in ks if k != "all"]
        per_traj = []
        for traj in trajectories:
            qa = qas[traj.qa_id]
            evidence_texts = [corpus.get(i).text for i in qa.evidence if i in corpus]
            if not evidence_texts:
                continue
            hops = analysis.extract_hop_answers(qa, evidence_texts, llm)
            annotations = [
                analysis.classify_claims(reasoning, qa, hops, llm, turn_index=idx)
                for idx, reasoning in analysis.search_reasonings(traj)
            ]
            per_traj.append(annotations)
        out["claims"] = analysis.claims_series(per_traj, int_ks)

    payload = {"_config": cfg}
    payload.update(out)
    Path(args.out).write_text(json.dumps(payload, indent=1, ensure_ascii=False),
                              encoding="utf-8")
    print(f"analyze: {len(clue_sets)} trajectories -> {args.out}")
    return EXIT_OK


def _cmd_compose(args, cfg) -> int:
    trajectories = {t.qa_id: t for t in read_trajectories(args.trajectories)}
    if args.qa_id not in trajectories:
        raise _UsageError(f"no trajectory for qa id {args.qa_id!r}")
    traj = trajectories[args.qa_id]
    prefix = traj.turns[: args.turn]
    if len(prefix) < args.turn:
        raise _UsageError(f"trajectory has only {len(traj.turns)} turns")
    composition = config.build_composition(cfg)
    if composition.transformation is Transformation.GLOBAL_QUESTION:
        if not args.qa:
            raise _UsageError("the global-question transformation needs --qa")
        qa_map = {qa.id: qa for qa in read_qa_examples(args.qa)}
        from dataclasses import replace
        composition = replace(composition, global_question=qa_map[args.qa_id].question)
    print(render_retrieval_prompt(compose(prefix, composition)))
    return EXIT_OK


def _cmd_loss_check(args, cfg) -> int:
    if args.generate:
        n = contrastive.write_parity_file(args.parity, rows=args.rows, dim=args.dim,
                                          seed=cfg["seed"], temperature=args.temperature)
        print(f"loss-check: wrote {n} parity rows -> {args.parity}")
        return EXIT_OK
    if not Path(args.parity).exists():
        print(f"parity file not found: {args.parity}")
        return EXIT_VALIDATION
    deviation = contrastive.check_parity_file(args.parity)
    print(f"loss-check: max |deviation| = {deviation:.3e}")
    return EXIT_OK if deviation < args.tolerance else EXIT_VALIDATION


_COMMANDS = {
    "ingest": _cmd_ingest,
    "index": _cmd_index,
    "rollout": _cmd_rollout,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
    "compose": _cmd_compose,
    "loss-check": _cmd_loss_check,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        cfg = config.resolve(args.config, _flag_overrides(args))
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.print_config:
        print(json.dumps(cfg, indent=1, sort_keys=True))
        if args.command is None:
            return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        return _COMMANDS[args.command](args, cfg)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
