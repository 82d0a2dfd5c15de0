"""Command-line entry point: index, retrieve, rerank, train, eval, bench, serve.

Exit codes: 0 success, 1 runtime failure, 2 input or flag error,
3 precondition failure or refusal to overwrite.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, TextIO

from . import objective
from .backend import Backend, BackendError, HttpBackend, OracleBackend, ScriptedBackend, hashed_relevance
from .core import ContractError, IdentifierScheme, WindowConfig
from .eval import LatencyReport, bench_rerank, evaluate_run, format_speedup, latency_table, speedup
from .rerank import RepairPolicy, RerankConfig, RerankError, RerankMode, rerank_run
from .retriever import Bm25Params, RetrievalConfig, build_index, load_index, save_index, search
from .trec_io import (
    FormatError,
    parse_corpus_jsonl,
    parse_qrels,
    parse_queries_jsonl,
    parse_run,
    write_run,
)

log = logging.getLogger("firstrank")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_PRECONDITION = 0, 1, 2, 3
BACKEND_ENV = "RERANK_BACKEND_URL"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def atomic_output(path: str | Path) -> Iterator[TextIO]:
    """Write to a temporary sibling file and rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _open(path: str) -> TextIO:
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_INPUT) from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _load_run(path: str):
    with _open(path) as fh:
        return parse_run(fh)


def _load_texts(corpus: str | None) -> dict[str, str]:
    if not corpus:
        return {}
    with _open(corpus) as fh:
        return {d.id: d.text for d in parse_corpus_jsonl(fh)}


def _load_queries(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    with _open(path) as fh:
        return {q.id: q.text for q in parse_queries_jsonl(fh)}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_index(args: argparse.Namespace) -> int:
    out = Path(args.output)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to rebuild", EXIT_PRECONDITION)
    with _open(args.corpus) as fh:
        index = build_index(parse_corpus_jsonl(fh))
    with atomic_output(out) as sink:
        save_index(index, sink)
    print(f"indexed {index.doc_count} documents, {index.vocabulary_size} terms -> {out}")
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace) -> int:
    if not Path(args.index).exists():
        raise CliError(f"index {args.index} not found", EXIT_PRECONDITION)
    with _open(args.index) as fh:
        try:
            index = load_index(fh)
        except (ValueError, KeyError) as exc:
            raise CliError(f"cannot load index {args.index}: {exc}", EXIT_INPUT) from None
    with _open(args.queries) as fh:
        queries = list(parse_queries_jsonl(fh))
    params = Bm25Params(args.k1, args.b)
    config = RetrievalConfig(args.k)
    with ThreadPoolExecutor(max_workers=args.parallel) as pool:
        lists = list(pool.map(lambda q: search(index, params, q, config), queries))
    run = {c.query_id: c for c in lists if len(c)}
    with atomic_output(args.output) as sink:
        write_run(run, args.tag, sink)
    print(f"retrieved {sum(map(len, run.values()))} rows for {len(queries)} queries -> {args.output}")
    return EXIT_OK


def _make_backend(args: argparse.Namespace) -> Backend:
    choice = args.backend
    tau = args.simulated_latency
    if choice == "mock-oracle":
        if args.oracle_qrels:
            with _open(args.oracle_qrels) as fh:
                return OracleBackend.from_qrels(parse_qrels(fh), per_token_latency=tau)
        return OracleBackend(hashed_relevance(args.seed), per_token_latency=tau)
    if choice == "mock-scripted":
        if not args.script:
            raise CliError("--backend mock-scripted requires --script FILE", EXIT_INPUT)
        with _open(args.script) as fh:
            lines = [line.rstrip("\n") for line in fh if line.strip()]
        if not lines:
            raise CliError(f"script {args.script} is empty", EXIT_INPUT)
        return ScriptedBackend(lines, per_token_latency=tau)
    if choice == "http" or choice.startswith("http="):
        url = choice[len("http="):] if choice.startswith("http=") else os.environ.get(BACKEND_ENV, "")
        if not url:
            raise CliError(f"--backend http needs a URL (http=<url> or ${BACKEND_ENV})", EXIT_INPUT)
        return HttpBackend(url, timeout=args.timeout, retries=args.retries)
    raise CliError(f"unknown backend {choice!r}", EXIT_INPUT)


def _rerank_config(args: argparse.Namespace, mode: str) -> RerankConfig:
    return RerankConfig(
        window=WindowConfig(args.window, args.step),
        mode=RerankMode(mode),
        scheme=IdentifierScheme(),
        repair_policy=RepairPolicy(args.policy),
        depth=args.depth,
        char_budget=args.char_budget,
        parallelism=getattr(args, "parallel", 1),
    )


def _preflight(backend: Backend, config: RerankConfig) -> None:
    """Verify an HTTP backend answers and tokenizes identifiers as single tokens."""
    if not isinstance(backend, HttpBackend):
        return
    scheme = IdentifierScheme(config.scheme.alphabet[:config.window.window_size])
    try:
        bad = backend.check_identifiers(scheme)
    except BackendError as exc:
        raise CliError(f"backend unreachable: {exc}", EXIT_RUNTIME) from None
    if bad:
        raise CliError(f"identifiers not single tokens for this backend: {bad}", EXIT_PRECONDITION)


def cmd_rerank(args: argparse.Namespace) -> int:
    config = _rerank_config(args, args.mode)
    run = _load_run(args.run)
    texts = _load_texts(args.corpus)
    queries = _load_queries(args.queries)
    backend = _make_backend(args)
    _preflight(backend, config)
    result = rerank_run(run, backend, config, queries, texts)
    if not result.run and result.failures:
        raise CliError(f"all {len(result.failures)} queries failed; no output written", EXIT_RUNTIME)
    with atomic_output(args.output) as sink:
        write_run(result.run, args.tag, sink)
    if args.trace:
        with atomic_output(args.trace) as sink:
            for qid in run:
                for trace in result.traces.get(qid, []):
                    sink.write(json.dumps(trace.to_dict()) + "\n")
    print(f"reranked {len(result.run)} queries ({config.mode.value}) -> {args.output}")
    if result.failures:
        for qid, exc in result.failures.items():
            print(f"FAILED {qid}: {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    with _open(args.data) as fh:
        dataset = objective.read_training_jsonl(fh)
    if not dataset:
        raise CliError(f"{args.data} holds no training windows", EXIT_INPUT)
    cfg = objective.TrainConfig(args.epochs, args.batch_size, args.lr, args.seed)
    loss_cfg = objective.LossConfig(args.lam)
    try:
        model, curve = objective.train(dataset, cfg, loss_cfg)
    except objective.TrainingDivergedError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    with atomic_output(args.model_out) as sink:
        json.dump(model.to_dict(), sink, indent=2)
        sink.write("\n")
    with atomic_output(args.curve_out) as sink:
        objective.write_loss_curve(curve, sink)
    last = curve[-1]
    print(f"trained {len(dataset)} windows for {cfg.epochs} epochs: joint={last.joint:.6f} "
          f"lm={last.lm:.6f} rank_weighted={last.rank_weighted:.6f}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    windows, _ = objective.synthetic_windows(args.windows, args.m, args.dim, args.seed)
    with atomic_output(args.output) as sink:
        objective.write_training_jsonl(windows, sink)
    print(f"wrote {len(windows)} synthetic windows -> {args.output}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = _load_run(args.run)
    with _open(args.qrels) as fh:
        qrels = parse_qrels(fh)
    report = evaluate_run(run, qrels, args.k, exponential=args.exp_gain, parallelism=args.parallel)
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    modes = ["generation", "single_token"] if args.modes == "both" else [args.modes]
    texts = _load_texts(args.corpus)
    queries = _load_queries(args.queries)
    backend = _make_backend(args)
    reports: list[LatencyReport] = []
    speedups: dict[str, float] = {}
    for path in args.runs:
        run = _load_run(path)
        name = Path(path).stem
        by_mode = {}
        for mode in modes:
            config = _rerank_config(args, mode)
            _preflight(backend, config)
            by_mode[mode] = bench_rerank(run, backend, config, args.repetitions, name, queries, texts)
            reports.append(by_mode[mode])
        if len(by_mode) == 2:
            speedups[name] = speedup(by_mode["generation"], by_mode["single_token"])

    if args.json:
        print(json.dumps({"reports": [r.to_dict() for r in reports], "speedup_pct": speedups}, indent=2))
    elif args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset", "mode", "wall_time_s", "decode_steps", "speedup_pct"])
        for r in reports:
            pct = speedups.get(r.dataset)
            writer.writerow([r.dataset, r.mode, f"{r.wall_time_s:.6f}", r.decode_steps,
                             f"{pct:.1f}" if pct is not None else ""])
        sys.stdout.write(buf.getvalue())
    else:
        print(latency_table(reports))
        for name, pct in speedups.items():
            print(f"{name}  Speedup {format_speedup(pct)}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("firstrank.service:app", host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default="mock-oracle",
                   help="mock-oracle | mock-scripted | http=<url> | http (uses $%s)" % BACKEND_ENV)
    p.add_argument("--oracle-qrels", help="hidden relevance for mock-oracle (default: seeded hash)")
    p.add_argument("--script", help="file of generation outputs, one per line, for mock-scripted")
    p.add_argument("--simulated-latency", type=float, default=None, metavar="SECONDS",
                   help="per-decode-step sleep for mock backends")
    p.add_argument("--timeout", type=float, default=30.0, help="HTTP timeout in seconds")
    p.add_argument("--retries", type=int, default=2, help="HTTP retry count")


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=_positive_int, default=20, help="window size m")
    p.add_argument("--step", type=_positive_int, default=10, help="step size s")
    p.add_argument("--depth", type=_positive_int, default=100, help="candidates reranked per query")
    p.add_argument("--policy", choices=[p.value for p in RepairPolicy], default="repair")
    p.add_argument("--char-budget", type=_positive_int, default=1000)
    p.add_argument("--corpus", help="JSONL corpus supplying passage text")
    p.add_argument("--queries", help="JSONL queries supplying query text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="firstrank", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 index from a JSONL corpus")
    p.add_argument("corpus")
    p.add_argument("output")
    p.add_argument("--force", action="store_true", help="overwrite an existing index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="BM25 top-k retrieval into a TREC run")
    p.add_argument("index")
    p.add_argument("queries")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--k", type=_positive_int, default=100)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.add_argument("--tag", default="bm25")
    p.add_argument("--parallel", type=_positive_int, default=1)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", help="sliding-window listwise reranking of a run")
    p.add_argument("run")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--mode", choices=[m.value for m in RerankMode], default="single_token")
    p.add_argument("--tag", default="firstrank")
    p.add_argument("--trace", help="write one JSON line per window")
    p.add_argument("--parallel", type=_positive_int, default=1)
    _add_window_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("train", help="train the toy linear scorer on the joint objective")
    p.add_argument("data")
    p.add_argument("--lambda", dest="lam", type=float, default=objective.DEFAULT_LAMBDA)
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=5e-6)
    p.add_argument("--model-out", required=True)
    p.add_argument("--curve-out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write synthetic linear-relevance training windows")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--windows", type=_positive_int, default=500)
    p.add_argument("--m", type=_positive_int, default=5)
    p.add_argument("--dim", type=_positive_int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="nDCG@k of a run against qrels")
    p.add_argument("run")
    p.add_argument("qrels")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--json", action="store_true")
    p.add_argument("--exp-gain", action="store_true", help="use 2^rel - 1 gain")
    p.add_argument("--parallel", type=_positive_int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency of generation vs single-token reranking")
    p.add_argument("runs", nargs="+", help="one run file per dataset")
    p.add_argument("--repetitions", type=_positive_int, default=3)
    p.add_argument("--modes", choices=["both", "single_token", "generation"], default="both")
    out = p.add_mutually_exclusive_group()
    out.add_argument("--json", action="store_true")
    out.add_argument("--csv", action="store_true")
    _add_window_flags(p)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_bench, simulated_latency_default=0.001)

    p = sub.add_parser("serve", help="run the reference HTTP rerank server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "step") and args.step > args.window:
        parser.error(f"--step ({args.step}) must not exceed --window ({args.window})")
    if getattr(args, "window", 0) > 26:
        parser.error("--window must be at most 26 (one letter per passage)")
    if getattr(args, "simulated_latency", 0) is None:
        args.simulated_latency = getattr(args, "simulated_latency_default", None)
    if hasattr(args, "lr") and not args.lr > 0:
        parser.error("--lr must be positive")
    if hasattr(args, "lam") and not args.lam >= 0:
        parser.error("--lambda must be non-negative")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RerankError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
