"""nDCG evaluation of runs and latency benchmarking of the two rerank modes."""

from __future__ import annotations

import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

from .backend import Backend
from .core import CandidateList, ContractError
from .rerank import RerankConfig, RerankError, RerankMode, rerank_run
from .trec_io import Qrels

log = logging.getLogger(__name__)


def _gain(grade: int, exponential: bool) -> float:
    return float(2**grade - 1) if exponential else float(grade)


def dcg(grades: Sequence[int], k: int, exponential: bool = False) -> float:
    return sum(_gain(g, exponential) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def ndcg_at_k(
    ranking: Sequence[str],
    qrels: Qrels,
    query_id: str,
    k: int = 10,
    exponential: bool = False,
) -> float | None:
    """nDCG@k with linear gain (trec_eval ``ndcg_cut``) or 2^rel - 1 gain.

    Returns None when the query has no judgments or no positive judgment;
    such queries are excluded from averages.
    """
    if k < 1:
        raise ContractError(f"cutoff k must be >= 1, got {k}")
    judged = qrels.get(query_id)
    if not judged:
        return None
    ideal = sorted(judged.values(), reverse=True)
    idcg = dcg(ideal, k, exponential)
    if idcg <= 0:
        return None
    return dcg([judged.get(d, 0) for d in ranking], k, exponential) / idcg


@dataclass
class MetricReport:
    metric_name: str
    cutoff: int
    per_query: dict[str, float]
    mean: float
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max([len(self.metric_name), *map(len, self.per_query), 4])
        lines = [f"{self.metric_name:<{width}}  {q}  {v:.4f}" for q, v in self.per_query.items()]
        lines.append(f"{self.metric_name:<{width}}  all  {self.mean:.4f}")
        if self.excluded:
            lines.append(f"excluded {len(self.excluded)} quer{'y' if len(self.excluded) == 1 else 'ies'} "
                         f"without positive judgments: {' '.join(self.excluded)}")
        return "\n".join(lines)


def evaluate_run(
    run: Mapping[str, CandidateList],
    qrels: Qrels,
    k: int = 10,
    exponential: bool = False,
    parallelism: int = 1,
) -> MetricReport:
    """Mean nDCG@k over the queries present in both the run and the qrels."""
    if k < 1:
        raise ContractError(f"cutoff k must be >= 1, got {k}")
    common = [q for q in run if q in qrels]
    if not common:
        raise ContractError(
            f"run and qrels share no queries (run: {sorted(run)[:10]}, qrels: {sorted(qrels)[:10]})"
        )
    unmatched = [q for q in run if q not in qrels]
    if unmatched:
        log.warning("%d run queries have no qrels and are excluded: %s", len(unmatched), unmatched)
    per_query: dict[str, float] = {}
    excluded = list(unmatched)
    ordered = sorted(common)
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        values = pool.map(lambda q: ndcg_at_k(run[q].doc_ids, qrels, q, k, exponential), ordered)
    for qid, value in zip(ordered, values):
        if value is None:
            excluded.append(qid)
        else:
            per_query[qid] = value
    mean = math.fsum(per_query.values()) / len(per_query) if per_query else 0.0
    name = f"ndcg_cut_{k}" if not exponential else f"ndcg_exp_cut_{k}"
    return MetricReport(name, k, per_query, mean, sorted(excluded))


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

@dataclass
class LatencyReport:
    """Timing of one rerank mode over one dataset.

    ``wall_time_s`` is the median end-to-end rerank time over the measured
    repetitions (prompt construction plus backend calls); ``backend_time_s``
    is the median time spent inside window ranking. ``simulated_time_s`` is
    ``decode_steps * simulated_per_token_latency`` for mock backends.
    """

    dataset: str
    mode: str
    wall_time_s: float
    decode_steps: int
    windows: int
    queries: int = 0
    backend_time_s: float = 0.0
    simulated_time_s: float | None = None
    repetitions: int = 1
    samples_s: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.wall_time_s < 0 or self.decode_steps < 0 or self.windows < 0:
            raise ContractError("latency report values must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def bench_rerank(
    run: Mapping[str, CandidateList],
    backend: Backend,
    config: RerankConfig,
    repetitions: int = 3,
    dataset: str = "dataset",
    queries: Mapping[str, str] | None = None,
    texts: Mapping[str, str] | None = None,
) -> LatencyReport:
    """Time ``rerank_run`` serially: one discarded warm-up, then the median of N runs."""
    if repetitions < 1:
        raise ContractError(f"repetitions must be >= 1, got {repetitions}")
    config = replace(config, parallelism=1)
    samples: list[float] = []
    backend_samples: list[float] = []
    steps_seen: set[tuple[int, int]] = set()
    for rep in range(repetitions + 1):
        t0 = time.perf_counter()
        result = rerank_run(run, backend, config, queries, texts)
        elapsed = time.perf_counter() - t0
        if not result.ok:
            first = next(iter(result.failures.values()))
            raise RerankError(first.query_id, first.traces, first.cause)
        traces = result.all_traces()
        if rep == 0:
            continue
        samples.append(elapsed)
        backend_samples.append(sum(t.wall_time for t in traces))
        steps_seen.add((sum(t.decode_steps for t in traces), len(traces)))
    if len(steps_seen) != 1:
        log.warning("decode steps varied across repetitions: %s", sorted(steps_seen))
    decode_steps, windows = max(steps_seen)
    tau = backend.descriptor.simulated_per_token_latency
    return LatencyReport(
        dataset=dataset,
        mode=config.mode.value,
        wall_time_s=statistics.median(samples),
        decode_steps=decode_steps,
        windows=windows,
        queries=len(run),
        backend_time_s=statistics.median(backend_samples),
        simulated_time_s=decode_steps * tau if tau else None,
        repetitions=repetitions,
        samples_s=samples,
    )


def speedup_pct(t_generation: float, t_single: float) -> float:
    """Relative time saved by the single-token path, in percent."""
    if t_generation <= 0:
        raise ContractError(f"generation time must be positive, got {t_generation}")
    return (t_generation - t_single) / t_generation * 100.0


def speedup(
    generation: LatencyReport, single: LatencyReport, basis: str = "wall_time_s"
) -> float:
    if generation.mode != RerankMode.GENERATION.value or single.mode != RerankMode.SINGLE_TOKEN.value:
        raise ContractError(
            f"speedup needs a generation and a single_token report, got {generation.mode} and {single.mode}"
        )
    if generation.dataset != single.dataset:
        raise ContractError(f"reports cover different datasets: {generation.dataset} vs {single.dataset}")
    if generation.windows != single.windows:
        raise ContractError(
            f"reports cover different window totals: {generation.windows} vs {single.windows}"
        )
    t_gen, t_single = getattr(generation, basis), getattr(single, basis)
    if t_gen is None or t_single is None:
        raise ContractError(f"both reports need a value for {basis}")
    return speedup_pct(t_gen, t_single)


def format_speedup(pct: float) -> str:
    """Render like the latency tables: ``+24.7%``."""
    # Avoid printing "-0.0%" for a tiny negative rounding residue.
    rounded = round(pct, 1)
    return f"{rounded + 0.0:+.1f}%"


def latency_table(reports: Sequence[LatencyReport]) -> str:
    header = ("dataset", "mode", "wall_time_s", "decode_steps", "windows")
    rows = [header] + [
        (r.dataset, r.mode, f"{r.wall_time_s:.4f}", str(r.decode_steps), str(r.windows)) for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)
