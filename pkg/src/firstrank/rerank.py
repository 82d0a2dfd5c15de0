"""Sliding-window listwise reranking.

Windows of ``m`` candidates are reordered back to front with stride ``s``;
each window's new order is written into the list before the next (earlier)
window is formed, so strong candidates bubble toward the top. A window is
ranked either from first-token identifier scores or by parsing a generated
ranking string.
"""

from __future__ import annotations

import enum
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backend import Backend, PromptWindow
from .core import (
    CandidateList,
    ContractError,
    IdentifierScheme,
    Permutation,
    ScoredDoc,
    WindowConfig,
    apply_permutation,
    identifier_for,
)
from .retriever import DEFAULT_DEPTH

log = logging.getLogger(__name__)

DEFAULT_CHAR_BUDGET = 1000


class RerankMode(str, enum.Enum):
    SINGLE_TOKEN = "single_token"
    GENERATION = "generation"


class RepairPolicy(str, enum.Enum):
    STRICT = "strict"
    REPAIR = "repair"


class PermutationParseError(ContractError):
    """A generated ranking is not a valid permutation under the strict policy."""


class RerankError(RuntimeError):
    """Reranking of one query aborted; carries the traces of completed windows."""

    def __init__(self, query_id: str, traces: list[WindowTrace], cause: Exception):
        self.query_id = query_id
        self.traces = traces
        self.cause = cause
        super().__init__(
            f"reranking query {query_id!r} failed after {len(traces)} window(s): {cause}"
        )


@dataclass(frozen=True)
class RerankConfig:
    window: WindowConfig = WindowConfig()
    mode: RerankMode = RerankMode.SINGLE_TOKEN
    scheme: IdentifierScheme = IdentifierScheme()
    repair_policy: RepairPolicy = RepairPolicy.REPAIR
    depth: int = DEFAULT_DEPTH
    char_budget: int = DEFAULT_CHAR_BUDGET
    parallelism: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RerankMode(self.mode))
        object.__setattr__(self, "repair_policy", RepairPolicy(self.repair_policy))
        self.window.validate_scheme(self.scheme)
        if self.depth < 1:
            raise ContractError(f"depth must be >= 1, got {self.depth}")
        if self.char_budget < 1:
            raise ContractError(f"char_budget must be >= 1, got {self.char_budget}")
        if self.parallelism < 1:
            raise ContractError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass
class WindowTrace:
    query_id: str
    window_start: int
    input_doc_ids: list[str]
    output_doc_ids: list[str]
    decode_steps: int
    wall_time: float
    repairs_applied: list[str] = field(default_factory=list)
    truncated: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "window_start": self.window_start,
            "input_doc_ids": self.input_doc_ids,
            "output_doc_ids": self.output_doc_ids,
            "decode_steps": self.decode_steps,
            "wall_time_s": self.wall_time,
            "repairs_applied": self.repairs_applied,
            "truncated": self.truncated,
        }


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

_WS = re.compile(r"\s+")


def _one_line(text: str) -> str:
    return _WS.sub(" ", text).strip()


def build_prompt(
    query_id: str,
    query_text: str,
    docs: Sequence[tuple[str, str]],
    scheme: IdentifierScheme,
    char_budget: int = DEFAULT_CHAR_BUDGET,
) -> PromptWindow:
    """Render a listwise ranking prompt for ``docs`` given as (doc_id, text) pairs.

    Passages are collapsed to a single line and cut at ``char_budget``
    characters; truncated doc_ids are reported on the returned window.
    """
    if len(docs) > len(scheme):
        raise ContractError(f"{len(docs)} passages exceed identifier scheme of size {len(scheme)}")
    query = _one_line(query_text)
    passages = []
    truncated = []
    for pos, (doc_id, text) in enumerate(docs):
        body = _one_line(text)
        if len(body) > char_budget:
            body = body[:char_budget].rstrip()
            truncated.append(doc_id)
        passages.append((identifier_for(pos, scheme), body))
    k = len(passages)
    example = format_example(scheme, k)
    lines = [
        f"I will provide you with {k} passages, each indicated by an alphabetical identifier. "
        f"Rank the passages based on their relevance to the search query: {query}",
        "",
        *(f"{ident}. {body}" for ident, body in passages),
        "",
        f"Search Query: {query}",
        f"Rank the {k} passages above based on their relevance to the search query. "
        "List all passage identifiers in descending order of relevance. "
        f"The output format should be an identifier ranking like {example}. "
        "Only respond with the identifier ranking.",
    ]
    return PromptWindow(
        query_id=query_id,
        query_text=query_text,
        doc_ids=tuple(d for d, _ in docs),
        passages=tuple(passages),
        rendered_prompt="\n".join(lines),
        truncated=tuple(truncated),
    )


def format_example(scheme: IdentifierScheme, k: int) -> str:
    sample = [scheme.alphabet[i] for i in (1, 0, 2) if i < k] or [scheme.alphabet[0]]
    return " > ".join(sample)


# ---------------------------------------------------------------------------
# Window ranking
# ---------------------------------------------------------------------------

def order_by_logits(window: PromptWindow, logits: Mapping[str, float]) -> Permutation:
    """Positions sorted by descending score; equal scores keep window order."""
    idents = window.identifiers
    missing = [i for i in idents if i not in logits]
    extra = sorted(set(logits) - set(idents))
    if missing or extra:
        raise ContractError(f"logits do not match window identifiers (missing {missing}, extra {extra})")
    values = [logits[i] for i in idents]
    return Permutation(tuple(sorted(range(len(values)), key=lambda i: -values[i])))


def rank_window_single_token(window: PromptWindow, backend: Backend) -> Permutation:
    if len(window) == 0:
        raise ContractError("window is empty")
    result = backend.first_token_logits(window)
    return order_by_logits(window, result.scores)


_STRICT_ITEM = r"\s*(\[[^\[\]\s>]+\]|[^\s>\[\]]+)\s*"
_STRICT_RE = re.compile(rf"{_STRICT_ITEM}(?:>{_STRICT_ITEM})*")
_SYMBOL_RE = re.compile(r"[0-9A-Za-z]+")


def parse_permutation(
    raw_text: str,
    k: int,
    scheme: IdentifierScheme,
    policy: RepairPolicy | str = RepairPolicy.REPAIR,
    repairs: list[str] | None = None,
) -> Permutation:
    """Turn generated text like ``"B > A > C"`` into a permutation of 0..k-1.

    Strict policy accepts only a ``>``-separated list (identifiers optionally
    bracketed) naming each of the first ``k`` identifiers exactly once.
    Repair policy keeps the first occurrence of every valid identifier,
    drops anything else, then appends missing identifiers in window order.
    Repair notes are appended to ``repairs`` when given.
    """
    if k < 1:
        raise ContractError(f"window size must be >= 1, got {k}")
    if k > len(scheme):
        raise ContractError(f"window size {k} exceeds identifier scheme of size {len(scheme)}")
    policy = RepairPolicy(policy)
    valid = {scheme.alphabet[i]: i for i in range(k)}

    if policy is RepairPolicy.STRICT:
        if not _STRICT_RE.fullmatch(raw_text):
            raise PermutationParseError(f"malformed ranking {raw_text!r}")
        items = [item.strip().strip("[]") for item in raw_text.split(">")]
        unknown = [s for s in items if s not in valid]
        if unknown:
            raise PermutationParseError(f"unknown identifiers {unknown} in {raw_text!r}")
        dupes = sorted({s for s in items if items.count(s) > 1})
        if dupes:
            raise PermutationParseError(f"duplicate identifiers {dupes} in {raw_text!r}")
        missing = [s for s in valid if s not in items]
        if missing:
            raise PermutationParseError(f"missing identifiers {missing} in {raw_text!r}")
        return Permutation(tuple(valid[s] for s in items))

    notes = repairs if repairs is not None else []
    order: list[int] = []
    kept: set[int] = set()
    dropped: list[str] = []
    duplicated: list[str] = []
    for sym in _SYMBOL_RE.findall(raw_text):
        pos = valid.get(sym)
        if pos is None:
            dropped.append(sym)
        elif pos in kept:
            duplicated.append(sym)
        else:
            kept.add(pos)
            order.append(pos)
    if not order:
        notes.append("no valid identifiers; kept window order")
        return Permutation.identity(k)
    if dropped:
        notes.append(f"dropped unknown symbols {dropped}")
    if duplicated:
        notes.append(f"dropped repeated identifiers {duplicated}")
    missing = [i for i in range(k) if i not in kept]
    if missing:
        notes.append(f"appended missing identifiers {[scheme.alphabet[i] for i in missing]}")
        order.extend(missing)
    return Permutation(tuple(order))


def rank_window_generation(
    window: PromptWindow,
    backend: Backend,
    scheme: IdentifierScheme,
    policy: RepairPolicy | str = RepairPolicy.REPAIR,
) -> tuple[Permutation, int, list[str]]:
    out = backend.generate_permutation(window)
    repairs: list[str] = []
    perm = parse_permutation(out.raw_text, len(window), scheme, policy, repairs)
    return perm, out.decode_steps, repairs


# ---------------------------------------------------------------------------
# Sliding window
# ---------------------------------------------------------------------------

def window_starts(n: int, window_size: int, step_size: int) -> list[int]:
    """Back-to-front window start positions; the last window is clamped to 0."""
    if n <= 0:
        return []
    starts = [max(0, n - window_size)]
    while starts[-1] > 0:
        starts.append(max(0, starts[-1] - step_size))
    return starts


def slide_rerank(
    candidates: CandidateList,
    backend: Backend,
    config: RerankConfig = RerankConfig(),
    query_text: str = "",
    texts: Mapping[str, str] | None = None,
) -> tuple[CandidateList, list[WindowTrace]]:
    """Rerank one candidate list with the sliding-window schedule.

    ``texts`` maps doc_id to passage text (missing docs render as empty
    passages). The output keeps exactly the input documents, rescored
    n, n-1, ..., 1 by their new position. Any backend or parse failure
    raises :class:`RerankError` carrying the traces gathered so far.
    """
    if len(candidates) == 0:
        raise ContractError(f"no candidates for query {candidates.query_id!r}")
    texts = texts or {}
    m, s = config.window.window_size, config.window.step_size
    docs: list[ScoredDoc] = list(candidates.entries)
    traces: list[WindowTrace] = []
    for start in window_starts(len(docs), m, s):
        chunk = docs[start:start + m]
        t0 = time.perf_counter()
        try:
            window = build_prompt(
                candidates.query_id, query_text,
                [(d.doc_id, texts.get(d.doc_id, "")) for d in chunk],
                config.scheme, config.char_budget,
            )
            repairs: list[str] = []
            if config.mode is RerankMode.SINGLE_TOKEN:
                perm, steps = rank_window_single_token(window, backend), 1
            else:
                perm, steps, repairs = rank_window_generation(
                    window, backend, config.scheme, config.repair_policy
                )
            reordered = apply_permutation(chunk, perm)
        except Exception as exc:
            raise RerankError(candidates.query_id, traces, exc) from exc
        elapsed = time.perf_counter() - t0
        docs[start:start + m] = reordered
        traces.append(WindowTrace(
            query_id=candidates.query_id,
            window_start=start,
            input_doc_ids=[d.doc_id for d in chunk],
            output_doc_ids=[d.doc_id for d in reordered],
            decode_steps=steps,
            wall_time=elapsed,
            repairs_applied=repairs,
            truncated=list(window.truncated),
        ))
    return CandidateList.from_order(candidates.query_id, [d.doc_id for d in docs]), traces


@dataclass
class RerankResult:
    run: dict[str, CandidateList]
    traces: dict[str, list[WindowTrace]]
    failures: dict[str, RerankError]

    @property
    def ok(self) -> bool:
        return not self.failures

    def all_traces(self) -> list[WindowTrace]:
        return [t for qid in self.run for t in self.traces.get(qid, [])]


def rerank_run(
    run: Mapping[str, CandidateList],
    backend: Backend,
    config: RerankConfig = RerankConfig(),
    queries: Mapping[str, str] | None = None,
    texts: Mapping[str, str] | None = None,
) -> RerankResult:
    """Rerank the top ``config.depth`` candidates of every query independently.

    Candidates below the depth cutoff are kept after the reranked head.
    Failed queries are collected in ``failures`` and left out of the output
    run; the other queries are unaffected. Output order follows input order.
    """
    queries = queries or {}

    def one(qid: str, clist: CandidateList):
        if len(clist) == 0:
            return clist, []
        head, tail = clist.entries[:config.depth], clist.entries[config.depth:]
        reranked, traces = slide_rerank(
            CandidateList(qid, head), backend, config, queries.get(qid, ""), texts
        )
        order = reranked.doc_ids + [d.doc_id for d in tail]
        return CandidateList.from_order(qid, order), traces

    items = list(run.items())
    out_run: dict[str, CandidateList] = {}
    out_traces: dict[str, list[WindowTrace]] = {}
    failures: dict[str, RerankError] = {}

    def collect(qid: str, fn):
        try:
            out_run[qid], out_traces[qid] = fn()
        except RerankError as exc:
            log.error("%s", exc)
            failures[qid] = exc
            out_traces[qid] = exc.traces

    if config.parallelism == 1 or len(items) <= 1:
        for qid, clist in items:
            collect(qid, lambda q=qid, c=clist: one(q, c))
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            futures = [(qid, pool.submit(one, qid, clist)) for qid, clist in items]
            for qid, fut in futures:
                collect(qid, fut.result)
    ordered_run = {qid: out_run[qid] for qid, _ in items if qid in out_run}
    ordered_traces = {qid: out_traces[qid] for qid, _ in items if qid in out_traces}
    return RerankResult(ordered_run, ordered_traces, failures)
