"""Readers and writers for JSONL corpora/queries, TREC run files and qrels."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from typing import Iterable, Iterator, Mapping, TextIO

from .core import CandidateList, ContractError, Document, Query, ScoredDoc, ranking_key

log = logging.getLogger(__name__)

Qrels = dict[str, dict[str, int]]
"""query_id -> doc_id -> relevance grade."""

Run = dict[str, CandidateList]


class FormatError(ValueError):
    """Malformed input file; the message names the offending line."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


def _json_objects(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", line_no) from None
        if not isinstance(obj, dict):
            raise FormatError("expected a JSON object", line_no)
        yield line_no, obj


def _string_field(obj: dict, names: tuple[str, ...], line_no: int) -> str:
    for name in names:
        if name in obj:
            value = obj[name]
            if not isinstance(value, str):
                raise FormatError(f"field {name!r} must be a string", line_no)
            return value
    raise FormatError(f"missing field {names[0]!r}", line_no)


def parse_corpus_jsonl(lines: Iterable[str]) -> Iterator[Document]:
    """Yield documents from ``{"id": ..., "contents": ...}`` lines (``text`` accepted too)."""
    seen: set[str] = set()
    for line_no, obj in _json_objects(lines):
        doc_id = _string_field(obj, ("id", "docid", "_id"), line_no)
        text = _string_field(obj, ("contents", "text"), line_no)
        if doc_id in seen:
            raise FormatError(f"duplicate document id {doc_id!r}", line_no)
        seen.add(doc_id)
        try:
            doc = Document(doc_id, text)
        except ContractError as exc:
            raise FormatError(str(exc), line_no) from None
        if doc.is_empty:
            log.warning("document %s on line %d has empty text", doc_id, line_no)
        yield doc


def parse_queries_jsonl(lines: Iterable[str]) -> Iterator[Query]:
    seen: set[str] = set()
    for line_no, obj in _json_objects(lines):
        qid = _string_field(obj, ("id", "qid", "_id"), line_no)
        text = _string_field(obj, ("text", "contents", "query"), line_no)
        if qid in seen:
            raise FormatError(f"duplicate query id {qid!r}", line_no)
        seen.add(qid)
        try:
            yield Query(qid, text)
        except ContractError as exc:
            raise FormatError(str(exc), line_no) from None


def parse_run(lines: Iterable[str]) -> Run:
    """Parse six-column TREC run rows into per-query candidate lists.

    Rows may appear in any order and queries may be interleaved. Within a
    query the ranks must be exactly 1..n. Lists are returned in rank order;
    if that order disagrees with the scores (or breaks a tie against doc_id
    order) the list is re-sorted by the package ordering and a warning is
    logged.
    """
    rows: dict[str, list[tuple[int, str, float, int]]] = defaultdict(list)
    seen: set[tuple[str, str]] = set()
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise FormatError(f"expected 6 columns 'qid Q0 docid rank score tag', got {len(parts)}", line_no)
        qid, _q0, doc_id, rank_s, score_s, _tag = parts
        try:
            rank = int(rank_s)
        except ValueError:
            raise FormatError(f"rank {rank_s!r} is not an integer", line_no) from None
        try:
            score = float(score_s)
        except ValueError:
            raise FormatError(f"score {score_s!r} is not numeric", line_no) from None
        if not math.isfinite(score):
            raise FormatError(f"score {score_s!r} is not finite", line_no)
        if rank < 1:
            raise FormatError(f"rank must be positive, got {rank}", line_no)
        if (qid, doc_id) in seen:
            raise FormatError(f"duplicate (query, doc) pair ({qid}, {doc_id})", line_no)
        seen.add((qid, doc_id))
        rows[qid].append((rank, doc_id, score, line_no))

    run: Run = {}
    for qid, qrows in rows.items():
        qrows.sort()
        for expected, (rank, doc_id, _score, line_no) in enumerate(qrows, start=1):
            if rank != expected:
                raise FormatError(
                    f"ranks for query {qid!r} are not contiguous: expected {expected}, "
                    f"found {rank} (doc {doc_id})",
                    line_no,
                )
        docs = [ScoredDoc(doc_id, score) for _rank, doc_id, score, _ in qrows]
        ordered = sorted(docs, key=ranking_key)
        if ordered != docs:
            log.warning("run order for query %s disagrees with scores; re-sorted by score", qid)
        run[qid] = CandidateList(qid, tuple(ordered))
    return run


def format_run(candidates: Mapping[str, CandidateList], tag: str) -> Iterator[str]:
    if not tag or any(ch.isspace() for ch in tag):
        raise ContractError(f"run tag must be a non-empty token, got {tag!r}")
    for qid, clist in candidates.items():
        for rank, doc in enumerate(clist.entries, start=1):
            yield f"{qid} Q0 {doc.doc_id} {rank} {doc.score:.6f} {tag}\n"


def write_run(candidates: Mapping[str, CandidateList], tag: str, sink: TextIO) -> None:
    for row in format_run(candidates, tag):
        sink.write(row)


def parse_qrels(lines: Iterable[str]) -> Qrels:
    qrels: Qrels = defaultdict(dict)
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise FormatError(f"expected 4 columns 'qid 0 docid grade', got {len(parts)}", line_no)
        qid, _iter, doc_id, grade_s = parts
        try:
            grade = int(grade_s)
        except ValueError:
            raise FormatError(f"grade {grade_s!r} is not an integer", line_no) from None
        if grade < 0:
            raise FormatError(f"negative grade {grade}", line_no)
        if doc_id in qrels[qid]:
            raise FormatError(f"duplicate judgment for ({qid}, {doc_id})", line_no)
        qrels[qid][doc_id] = grade
    return dict(qrels)


def write_qrels(qrels: Mapping[str, Mapping[str, int]], sink: TextIO) -> None:
    for qid, judged in qrels.items():
        for doc_id, grade in judged.items():
            sink.write(f"{qid} 0 {doc_id} {grade}\n")
