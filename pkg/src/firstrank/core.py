"""Domain types shared across the retrieval, reranking and evaluation layers.

Everything here is an immutable value. Ordering convention used throughout
the package: descending score, ties broken by ascending doc_id.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class ContractError(ValueError):
    """A precondition or invariant of a domain operation was violated."""


def _check_id(kind: str, value: str) -> None:
    if not value:
        raise ContractError(f"{kind} id must be non-empty")
    if any(ch.isspace() for ch in value):
        raise ContractError(f"{kind} id {value!r} contains whitespace")


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self) -> None:
        _check_id("query", self.id)


@dataclass(frozen=True)
class Document:
    id: str
    text: str

    def __post_init__(self) -> None:
        _check_id("document", self.id)

    @property
    def is_empty(self) -> bool:
        return not self.text.strip()


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float

    def __post_init__(self) -> None:
        _check_id("document", self.doc_id)
        if not math.isfinite(self.score):
            raise ContractError(f"score for {self.doc_id!r} is not finite: {self.score}")


def ranking_key(doc: ScoredDoc) -> tuple[float, str]:
    """Sort key implementing descending score, ascending doc_id."""
    return (-doc.score, doc.doc_id)


@dataclass(frozen=True)
class CandidateList:
    """Ordered candidates for one query.

    The constructor validates the ordering invariant; use :meth:`from_unsorted`
    to build a list from arbitrary (doc_id, score) pairs.
    """

    query_id: str
    entries: tuple[ScoredDoc, ...] = ()

    def __post_init__(self) -> None:
        _check_id("query", self.query_id)
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[str] = set()
        for doc in self.entries:
            if doc.doc_id in seen:
                raise ContractError(
                    f"duplicate doc_id {doc.doc_id!r} in candidates for {self.query_id!r}"
                )
            seen.add(doc.doc_id)
        for prev, cur in zip(self.entries, self.entries[1:]):
            if ranking_key(prev) > ranking_key(cur):
                raise ContractError(
                    f"candidates for {self.query_id!r} are not ordered by descending "
                    f"score then doc_id: {prev.doc_id}@{prev.score} before "
                    f"{cur.doc_id}@{cur.score}"
                )

    @classmethod
    def from_unsorted(
        cls, query_id: str, pairs: Iterable[tuple[str, float] | ScoredDoc]
    ) -> CandidateList:
        docs = [p if isinstance(p, ScoredDoc) else ScoredDoc(p[0], float(p[1])) for p in pairs]
        return cls(query_id, tuple(sorted(docs, key=ranking_key)))

    @classmethod
    def from_order(cls, query_id: str, doc_ids: Sequence[str]) -> CandidateList:
        """Build a list whose order is `doc_ids`, with rank-derived scores n, n-1, ..., 1."""
        n = len(doc_ids)
        return cls(query_id, tuple(ScoredDoc(d, float(n - i)) for i, d in enumerate(doc_ids)))

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def head(self, k: int) -> CandidateList:
        return CandidateList(self.query_id, self.entries[:k])


DEFAULT_WINDOW_SIZE = 20
DEFAULT_STEP_SIZE = 10


@dataclass(frozen=True)
class IdentifierScheme:
    alphabet: tuple[str, ...] = tuple(string.ascii_uppercase)

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ContractError("identifiers in a scheme must be distinct")
        for ident in self.alphabet:
            if len(ident) != 1 or ident.isspace():
                raise ContractError(f"identifier {ident!r} is not a single symbol")

    @classmethod
    def letters(cls, size: int = 26) -> IdentifierScheme:
        if not 1 <= size <= 26:
            raise ContractError(f"letter scheme size must be in 1..26, got {size}")
        return cls(tuple(string.ascii_uppercase[:size]))

    def __len__(self) -> int:
        return len(self.alphabet)

    def index(self, identifier: str) -> int:
        return self.alphabet.index(identifier)


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = DEFAULT_WINDOW_SIZE
    step_size: int = DEFAULT_STEP_SIZE

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ContractError(f"window size must be positive, got {self.window_size}")
        if not 1 <= self.step_size <= self.window_size:
            raise ContractError(
                f"step size must satisfy 1 <= s <= m (m={self.window_size}), got {self.step_size}"
            )

    def validate_scheme(self, scheme: IdentifierScheme) -> None:
        if self.window_size > len(scheme):
            raise ContractError(
                f"window size {self.window_size} exceeds identifier scheme size {len(scheme)}"
            )


@dataclass(frozen=True)
class Permutation:
    """Window reordering: ``order[i]`` is the input position placed at output rank i."""

    order: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if sorted(self.order) != list(range(len(self.order))):
            raise ContractError(f"{list(self.order)} is not a permutation of 0..{len(self.order) - 1}")

    @classmethod
    def identity(cls, k: int) -> Permutation:
        return cls(tuple(range(k)))

    def inverse(self) -> Permutation:
        inv = [0] * len(self.order)
        for rank, pos in enumerate(self.order):
            inv[pos] = rank
        return Permutation(tuple(inv))

    def __len__(self) -> int:
        return len(self.order)


def apply_permutation(window_docs: Sequence, perm: Permutation) -> list:
    """Return ``[window_docs[j] for j in perm.order]``."""
    if len(perm) != len(window_docs):
        raise ContractError(
            f"permutation length {len(perm)} does not match window length {len(window_docs)}"
        )
    return [window_docs[j] for j in perm.order]


def identifier_for(position: int, scheme: IdentifierScheme) -> str:
    if not 0 <= position < len(scheme):
        raise ContractError(f"position {position} outside identifier scheme of size {len(scheme)}")
    return scheme.alphabet[position]
