"""Inference backends for listwise window reranking.

A backend answers one of two questions about a prompt window: the
first-token score of every identifier (single-token path), or a generated
identifier ranking such as ``"B > A > C"`` (generation path).

Decode-step model shared by the mocks: one step per emitted identifier and
one per separator, so a full ranking of k passages costs ``2k - 1`` steps and
the single-token path costs exactly one.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from itertools import cycle
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .core import ContractError, IdentifierScheme

log = logging.getLogger(__name__)

RERANK_PATH = "/v1/rerank_window"
TOKENIZE_PATH = "/v1/tokenize"


class BackendError(RuntimeError):
    """Transport failure or malformed response from a backend."""


class CapabilityError(BackendError):
    """The backend does not support the requested inference mode."""


@dataclass(frozen=True)
class PromptWindow:
    query_id: str
    query_text: str
    doc_ids: tuple[str, ...]
    passages: tuple[tuple[str, str], ...]
    rendered_prompt: str
    truncated: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.doc_ids) != len(self.passages):
            raise ContractError("doc_ids and passages must have equal length")
        idents = self.identifiers
        if len(set(idents)) != len(idents):
            raise ContractError(f"duplicate identifiers in window: {idents}")

    @property
    def identifiers(self) -> list[str]:
        return [ident for ident, _ in self.passages]

    def __len__(self) -> int:
        return len(self.passages)


@dataclass(frozen=True)
class FirstTokenLogits:
    scores: Mapping[str, float]


@dataclass(frozen=True)
class GenerationOutput:
    raw_text: str
    token_count: int
    decode_steps: int

    def __post_init__(self) -> None:
        if self.decode_steps < 1:
            raise ContractError(f"decode_steps must be >= 1, got {self.decode_steps}")


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    supports_logits: bool
    supports_generation: bool
    simulated_per_token_latency: float | None = None

    def __post_init__(self) -> None:
        if not (self.supports_logits or self.supports_generation):
            raise ContractError("a backend must support logits or generation")


def generation_decode_steps(k: int) -> int:
    """Decode steps for emitting a k-identifier ranking with k-1 separators."""
    return 2 * k - 1


def format_ranking(identifiers: Iterable[str]) -> str:
    return " > ".join(identifiers)


class Backend:
    """Base class; subclasses override the operations they support."""

    descriptor: BackendDescriptor

    def first_token_logits(self, window: PromptWindow) -> FirstTokenLogits:
        raise CapabilityError(f"{self.descriptor.name} does not support first-token logits")

    def generate_permutation(self, window: PromptWindow) -> GenerationOutput:
        raise CapabilityError(f"{self.descriptor.name} does not support generation")

    def check_identifiers(self, scheme: IdentifierScheme) -> list[str]:
        if len(scheme) == 0:
            raise ContractError("identifier scheme is empty")
        return []

    def _require(self, window: PromptWindow, capability: bool, what: str) -> None:
        if not capability:
            raise CapabilityError(f"{self.descriptor.name} does not support {what}")
        if len(window) == 0:
            raise ContractError("window is empty")

    def _simulate(self, decode_steps: int) -> None:
        tau = self.descriptor.simulated_per_token_latency
        if tau:
            time.sleep(decode_steps * tau)


RelevanceFn = Callable[[str, str], float]


def hashed_relevance(seed: int) -> RelevanceFn:
    """Deterministic pseudo-random relevance in [0, 1) from (seed, query_id, doc_id)."""

    def relevance(query_id: str, doc_id: str) -> float:
        digest = hashlib.blake2b(f"{seed}\x1f{query_id}\x1f{doc_id}".encode(), digest_size=8)
        return int.from_bytes(digest.digest(), "big") / 2.0**64

    return relevance


class OracleBackend(Backend):
    """Mock that knows the hidden relevance of every (query, doc) pair.

    Logits are the hidden scores themselves. Generation emits the exact
    descending-score ranking, ties kept in window order, so both inference
    paths agree by construction.
    """

    def __init__(self, relevance: RelevanceFn, per_token_latency: float | None = None,
                 name: str = "mock-oracle"):
        self.relevance = relevance
        self.descriptor = BackendDescriptor(name, True, True, per_token_latency)

    @classmethod
    def from_doc_scores(cls, scores: Mapping[str, float], **kwargs) -> OracleBackend:
        return cls(lambda _qid, doc_id: scores[doc_id], **kwargs)

    @classmethod
    def from_qrels(cls, qrels: Mapping[str, Mapping[str, int]], **kwargs) -> OracleBackend:
        return cls(lambda qid, doc_id: float(qrels.get(qid, {}).get(doc_id, 0)), **kwargs)

    def _hidden(self, window: PromptWindow) -> list[float]:
        return [float(self.relevance(window.query_id, d)) for d in window.doc_ids]

    def first_token_logits(self, window: PromptWindow) -> FirstTokenLogits:
        self._require(window, True, "first-token logits")
        hidden = self._hidden(window)
        self._simulate(1)
        return FirstTokenLogits(dict(zip(window.identifiers, hidden)))

    def generate_permutation(self, window: PromptWindow) -> GenerationOutput:
        self._require(window, True, "generation")
        hidden = self._hidden(window)
        order = sorted(range(len(hidden)), key=lambda i: (-hidden[i], i))
        idents = window.identifiers
        steps = generation_decode_steps(len(order))
        self._simulate(steps)
        return GenerationOutput(format_ranking(idents[i] for i in order), steps, steps)


class ScriptedBackend(Backend):
    """Mock replaying scripted outputs, possibly malformed.

    ``script`` is either a sequence of strings (cycled) or a callable taking
    the window. ``logits`` optionally enables the single-token path.
    """

    def __init__(
        self,
        script: Sequence[str] | Callable[[PromptWindow], str],
        logits: Callable[[PromptWindow], Mapping[str, float]] | None = None,
        per_token_latency: float | None = None,
        name: str = "mock-scripted",
    ):
        self._lock = threading.Lock()
        if callable(script):
            self._next = script
        else:
            if not script:
                raise ContractError("scripted backend needs at least one output")
            it = cycle(list(script))

            def _next(_window: PromptWindow) -> str:
                with self._lock:
                    return next(it)

            self._next = _next
        self._logits = logits
        self.descriptor = BackendDescriptor(name, logits is not None, True, per_token_latency)

    def first_token_logits(self, window: PromptWindow) -> FirstTokenLogits:
        self._require(window, self._logits is not None, "first-token logits")
        self._simulate(1)
        return FirstTokenLogits(dict(self._logits(window)))

    def generate_permutation(self, window: PromptWindow) -> GenerationOutput:
        self._require(window, True, "generation")
        text = self._next(window)
        # Symbols plus separators under the decode-step model, at least one step.
        steps = max(1, len(text.replace(">", " > ").split()))
        self._simulate(steps)
        return GenerationOutput(text, steps, steps)


@dataclass
class HttpBackend(Backend):
    """Client for a remote server speaking the ``/v1/rerank_window`` contract.

    Request body: ``{"prompt", "identifiers", "mode", "max_tokens"}``. Logits
    mode answers ``{"logits": {ident: float}}``; generate mode answers
    ``{"text": str, "decode_steps": int}``. Any non-2xx status or malformed
    body raises :class:`BackendError`. Identifier tokenization is checked
    through ``/v1/tokenize`` (``{"texts": [...]}`` -> ``{"tokens": [[...]]}``).
    """

    base_url: str
    timeout: float = 30.0
    retries: int = 2
    client: httpx.Client | None = None
    descriptor: BackendDescriptor = field(init=False)

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ContractError("retries must be >= 0")
        self.base_url = self.base_url.rstrip("/")
        self.descriptor = BackendDescriptor(f"http:{self.base_url}", True, True)
        if self.client is None:
            self.client = httpx.Client(base_url=self.base_url, timeout=self.timeout)

    def close(self) -> None:
        self.client.close()

    def _post(self, path: str, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(path, json=body, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = exc
                log.warning("POST %s failed (attempt %d): %s", path, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last = BackendError(f"POST {path} returned {resp.status_code}")
                log.warning("POST %s returned %d (attempt %d)", path, resp.status_code, attempt + 1)
                continue
            if not 200 <= resp.status_code < 300:
                raise BackendError(f"POST {path} returned {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
            except ValueError:
                raise BackendError(f"POST {path} returned a non-JSON body") from None
            if not isinstance(payload, dict):
                raise BackendError(f"POST {path} returned {type(payload).__name__}, expected object")
            return payload
        raise BackendError(f"POST {path} failed after {self.retries + 1} attempts: {last}") from last

    def _request(self, window: PromptWindow, mode: str) -> dict:
        if len(window) == 0:
            raise ContractError("window is empty")
        max_tokens = 1 if mode == "logits" else generation_decode_steps(len(window)) * 4
        return self._post(RERANK_PATH, {
            "prompt": window.rendered_prompt,
            "identifiers": window.identifiers,
            "mode": mode,
            "max_tokens": max_tokens,
        })

    def first_token_logits(self, window: PromptWindow) -> FirstTokenLogits:
        payload = self._request(window, "logits")
        logits = payload.get("logits")
        if not isinstance(logits, dict):
            raise BackendError("logits response lacks a 'logits' object")
        scores: dict[str, float] = {}
        for ident, value in logits.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise BackendError(f"logit for {ident!r} is not a number")
            if not math.isfinite(value):
                raise BackendError(f"logit for {ident!r} is not finite")
            scores[ident] = float(value)
        return FirstTokenLogits(scores)

    def generate_permutation(self, window: PromptWindow) -> GenerationOutput:
        payload = self._request(window, "generate")
        text, steps = payload.get("text"), payload.get("decode_steps")
        if not isinstance(text, str):
            raise BackendError("generate response lacks a 'text' string")
        if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
            raise BackendError("generate response lacks a positive integer 'decode_steps'")
        return GenerationOutput(text, steps, steps)

    def check_identifiers(self, scheme: IdentifierScheme) -> list[str]:
        """Identifiers that the server's tokenizer does not render as one token."""
        super().check_identifiers(scheme)
        payload = self._post(TOKENIZE_PATH, {"texts": list(scheme.alphabet)})
        tokens = payload.get("tokens")
        if not isinstance(tokens, list) or len(tokens) != len(scheme):
            raise BackendError("tokenize response must list tokens for every identifier")
        return [ident for ident, toks in zip(scheme.alphabet, tokens)
                if not isinstance(toks, list) or len(toks) != 1]
