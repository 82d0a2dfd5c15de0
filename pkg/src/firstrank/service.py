"""Reference HTTP server for the window-rerank wire contract.

The server stands in for a hosted LLM: it reads the passages back out of the
rendered prompt and scores them by query-term overlap. It exists so the
HTTP backend can be exercised end to end without a GPU.

Run with ``firstrank serve`` or ``uvicorn firstrank.service:app``.
"""

from __future__ import annotations

import re
from typing import Callable, Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .backend import RERANK_PATH, TOKENIZE_PATH, format_ranking, generation_decode_steps
from .retriever import tokenize

Scorer = Callable[[str, list[str]], dict[str, float]]


class RerankWindowRequest(BaseModel):
    prompt: str
    identifiers: list[str] = Field(min_length=1)
    mode: Literal["logits", "generate"]
    max_tokens: int = Field(default=1, ge=1)


class LogitsResponse(BaseModel):
    logits: dict[str, float]


class GenerateResponse(BaseModel):
    text: str
    decode_steps: int


class TokenizeRequest(BaseModel):
    texts: list[str]


class TokenizeResponse(BaseModel):
    tokens: list[list[str]]


def overlap_scorer(prompt: str, identifiers: list[str]) -> dict[str, float]:
    """Score each ``"<id>. passage"`` line by how many query terms it contains."""
    query_match = re.search(r"^Search Query: (.*)$", prompt, flags=re.MULTILINE)
    query_terms = set(tokenize(query_match.group(1))) if query_match else set()
    scores = {}
    for ident in identifiers:
        line = re.search(rf"^{re.escape(ident)}\. (.*)$", prompt, flags=re.MULTILINE)
        if line is None:
            raise HTTPException(status_code=422, detail=f"identifier {ident!r} not found in prompt")
        terms = tokenize(line.group(1))
        scores[ident] = float(sum(1 for t in terms if t in query_terms))
    return scores


def create_app(scorer: Scorer = overlap_scorer, multi_token: frozenset[str] = frozenset()) -> FastAPI:
    """Build the server. Identifiers in ``multi_token`` tokenize into two pieces."""
    app = FastAPI(title="firstrank window reranker")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post(RERANK_PATH, response_model=LogitsResponse | GenerateResponse)
    def rerank_window(req: RerankWindowRequest):
        if len(set(req.identifiers)) != len(req.identifiers):
            raise HTTPException(status_code=422, detail="identifiers must be distinct")
        scores = scorer(req.prompt, req.identifiers)
        if req.mode == "logits":
            return LogitsResponse(logits=scores)
        order = sorted(range(len(req.identifiers)), key=lambda i: -scores[req.identifiers[i]])
        return GenerateResponse(
            text=format_ranking(req.identifiers[i] for i in order),
            decode_steps=generation_decode_steps(len(order)),
        )

    @app.post(TOKENIZE_PATH, response_model=TokenizeResponse)
    def tokenize_texts(req: TokenizeRequest) -> TokenizeResponse:
        tokens = []
        for text in req.texts:
            if text in multi_token and len(text) >= 1:
                tokens.append(["▁", text])
            else:
                tokens.append([text])
        return TokenizeResponse(tokens=tokens)

    return app


app = create_app()
