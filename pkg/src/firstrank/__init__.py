"""BM25 retrieval and sliding-window listwise reranking from first-token scores."""

from .backend import (
    BackendError,
    FirstTokenLogits,
    GenerationOutput,
    HttpBackend,
    OracleBackend,
    PromptWindow,
    ScriptedBackend,
)
from .core import (
    CandidateList,
    ContractError,
    Document,
    IdentifierScheme,
    Permutation,
    Query,
    ScoredDoc,
    WindowConfig,
    apply_permutation,
    identifier_for,
)
from .eval import bench_rerank, evaluate_run, ndcg_at_k, speedup
from .objective import joint_loss, lm_loss, rank_loss, train
from .rerank import RerankConfig, RerankMode, RepairPolicy, parse_permutation, rerank_run, slide_rerank
from .retriever import Bm25Params, build_index, search

__version__ = "0.1.0"
