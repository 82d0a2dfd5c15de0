"""Joint ranking objective for first-token scores, with analytic gradients.

For a window of m scores ``p`` and gold ranks ``r`` (1 = most relevant):

* ranking loss: sum over pairs with r_i < r_j of
  ``log(1 + exp(p_j - p_i)) / (r_i + r_j)``, so pairs involving the top
  gold ranks weigh the most;
* listwise likelihood loss: negative Plackett-Luce log-likelihood of the
  gold order, ``sum_t -log softmax(p over remaining)[g_t]``;
* joint loss: ``lm + lambda * rank`` with lambda = 10 by default.

A linear scoring model stands in for the LLM's identifier-logit head and is
fit with seeded mini-batch gradient descent.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .core import ContractError

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 10.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


def _check(p: Sequence[float], r: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r)
    if p.ndim != 1 or r.ndim != 1 or len(p) != len(r):
        raise ContractError(f"scores and gold ranks must be equal-length vectors ({p.shape} vs {r.shape})")
    if len(p) < 1:
        raise ContractError("window must hold at least one document")
    if sorted(r.tolist()) != list(range(1, len(r) + 1)):
        raise ContractError(f"gold ranks {r.tolist()} are not a permutation of 1..{len(r)}")
    if not np.all(np.isfinite(p)):
        raise ContractError("scores must be finite")
    return p, r.astype(np.int64)


def _pairs(r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (hi, lo) of every pair with r[hi] < r[lo], and their weights."""
    hi, lo = np.nonzero(r[:, None] < r[None, :])
    weights = 1.0 / (r[hi] + r[lo])
    return hi, lo, weights


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def rank_loss(p: Sequence[float], r: Sequence[int]) -> float:
    p, r = _check(p, r)
    hi, lo, w = _pairs(r)
    return float(np.sum(w * np.logaddexp(0.0, p[lo] - p[hi])))


def rank_loss_grad(p: Sequence[float], r: Sequence[int]) -> np.ndarray:
    p, r = _check(p, r)
    hi, lo, w = _pairs(r)
    g = w * _sigmoid(p[lo] - p[hi])
    grad = np.zeros_like(p)
    np.add.at(grad, lo, g)
    np.subtract.at(grad, hi, g)
    return grad


def _gold_order(r: np.ndarray) -> np.ndarray:
    return np.argsort(r, kind="stable")


def lm_loss(p: Sequence[float], r: Sequence[int]) -> float:
    p, r = _check(p, r)
    s = p[_gold_order(r)]
    # log-sum-exp over each suffix s[t:], accumulated right to left
    suffix = np.logaddexp.accumulate(s[::-1])[::-1]
    return float(np.sum(suffix - s))


def lm_loss_grad(p: Sequence[float], r: Sequence[int]) -> np.ndarray:
    p, r = _check(p, r)
    g = _gold_order(r)
    s = p[g]
    suffix = np.logaddexp.accumulate(s[::-1])[::-1]
    # d/ds_u of sum_t lse(s[t:]) is sum_{t <= u} softmax_t(u)
    probs = np.exp(s[None, :] - suffix[:, None])
    probs = np.triu(probs)
    grad_sorted = probs.sum(axis=0) - 1.0
    grad = np.empty_like(p)
    grad[g] = grad_sorted
    return grad


@dataclass(frozen=True)
class LossConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ContractError(f"lambda must be a finite non-negative number, got {self.lam}")


@dataclass(frozen=True)
class LossBreakdown:
    joint: float
    lm: float
    rank_weighted: float


def joint_loss(p: Sequence[float], r: Sequence[int], cfg: LossConfig = LossConfig()) -> LossBreakdown:
    lm = lm_loss(p, r)
    weighted = cfg.lam * rank_loss(p, r)
    return LossBreakdown(lm + weighted, lm, weighted)


def joint_loss_grad(p: Sequence[float], r: Sequence[int], cfg: LossConfig = LossConfig()) -> np.ndarray:
    return lm_loss_grad(p, r) + cfg.lam * rank_loss_grad(p, r)


# ---------------------------------------------------------------------------
# Ranking agreement
# ---------------------------------------------------------------------------

def kendall_tau(perm_a: Sequence[int], perm_b: Sequence[int]) -> float:
    """Kendall tau between two orderings of the same items.

    Each argument lists items from best to worst. Returns 1.0 for a single
    item (no pairs to disagree on).
    """
    a, b = list(getattr(perm_a, "order", perm_a)), list(getattr(perm_b, "order", perm_b))
    if len(a) != len(b):
        raise ContractError(f"orderings differ in length ({len(a)} vs {len(b)})")
    if sorted(a) != sorted(b) or len(set(a)) != len(a):
        raise ContractError("orderings must rank the same distinct items")
    n = len(a)
    if n < 2:
        return 1.0
    pos_b = {item: i for i, item in enumerate(b)}
    ranks = [pos_b[item] for item in a]
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            if ranks[i] < ranks[j]:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


def order_from_scores(p: Sequence[float]) -> list[int]:
    """Positions by descending score, ties by position."""
    return sorted(range(len(p)), key=lambda i: (-p[i], i))


def order_from_ranks(r: Sequence[int]) -> list[int]:
    return sorted(range(len(r)), key=lambda i: r[i])


# ---------------------------------------------------------------------------
# Toy training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingWindow:
    features: np.ndarray
    gold_ranks: tuple[int, ...]

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(self.gold_ranks):
            raise ContractError(
                f"features must be an m x D matrix with m = {len(self.gold_ranks)}, got {feats.shape}"
            )
        if not np.all(np.isfinite(feats)):
            raise ContractError("features must be finite")
        ranks = tuple(int(x) for x in self.gold_ranks)
        if sorted(ranks) != list(range(1, len(ranks) + 1)):
            raise ContractError(f"gold ranks {list(ranks)} are not a permutation of 1..{len(ranks)}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "gold_ranks", ranks)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ScoringModel:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> ScoringModel:
        return cls(np.zeros(dim), 0.0)

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias)}

    @classmethod
    def from_dict(cls, data: dict) -> ScoringModel:
        return cls(np.asarray(data["weights"], dtype=np.float64), float(data["bias"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 5e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning rate must be positive, got {self.learning_rate}")


def train(
    dataset: Sequence[TrainingWindow],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    model: ScoringModel | None = None,
) -> tuple[ScoringModel, list[LossBreakdown]]:
    """Fit a linear scorer with mini-batch gradient descent on the joint loss.

    Batches are drawn from a seeded shuffle each epoch; the gradient is the
    batch mean. Returns the model and the per-epoch mean loss breakdown,
    where each window's loss is taken at the parameters in force when its
    batch was processed.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    dim = dataset[0].dim
    if any(w.dim != dim for w in dataset):
        raise ContractError("training windows have inconsistent feature dimensions")
    model = model or ScoringModel.zeros(dim)
    rng = np.random.default_rng(cfg.seed)
    curve: list[LossBreakdown] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        totals = np.zeros(3)
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            grad_w = np.zeros(dim)
            grad_b = 0.0
            for window in batch:
                with np.errstate(over="ignore", invalid="ignore"):
                    p = model.score(window.features)
                if not np.all(np.isfinite(p)):
                    raise TrainingDivergedError(epoch, b, "model scores overflowed")
                parts = joint_loss(p, window.gold_ranks, loss_cfg)
                if not math.isfinite(parts.joint):
                    raise TrainingDivergedError(epoch, b, f"joint loss {parts.joint}")
                totals += (parts.joint, parts.lm, parts.rank_weighted)
                g = joint_loss_grad(p, window.gold_ranks, loss_cfg)
                grad_w += window.features.T @ g
                grad_b += float(g.sum())
            step = cfg.learning_rate / len(batch)
            model.weights = model.weights - step * grad_w
            model.bias = model.bias - step * grad_b
            if not (np.all(np.isfinite(model.weights)) and math.isfinite(model.bias)):
                raise TrainingDivergedError(epoch, b, "parameters became non-finite")
        mean = totals / len(dataset)
        curve.append(LossBreakdown(float(mean[0]), float(mean[1]), float(mean[2])))
        log.info("epoch %d: joint=%.6f lm=%.6f rank_weighted=%.6f", epoch, *mean)
    return model, curve


def evaluate_model(model: ScoringModel, windows: Iterable[TrainingWindow]) -> float:
    """Mean Kendall tau between model orderings and gold orderings."""
    taus = [
        kendall_tau(order_from_scores(model.score(w.features).tolist()), order_from_ranks(w.gold_ranks))
        for w in windows
    ]
    if not taus:
        raise ContractError("no windows to evaluate")
    return float(np.mean(taus))


def synthetic_windows(
    count: int, m: int, dim: int, seed: int, true_weights: np.ndarray | None = None
) -> tuple[list[TrainingWindow], np.ndarray]:
    """Windows whose gold ranks sort a hidden linear function of the features."""
    rng = np.random.default_rng(seed)
    if true_weights is None:
        true_weights = rng.normal(size=dim)
    windows = []
    for _ in range(count):
        feats = rng.normal(size=(m, dim))
        relevance = feats @ true_weights
        ranks = np.empty(m, dtype=int)
        ranks[np.argsort(-relevance, kind="stable")] = np.arange(1, m + 1)
        windows.append(TrainingWindow(feats, tuple(ranks.tolist())))
    return windows, true_weights


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_training_jsonl(lines: Iterable[str]) -> list[TrainingWindow]:
    from .trec_io import FormatError

    windows = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            windows.append(TrainingWindow(np.asarray(obj["features"], dtype=np.float64),
                                          tuple(obj["gold_ranks"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid training window ({exc})", line_no) from None
    return windows


def write_training_jsonl(windows: Iterable[TrainingWindow], sink: TextIO) -> None:
    for w in windows:
        sink.write(json.dumps({"features": w.features.tolist(), "gold_ranks": list(w.gold_ranks)}) + "\n")


CURVE_COLUMNS = ("epoch", "joint", "lm", "rank_weighted")


def write_loss_curve(curve: Sequence[LossBreakdown], sink: TextIO) -> None:
    sink.write(",".join(CURVE_COLUMNS) + "\n")
    for epoch, row in enumerate(curve, start=1):
        d = asdict(row)
        sink.write(f"{epoch},{d['joint']!r},{d['lm']!r},{d['rank_weighted']!r}\n")
