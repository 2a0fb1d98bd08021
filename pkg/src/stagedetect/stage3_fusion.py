"""Stage 3: fuse stage outputs with context and score with boosted trees."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._trees import Tree, grow_tree, sse_split_scores
from .errors import DataError
from .features import ContextVector, encode_context, encode_trace
from .stage1_static import Stage1Output, predict_stage1
from .stage2_sequence import LOGIT_CLIP, Stage2Output, lstm_forward

NEUTRAL_STAGE2 = 0.5
GATED_STAGE2 = 0.0


class FusionError(DataError):
    pass


def fuse(y1: Stage1Output | float, y2: Stage2Output | float, xc: ContextVector | np.ndarray,
         soft: bool = False) -> np.ndarray:
    """``[y1, y2, context...]``; ``y1`` is the binary label unless ``soft``."""
    if isinstance(y1, Stage1Output):
        y1 = y1.score if soft else y1.label
    y2 = getattr(y2, "score", y2)
    ctx = np.asarray(getattr(xc, "values", xc), dtype=np.float64).ravel()
    return np.concatenate([[float(y1), float(y2)], ctx])


@dataclass(frozen=True)
class MetaParams:
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    subsample: float = 1.0
    threshold: float = 0.5

    def validate(self) -> None:
        if self.rounds < 0:
            raise FusionError("rounds must be >= 0")
        if not self.learning_rate > 0:
            raise FusionError("learning_rate must be > 0")
        if not 1 <= self.max_depth <= 3:
            raise FusionError("meta trees are limited to depth 1..3")
        if not 0.0 < self.subsample <= 1.0:
            raise FusionError("subsample must be in (0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise FusionError("threshold must be in (0, 1)")


@dataclass(frozen=True)
class MetaModel:
    trees: tuple[Tree, ...]
    init_logodds: float
    learning_rate: float
    threshold: float
    n_features: int

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.full(X.shape[0], self.init_logodds)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def to_json(self) -> dict:
        return {
            "init_logodds": self.init_logodds,
            "learning_rate": self.learning_rate,
            "threshold": self.threshold,
            "n_features": self.n_features,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetaModel":
        return cls(tuple(Tree.from_json(t) for t in obj["trees"]), float(obj["init_logodds"]),
                   float(obj["learning_rate"]), float(obj["threshold"]), int(obj["n_features"]))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)))


def train_meta(Xf, y, params: MetaParams = MetaParams(), seed: int = 0) -> MetaModel:
    """Gradient boosting on logistic loss.

    Starts from the base-rate log-odds; every round fits a depth-limited
    regression tree to the residuals ``y - p`` and sets each leaf to the
    one-step Newton value ``sum(r) / sum(p(1-p))``.
    """
    X = np.asarray(Xf, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params.validate()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise FusionError(f"Xf shape {X.shape} does not match {y.shape[0]} labels")
    if not np.isin(y, (0.0, 1.0)).all():
        raise FusionError("labels must be 0/1")
    if y.min() == y.max():
        raise FusionError("training data contains a single class")
    rate = y.mean()
    init = math.log(rate / (1.0 - rate))
    rng = np.random.default_rng(seed)
    F = np.full(y.shape[0], init)
    trees = []
    for _ in range(params.rounds):
        p = _sigmoid(F)
        r = y - p
        hess = p * (1.0 - p)
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(y.shape[0], max(2, int(params.subsample * y.shape[0])), replace=False))
        else:
            rows = np.arange(y.shape[0])
        Xr, rr, hr = X[rows], r[rows], hess[rows]
        tree = grow_tree(
            Xr, rr,
            max_depth=params.max_depth,
            score_fn=sse_split_scores,
            leaf_value=lambda idx: float(rr[idx].sum() / max(hr[idx].sum(), 1e-12)),
            should_split=lambda idx, ri: idx.size >= 2,
            parent_score=lambda ri: -(ri.sum() ** 2) / ri.size,
        )
        trees.append(tree)
        F = F + params.learning_rate * tree.predict(X)
    return MetaModel(tuple(trees), init, params.learning_rate, params.threshold, X.shape[1])


def score(model: MetaModel, xf) -> float:
    """Risk in (0, 1) for one fused vector."""
    x = np.asarray(xf, dtype=np.float64).ravel()
    if x.shape[0] != model.n_features:
        raise FusionError(f"fused vector has {x.shape[0]} values, model expects {model.n_features}")
    z = model.init_logodds
    for t in model.trees:
        z += model.learning_rate * t.value[t.apply_one(x)]
    return float(_sigmoid(z))


def score_batch(model: MetaModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise FusionError(f"fused vectors have {X.shape[1]} columns, model expects {model.n_features}")
    return _sigmoid(model.raw(X))


@dataclass(frozen=True)
class RiskVerdict:
    risk: float
    decision: int
    threshold: float
    stage1: Stage1Output
    stage2: Stage2Output
    context: Mapping
    trace_missing: bool = False
    stage2_skipped: bool = False
    sample_id: str | None = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "risk": self.risk,
            "decision": self.decision,
            "threshold": self.threshold,
            "stage1": {"score": self.stage1.score, "label": self.stage1.label},
            "stage2": {"score": self.stage2.score},
            "context": dict(self.context),
            "flags": {"trace_missing": self.trace_missing, "stage2_skipped": self.stage2_skipped},
        }


def run_pipeline(bundle, sample, timings: dict | None = None) -> RiskVerdict:
    """Stage 1, optional gate, Stage 2, fuse, Stage 3 for one sample.

    ``bundle`` needs ``forest``, ``lstm`` (may be ``None``), ``meta``,
    ``vocabulary``, ``attr_keys``, ``t_max`` and ``config``. If ``timings`` is
    given, ``encode_ms`` and ``model_ms`` are accumulated into it.
    """
    t0 = time.perf_counter()
    cfg = bundle.config
    static = np.asarray(sample.static, dtype=np.float64)
    xc = encode_context(sample.context)
    trace = None
    if sample.trace is not None and bundle.lstm is not None:
        trace = encode_trace(sample.trace, bundle.vocabulary, bundle.t_max, bundle.attr_keys)
    t1 = time.perf_counter()

    y1 = predict_stage1(bundle.forest, static)
    skipped = bool(cfg.switches.enable_gating and y1.score <= cfg.switches.gate_low)
    missing = trace is None
    if skipped:
        y2 = Stage2Output(GATED_STAGE2)
    elif missing:
        y2 = Stage2Output(NEUTRAL_STAGE2)
    else:
        y2 = lstm_forward(bundle.lstm, trace)
    xf = fuse(y1, y2, xc, soft=cfg.switches.stage1_soft_handoff)
    risk = score(bundle.meta, xf)
    t2 = time.perf_counter()
    if timings is not None:
        timings["encode_ms"] = timings.get("encode_ms", 0.0) + (t1 - t0) * 1000.0
        timings["model_ms"] = timings.get("model_ms", 0.0) + (t2 - t1) * 1000.0
    return RiskVerdict(risk, int(risk >= bundle.meta.threshold), bundle.meta.threshold, y1, y2,
                       dict(sample.context), missing, skipped, getattr(sample, "id", None))
