"""Training harness: SMOTE inside training folds and out-of-fold stacking."""
from __future__ import annotations

import logging

import numpy as np

from .bundle import ModelBundle
from .config import RunConfig
from .dataset import Dataset, oversample_minority, stratified_kfold
from .errors import DataError
from .features import encode_context, encode_trace
from .stage1_static import ForestParams, forest_scores, train_forest
from .stage2_sequence import SeqTrainConfig, lstm_logits, lstm_train
from .stage3_fusion import (
    GATED_STAGE2,
    NEUTRAL_STAGE2,
    MetaParams,
    run_pipeline,
    train_meta,
)

log = logging.getLogger(__name__)


def forest_params(cfg: RunConfig) -> ForestParams:
    f = cfg.forest
    return ForestParams(f.tree_count, f.max_depth, f.max_features, f.bootstrap, cfg.thresholds.stage1)


def seq_config(cfg: RunConfig, seed: int) -> SeqTrainConfig:
    q = cfg.sequence
    return SeqTrainConfig(q.hidden, q.learning_rate, q.epochs, q.batch_size, q.clip_norm, seed,
                          q.init_scale, q.forget_bias)


def meta_params(cfg: RunConfig) -> MetaParams:
    m = cfg.meta
    return MetaParams(m.rounds, m.learning_rate, m.max_depth, m.subsample, cfg.thresholds.final)


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def encode_traces(ds: Dataset, cfg: RunConfig) -> list:
    vocab, keys = ds.schema.vocabulary, ds.schema.attr_keys
    if not vocab:
        return [None] * len(ds)
    return [
        None if s.trace is None else encode_trace(s.trace, vocab, cfg.dims.t_max, keys).encoded
        for s in ds.samples
    ]


def fit_stage1(X: np.ndarray, y: np.ndarray, cfg: RunConfig, seed: int):
    if cfg.smote.enabled:
        X, y = oversample_minority(X, y, cfg.smote.k_neighbors, cfg.smote.ratio, _sub_seed(seed, 1))
    return train_forest(X, y, forest_params(cfg), _sub_seed(seed, 2))


def fit_stage2(seqs: list, y: np.ndarray, cfg: RunConfig, seed: int):
    """``None`` when there are no usable traces for both classes."""
    idx = [i for i, s in enumerate(seqs) if s is not None]
    if not idx or len(set(y[idx].tolist())) < 2:
        return None
    return lstm_train([seqs[i] for i in idx], y[idx], seq_config(cfg, _sub_seed(seed, 3)))


def stage2_scores(lstm, seqs: list) -> np.ndarray:
    out = np.full(len(seqs), NEUTRAL_STAGE2)
    if lstm is None:
        return out
    idx = [i for i, s in enumerate(seqs) if s is not None]
    if idx:
        logits = np.clip(lstm_logits(lstm, [seqs[i] for i in idx]), -36.0, 36.0)
        out[idx] = 1.0 / (1.0 + np.exp(-logits))
    return out


def fused_features(s1: np.ndarray, s2: np.ndarray, contexts: np.ndarray, cfg: RunConfig) -> np.ndarray:
    y1 = s1 if cfg.switches.stage1_soft_handoff else (s1 >= cfg.thresholds.stage1).astype(np.float64)
    y2 = s2.copy()
    if cfg.switches.enable_gating:
        y2[s1 <= cfg.switches.gate_low] = GATED_STAGE2
    return np.column_stack([y1, y2, contexts])


def train_bundle(train: Dataset, cfg: RunConfig, seed: int | None = None) -> ModelBundle:
    """Fit all three stages on ``train``.

    The meta-learner sees out-of-fold Stage-1/Stage-2 outputs from an inner
    stratified split; the returned Stage-1/Stage-2 models are refit on all
    of ``train``.
    """
    seed = cfg.seed if seed is None else seed
    X = train.static_matrix()
    y = train.labels
    if len(set(y.tolist())) < 2:
        raise DataError("training data contains a single class")
    seqs = encode_traces(train, cfg)
    if all(s is None for s in seqs):
        log.debug("no behavior traces in training data; stage 2 uses the neutral score")
    contexts = np.vstack([encode_context(s.context).values for s in train.samples])

    folds = min(cfg.stacking_folds, int(np.bincount(y, minlength=2).min()))
    s1 = np.zeros(len(train))
    s2 = np.full(len(train), NEUTRAL_STAGE2)
    if folds >= 2:
        plan = stratified_kfold(train, folds, _sub_seed(seed, 10))
        pos = {sid: i for i, sid in enumerate(train.ids)}
        for f in range(folds):
            tr = np.array([pos[i] for i in plan.train_ids(f)])
            te = np.array([pos[i] for i in plan.test_ids(f)])
            fs = fit_stage1(X[tr], y[tr], cfg, _sub_seed(seed, 20, f))
            s1[te] = forest_scores(fs, X[te])
            ls = fit_stage2([seqs[i] for i in tr], y[tr], cfg, _sub_seed(seed, 30, f))
            s2[te] = stage2_scores(ls, [seqs[i] for i in te])
    else:
        log.warning("too few samples per class for out-of-fold stacking; using in-sample outputs")

    forest = fit_stage1(X, y, cfg, _sub_seed(seed, 40))
    lstm = fit_stage2(seqs, y, cfg, _sub_seed(seed, 50))
    if folds < 2:
        s1 = forest_scores(forest, X)
        s2 = stage2_scores(lstm, seqs)
    meta = train_meta(fused_features(s1, s2, contexts, cfg), y, meta_params(cfg), _sub_seed(seed, 60))
    return ModelBundle(
        config=cfg,
        forest=forest,
        lstm=lstm,
        meta=meta,
        vocabulary=dict(train.schema.vocabulary),
        attr_keys=tuple(train.schema.attr_keys),
        t_max=cfg.dims.t_max,
        fingerprint={"dataset_sha256": train.fingerprint(), "seed": seed, "n_train": len(train)},
    )


class BundleScorer:
    """Adapter for :func:`metrics.evaluate_folds`; tracks model-only time."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.timings: dict = {}

    @property
    def model_ms(self) -> float:
        return self.timings.get("model_ms", 0.0)

    def __call__(self, sample):
        return run_pipeline(self.bundle, sample, self.timings)


def bundle_trainer(cfg: RunConfig):
    def trainer(train: Dataset, seed: int) -> BundleScorer:
        return BundleScorer(train_bundle(train, cfg, seed))
    return trainer
