"""Stage 2: single-layer LSTM over encoded behavior traces.

Gate blocks are stacked in the order (input, forget, output, candidate), so
``W`` is ``4H x m``, ``U`` is ``4H x H`` and ``b`` has length ``4H``. The
classifier reads the last hidden state through a logistic head.

Batches of variable-length sequences are left-padded and masked: padded steps
carry the zero initial state forward unchanged, so a padded sequence reaches
the same hidden state as the unpadded one (up to matmul rounding across batch
sizes, about 1e-16).
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .errors import DataError

GATES = ("i", "f", "o", "g")
LOGIT_CLIP = 36.0


class SequenceModelError(DataError):
    pass


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic(z: float) -> float:
    """Scalar logistic that stays strictly inside (0, 1)."""
    z = min(max(float(z), -LOGIT_CLIP), LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class LstmParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: float

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def H(self) -> int:
        return self.U.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(W_x, U_x, b_x)`` for one gate."""
        k = GATES.index(name)
        s = slice(k * self.H, (k + 1) * self.H)
        return self.W[s], self.U[s], self.b[s]

    def validate(self) -> None:
        H, m = self.H, self.m
        if self.W.shape != (4 * H, m) or self.U.shape != (4 * H, H):
            raise SequenceModelError(f"inconsistent shapes W{self.W.shape} U{self.U.shape}")
        if self.b.shape != (4 * H,) or self.w_out.shape != (H,):
            raise SequenceModelError(f"inconsistent shapes b{self.b.shape} w_out{self.w_out.shape}")
        for f in fields(self):
            if not np.all(np.isfinite(getattr(self, f.name))):
                raise SequenceModelError(f"non-finite values in {f.name}")

    @classmethod
    def zeros(cls, m: int, H: int) -> "LstmParams":
        return cls(np.zeros((4 * H, m)), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros(H), 0.0)

    @classmethod
    def init(cls, m: int, H: int, scale: float = 0.1, seed: int = 0,
             forget_bias: float = 1.0) -> "LstmParams":
        rng = np.random.default_rng(seed)
        W = rng.uniform(-scale, scale, (4 * H, m))
        U = rng.uniform(-scale, scale, (4 * H, H))
        w_out = rng.uniform(-scale, scale, H)
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        return cls(W, U, b, w_out, 0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.U.ravel(), self.b, self.w_out, [self.b_out]])

    def with_flat(self, theta: np.ndarray) -> "LstmParams":
        out, pos = {}, 0
        for f in fields(self):
            cur = np.asarray(getattr(self, f.name))
            size = cur.size
            chunk = theta[pos:pos + size]
            out[f.name] = float(chunk[0]) if f.name == "b_out" else chunk.reshape(cur.shape).copy()
            pos += size
        return LstmParams(**out)

    def to_json(self) -> dict:
        arrays = {}
        for f in fields(self):
            a = np.asarray(getattr(self, f.name), dtype=np.float64)
            arrays[f.name] = {"shape": list(a.shape), "data": a.ravel().tolist()}
        return {"gate_order": list(GATES), "arrays": arrays}

    @classmethod
    def from_json(cls, obj: dict) -> "LstmParams":
        if obj.get("gate_order", list(GATES)) != list(GATES):
            raise SequenceModelError(f"unsupported gate order {obj.get('gate_order')}")
        arrays = obj["arrays"]
        kw = {}
        for f in fields(cls):
            spec = arrays[f.name]
            a = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
            kw[f.name] = float(a) if f.name == "b_out" else a
        p = cls(**kw)
        p.validate()
        return p


@dataclass(frozen=True)
class Stage2Output:
    score: float


@dataclass(frozen=True)
class SeqTrainConfig:
    hidden: int = 32
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    clip_norm: float = 5.0
    seed: int = 0
    init_scale: float = 0.1
    forget_bias: float = 1.0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise SequenceModelError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise SequenceModelError("epochs, batch_size and hidden must be >= 1")
        if self.clip_norm <= 0:
            raise SequenceModelError("clip_norm must be > 0")


def pad_batch(seqs: Sequence[np.ndarray], m: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-pad to the longest sequence; returns ``(x[B,T,m], mask[B,T])``."""
    T = max((s.shape[0] for s in seqs), default=0)
    x = np.zeros((len(seqs), T, m))
    mask = np.zeros((len(seqs), T), dtype=bool)
    for r, s in enumerate(seqs):
        if s.shape[0]:
            x[r, T - s.shape[0]:] = s
            mask[r, T - s.shape[0]:] = True
    return x, mask


def _forward(p: LstmParams, x: np.ndarray, mask: np.ndarray, keep_cache: bool):
    B, T, _ = x.shape
    H = p.H
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(T):
        z = x[:, t] @ p.W.T + h @ p.U.T + p.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = mask[:, t, None]
        if keep_cache:
            cache.append((h, c, i, f, o, g, tc, mt))
        c = np.where(mt, c_new, c)
        h = np.where(mt, h_new, h)
    logit = h @ p.w_out + p.b_out
    return logit, h, cache


def lstm_logits(p: LstmParams, seqs: Sequence[np.ndarray]) -> np.ndarray:
    x, mask = pad_batch(seqs, p.m)
    return _forward(p, x, mask, keep_cache=False)[0]


def lstm_forward(p: LstmParams, xd) -> Stage2Output:
    """Score one encoded trace; an empty trace yields ``logistic(b_out)``."""
    xd = np.asarray(getattr(xd, "encoded", xd), dtype=np.float64)
    if xd.ndim != 2:
        xd = xd.reshape(-1, p.m) if xd.size == 0 else xd
    if xd.shape[1] != p.m:
        raise SequenceModelError(f"trace has {xd.shape[1]} columns, model expects {p.m}")
    logit = _forward(p, xd[None], np.ones((1, xd.shape[0]), dtype=bool), keep_cache=False)[0]
    return Stage2Output(float(logistic(logit[0])))


def loss_and_grad(p: LstmParams, x: np.ndarray, mask: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy over the batch and its gradient (BPTT)."""
    B = x.shape[0]
    H = p.H
    logit, hT, cache = _forward(p, x, mask, keep_cache=True)
    loss = float(np.mean(_softplus(logit) - y * logit))
    dlogit = (_sigmoid(logit) - y) / B

    dW = np.zeros_like(p.W)
    dU = np.zeros_like(p.U)
    db = np.zeros_like(p.b)
    dw_out = hT.T @ dlogit
    db_out = float(dlogit.sum())
    dh = np.outer(dlogit, p.w_out)
    dc = np.zeros((B, H))
    for t in range(x.shape[1] - 1, -1, -1):
        h_prev, c_prev, i, f, o, g, tc, mt = cache[t]
        dh_a = np.where(mt, dh, 0.0)
        dc_a = np.where(mt, dc, 0.0) + dh_a * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc_a * g * i * (1.0 - i),
            dc_a * c_prev * f * (1.0 - f),
            dh_a * tc * o * (1.0 - o),
            dc_a * i * (1.0 - g * g),
        ], axis=1)
        dW += dz.T @ x[:, t]
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = np.where(mt, dz @ p.U, dh)
        dc = np.where(mt, dc_a * f, dc)
    return loss, LstmParams(dW, dU, db, dw_out, db_out)


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    vals = set(np.unique(y).tolist())
    if not vals <= {0.0, 1.0}:
        raise SequenceModelError(f"labels must be 0/1, got {sorted(vals)}")
    if len(vals) < 2:
        raise SequenceModelError("training data contains a single class")
    return y


def lstm_train(seqs: Sequence[np.ndarray], labels, cfg: SeqTrainConfig = SeqTrainConfig(),
               init: LstmParams | None = None, full_batch: bool = False,
               history: list | None = None) -> LstmParams:
    """Minibatch SGD with global-norm clipping; sample order is shuffled by ``cfg.seed``.

    If ``history`` is given, the mean training loss before each epoch's updates
    is appended to it (plus the final loss after the last epoch).
    """
    cfg.validate()
    y = _check_labels(labels)
    if len(seqs) != y.shape[0]:
        raise SequenceModelError("sequence and label counts differ")
    m = next((s.shape[1] for s in seqs if s.ndim == 2), None)
    if init is not None:
        p = init
        m = p.m
    else:
        if m is None:
            raise SequenceModelError("cannot infer input width from sequences")
        p = LstmParams.init(m, cfg.hidden, cfg.init_scale, cfg.seed, cfg.forget_bias)
    seqs = [np.asarray(s, dtype=np.float64).reshape(-1, m) for s in seqs]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    theta = p.flat()
    n = len(seqs)
    bs = n if full_batch else cfg.batch_size

    def full_loss(params):
        x, mask = pad_batch(seqs, m)
        return loss_and_grad(params, x, mask, y)[0]

    for _ in range(cfg.epochs):
        if history is not None:
            history.append(full_loss(p))
        order = np.arange(n) if full_batch else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            x, mask = pad_batch([seqs[j] for j in idx], m)
            _, grad = loss_and_grad(p, x, mask, y[idx])
            gvec = grad.flat()
            norm = float(np.sqrt(gvec @ gvec))
            if norm > cfg.clip_norm:
                gvec = gvec * (cfg.clip_norm / norm)
            theta = theta - cfg.learning_rate * gvec
            p = p.with_flat(theta)
    if history is not None:
        history.append(full_loss(p))
    return p


def gradient_check(p: LstmParams, sample, eps: float = 1e-5) -> float:
    """Max relative error between BPTT and central-difference gradients.

    ``sample`` is ``(encoded_trace, label)``. Every scalar parameter is checked.
    """
    if not eps > 0:
        raise SequenceModelError("eps must be > 0")
    xd, label = sample
    xd = np.asarray(getattr(xd, "encoded", xd), dtype=np.float64).reshape(-1, p.m)
    x = xd[None]
    mask = np.ones((1, xd.shape[0]), dtype=bool)
    y = np.array([float(label)])
    analytic = loss_and_grad(p, x, mask, y)[1].flat()
    theta = p.flat()
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + eps
        lp = loss_and_grad(p.with_flat(theta), x, mask, y)[0]
        theta[j] = orig - eps
        lm = loss_and_grad(p.with_flat(theta), x, mask, y)[0]
        theta[j] = orig
        numeric[j] = (lp - lm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())
