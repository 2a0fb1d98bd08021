"""Labeled samples: JSONL ingestion, synthetic generation, stratified folds, SMOTE."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, SchemaError
from .features import (
    CONTEXT_DIM,
    DEVICES,
    ORIGINS,
    Event,
    FeatureError,
    normalize_context,
    trace_dim,
)


@dataclass(frozen=True)
class DatasetSchema:
    n: int
    vocabulary: Mapping[str, int] = field(default_factory=dict)
    attr_keys: tuple[str, ...] = ()
    k: int = CONTEXT_DIM

    @property
    def m(self) -> int:
        return trace_dim(self.vocabulary, self.attr_keys) if self.vocabulary else 0


@dataclass(frozen=True)
class LabeledSample:
    id: str
    static: np.ndarray
    context: Mapping
    label: int
    trace: tuple[Event, ...] | None = None

    def to_json(self) -> dict:
        obj = {"id": self.id, "label": self.label, "static": self.static.tolist()}
        if self.trace is not None:
            obj["trace"] = [e.to_json() for e in self.trace]
        obj["context"] = dict(self.context)
        return obj

    @classmethod
    def from_json(cls, obj: Mapping, n: int | None = None) -> "LabeledSample":
        for key in ("id", "label", "static"):
            if key not in obj:
                raise DataError(f"missing {key}")
        label = obj["label"]
        if label not in (0, 1) or isinstance(label, bool):
            raise DataError(f"label must be 0 or 1, got {label!r}")
        try:
            static = np.asarray(obj["static"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DataError("static must be an array of numbers") from None
        if static.ndim != 1:
            raise SchemaError("static must be a flat array")
        if n is not None and static.shape[0] != n:
            raise SchemaError(f"static has {static.shape[0]} values, schema declares n={n}")
        trace = None
        if obj.get("trace") is not None:
            trace = tuple(Event.from_json(e) for e in obj["trace"])
        try:
            context = normalize_context(obj.get("context"))
        except FeatureError as exc:
            raise SchemaError(str(exc)) from None
        return cls(str(obj["id"]), static, context, int(label), trace)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    schema: DatasetSchema
    provenance: str = "jsonl"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def static_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.schema.n))
        return np.vstack([s.static for s in self.samples])

    def subset(self, ids: Iterable[str]) -> "Dataset":
        by_id = {s.id: s for s in self.samples}
        return Dataset(tuple(by_id[i] for i in ids), self.schema, self.provenance)

    def jsonl_lines(self) -> list[str]:
        return [json.dumps(s.to_json(), sort_keys=True) for s in self.samples]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for line in self.jsonl_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


def load_jsonl(path, schema: DatasetSchema) -> Dataset:
    """Parse one sample per line; errors name the 1-based line number."""
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            try:
                sample = LabeledSample.from_json(obj, schema.n)
            except DataError as exc:
                raise type(exc)(f"line {lineno}: {exc}") from None
            if sample.id in seen:
                raise DataError(f"line {lineno}: duplicate id {sample.id!r}")
            seen.add(sample.id)
            samples.append(sample)
    return Dataset(tuple(samples), schema, "jsonl")


def write_jsonl(ds: Dataset, path) -> None:
    Path(path).write_text("".join(line + "\n" for line in ds.jsonl_lines()), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# token name -> event type; ids are assigned in this order starting at 1
SYNTH_TOKENS = {
    "CreateFileW": "file_op",
    "ReadFile": "file_op",
    "WriteFile": "file_op",
    "CloseHandle": "api_call",
    "DeleteFileW": "file_op",
    "RegOpenKeyExW": "registry_write",
    "RegQueryValueExW": "api_call",
    "RegSetValueExW": "registry_write",
    "LoadLibraryW": "api_call",
    "GetProcAddress": "api_call",
    "GetSystemTime": "api_call",
    "VirtualAlloc": "api_call",
    "CreateProcessW": "process_create",
    "connect": "net_session",
    "send": "net_session",
    "recv": "net_session",
    "WriteProcessMemory": "api_call",
}
MARKER_TOKEN = "WriteProcessMemory"
SYNTH_ATTR_KEYS = ("size", "duration")

# per-class token weights over the non-marker tokens, in SYNTH_TOKENS order
_BENIGN_WEIGHTS = np.array([8, 9, 5, 9, 2, 5, 6, 2, 4, 4, 6, 2, 1, 3, 3, 3], dtype=float)
_SHIFTED_WEIGHTS = np.array([3, 3, 6, 4, 5, 3, 2, 7, 6, 7, 2, 8, 5, 6, 7, 4], dtype=float)

# class-conditional context priors: (benign, malicious)
_ORIGIN_P = (np.array([0.20, 0.05, 0.60, 0.15]), np.array([0.55, 0.25, 0.10, 0.10]))
_DEVICE_P = (np.array([0.60, 0.25, 0.15]), np.array([0.50, 0.40, 0.10]))
_PRIV_P = (0.2, 0.5)

SYNTH_T0 = 1_700_000_000_000


def synthetic_vocabulary() -> dict[str, int]:
    return {name: i + 1 for i, name in enumerate(SYNTH_TOKENS)}


@dataclass(frozen=True)
class SyntheticConfig:
    n_benign: int = 1000
    n_malicious: int = 1000
    n: int = 16
    separation: float = 4.0
    min_len: int = 16
    max_len: int = 32
    marker_rate: float = 0.05
    # share of malicious token mass drawn from the shifted distribution
    token_shift: float = 0.3
    with_traces: bool = True
    seed: int = 7

    def validate(self) -> None:
        if self.n_benign < 1 or self.n_malicious < 1:
            raise DataError("synthetic class sizes must be >= 1")
        if self.separation < 0:
            raise DataError("separation must be >= 0")
        if self.n < 1:
            raise DataError("n must be >= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.marker_rate < 1.0 or not 0.0 <= self.token_shift <= 1.0:
            raise DataError("marker_rate must be in [0, 1) and token_shift in [0, 1]")


def token_distribution(label: int, token_shift: float) -> np.ndarray:
    b = _BENIGN_WEIGHTS / _BENIGN_WEIGHTS.sum()
    if label == 0:
        return b
    s = _SHIFTED_WEIGHTS / _SHIFTED_WEIGHTS.sum()
    return (1.0 - token_shift) * b + token_shift * s


def synth_events(rng: np.random.Generator, label: int, length: int, cfg: SyntheticConfig,
                 t0: int = SYNTH_T0) -> list[Event]:
    """One behavior trace. Malicious traces always carry at least one marker event."""
    names = [n for n in SYNTH_TOKENS if n != MARKER_TOKEN]
    probs = token_distribution(label, cfg.token_shift)
    picks = rng.choice(len(names), size=length, p=probs)
    seq = [names[j] for j in picks]
    if label == 1:
        extra = rng.random(length) < cfg.marker_rate
        seq = [MARKER_TOKEN if e else name for e, name in zip(extra, seq)]
        seq[int(rng.integers(length))] = MARKER_TOKEN
    gaps = rng.integers(1, 250, size=length)
    sizes = np.exp(rng.uniform(0.0, 12.0, size=length))
    durations = rng.exponential(20.0, size=length)
    events = []
    t = t0
    for name, gap, size, dur in zip(seq, gaps, sizes, durations):
        t += int(gap)
        events.append(Event(t, SYNTH_TOKENS[name], name,
                            {"size": round(float(size), 3), "duration": round(float(dur), 3)}))
    return events


def synth_context(rng: np.random.Generator, label: int) -> dict:
    origin = ORIGINS[int(rng.choice(len(ORIGINS), p=_ORIGIN_P[label]))]
    device = DEVICES[int(rng.choice(len(DEVICES), p=_DEVICE_P[label]))]
    privileged = int(rng.random() < _PRIV_P[label])
    hour = int(rng.integers(8, 19)) if label == 0 else int(rng.integers(0, 24))
    return {"origin": origin, "hour": hour, "privileged": privileged, "device": device}


def synth_static(rng: np.random.Generator, label: int, n: int, separation: float) -> np.ndarray:
    x = rng.standard_normal(n)
    if label == 1:
        x = x + separation / math.sqrt(n)
    return x


def generate_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Two Gaussian static clusters ``separation`` apart, class-conditional traces and context."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    labels = np.r_[np.zeros(cfg.n_benign, dtype=np.int64), np.ones(cfg.n_malicious, dtype=np.int64)]
    labels = labels[rng.permutation(labels.size)]
    samples = []
    for i, label in enumerate(labels.tolist()):
        static = synth_static(rng, label, cfg.n, cfg.separation)
        context = normalize_context(synth_context(rng, label))
        trace = None
        if cfg.with_traces:
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            trace = tuple(synth_events(rng, label, length, cfg, SYNTH_T0 + i * 1_000_000))
        samples.append(LabeledSample(f"s{i:05d}", static, context, label, trace))
    schema = DatasetSchema(cfg.n, synthetic_vocabulary(), SYNTH_ATTR_KEYS)
    return Dataset(tuple(samples), schema, "synthetic")


# ---------------------------------------------------------------------------
# folds and oversampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: Mapping[str, int]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]

    def folds(self) -> list[list[str]]:
        return [self.test_ids(f) for f in range(self.k)]


def stratified_kfold(ds: Dataset, k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class by seed, then deal round-robin into ``k`` folds.

    Dealing continues across classes (negatives pick up where positives
    stopped), so fold sizes differ by at most one.
    """
    if k < 2:
        raise DataError("k must be >= 2")
    labels = ds.labels
    ids = ds.ids
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    cursor = 0
    for cls in (1, 0):
        members = [ids[j] for j in np.nonzero(labels == cls)[0]]
        if len(members) < k:
            raise DataError(f"class {cls} has {len(members)} samples, fewer than k={k}")
        for pos in rng.permutation(len(members)):
            assignments[members[pos]] = cursor % k
            cursor += 1
    ordered = {i: assignments[i] for i in ids}
    return FoldPlan(k, ordered, seed)


def interpolate(x: np.ndarray, neighbor: np.ndarray, u: float) -> np.ndarray:
    return x + u * (neighbor - x)


def nearest_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points (Euclidean); ties go to the lower index."""
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote(minority, k_neighbors: int = 5, target: int | None = None, seed: int = 0,
          return_provenance: bool = False):
    """Synthesize ``target - len(minority)`` points between minority samples and their neighbors.

    With ``return_provenance`` also returns ``(source_idx, neighbor_idx, u)`` arrays.
    """
    X = np.asarray(minority, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("minority must be a 2-D array")
    n = X.shape[0]
    if k_neighbors < 1:
        raise DataError("k_neighbors must be >= 1")
    if n < k_neighbors + 1:
        raise DataError(f"SMOTE needs at least {k_neighbors + 1} minority points, got {n}")
    target = n if target is None else target
    if target < n:
        raise DataError(f"target {target} is below the minority size {n}")
    count = target - n
    rng = np.random.default_rng(seed)
    if count == 0:
        out = np.zeros((0, X.shape[1]))
        empty = np.zeros(0, dtype=np.int64)
        return (out, (empty, empty, np.zeros(0))) if return_provenance else out
    nn = nearest_neighbors(X, k_neighbors)
    src = rng.integers(0, n, size=count)
    pick = rng.integers(0, k_neighbors, size=count)
    u = rng.random(count)
    nbr = nn[src, pick]
    a, b = X[src], X[nbr]
    # clamp to the segment's box against one-ulp overshoot
    out = np.clip(a + u[:, None] * (b - a), np.minimum(a, b), np.maximum(a, b))
    if return_provenance:
        return out, (src, nbr, u)
    return out


def oversample_minority(X: np.ndarray, y: np.ndarray, k_neighbors: int = 5, ratio: float = 1.0,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Grow the minority class to ``ratio`` times the majority count with SMOTE.

    ``k_neighbors`` shrinks when the minority is too small; with fewer than two
    minority points the data is returned unchanged.
    """
    counts = np.bincount(y, minlength=2)
    minority = int(np.argmin(counts))
    n_min, n_maj = int(counts[minority]), int(counts[1 - minority])
    target = max(n_min, int(round(ratio * n_maj)))
    k = min(k_neighbors, n_min - 1)
    if k < 1 or target == n_min:
        return X, y
    synth = smote(X[y == minority], k, target, seed)
    return np.vstack([X, synth]), np.r_[y, np.full(synth.shape[0], minority, dtype=y.dtype)]
