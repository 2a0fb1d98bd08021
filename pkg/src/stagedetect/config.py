"""Run configuration. Every field has a default; JSON files mirror this structure."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import PE_LAYOUT

LAYOUTS = ("gaussian", "pe")


@dataclass
class DimsConfig:
    n: int = 16
    # "gaussian": synthetic clusters of any width; "pe": extract_static layout
    layout: str = "gaussian"
    t_max: int = 32
    vocabulary_path: str | None = None
    attr_keys: tuple[str, ...] = ("size", "duration")


@dataclass
class SyntheticSettings:
    n_benign: int = 1000
    n_malicious: int = 1000
    separation: float = 4.0
    min_len: int = 16
    max_len: int = 32
    marker_rate: float = 0.05
    token_shift: float = 0.3
    with_traces: bool = True


@dataclass
class ForestSettings:
    tree_count: int = 100
    max_depth: int | None = 12
    max_features: int | None = None
    bootstrap: bool = True


@dataclass
class SequenceSettings:
    hidden: int = 16
    learning_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 16
    clip_norm: float = 5.0
    init_scale: float = 0.1
    forget_bias: float = 1.0


@dataclass
class MetaSettings:
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    subsample: float = 1.0


@dataclass
class SmoteSettings:
    enabled: bool = True
    k_neighbors: int = 5
    # minority grows to ratio * majority inside each training fold
    ratio: float = 1.0


@dataclass
class Thresholds:
    stage1: float = 0.5
    final: float = 0.5
    suspicious: float = 0.6
    quarantine: float = 0.85


@dataclass
class Switches:
    enable_gating: bool = False
    gate_low: float = 0.1
    stage1_soft_handoff: bool = False


@dataclass
class AgentSettings:
    window_stride: int = 16


@dataclass
class Paths:
    out_dir: str = "out"
    dataset: str | None = None


@dataclass
class RunConfig:
    seed: int = 7
    k_folds: int = 5
    stacking_folds: int = 3
    dims: DimsConfig = field(default_factory=DimsConfig)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    forest: ForestSettings = field(default_factory=ForestSettings)
    sequence: SequenceSettings = field(default_factory=SequenceSettings)
    meta: MetaSettings = field(default_factory=MetaSettings)
    smote: SmoteSettings = field(default_factory=SmoteSettings)
    thresholds: Thresholds = field(default_factory=Thresholds)
    switches: Switches = field(default_factory=Switches)
    agent: AgentSettings = field(default_factory=AgentSettings)
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> "RunConfig":
        d = self.dims
        if d.layout not in LAYOUTS:
            raise ConfigError(f"dims.layout must be one of {LAYOUTS}, got {d.layout!r}")
        if d.layout == "pe" and d.n != PE_LAYOUT.n:
            raise ConfigError(f"dims.n={d.n} does not match the pe layout width {PE_LAYOUT.n}")
        if d.n < 1 or d.t_max < 1:
            raise ConfigError("dims.n and dims.t_max must be >= 1")
        s = self.synthetic
        if s.n_benign < 1 or s.n_malicious < 1:
            raise ConfigError("synthetic class sizes must be >= 1")
        if s.separation < 0:
            raise ConfigError("synthetic.separation must be >= 0")
        if not 1 <= s.min_len <= s.max_len:
            raise ConfigError("need 1 <= synthetic.min_len <= synthetic.max_len")
        if self.k_folds < 2 or self.stacking_folds < 2:
            raise ConfigError("k_folds and stacking_folds must be >= 2")
        if self.forest.tree_count < 1 or (self.forest.max_depth is not None and self.forest.max_depth < 1):
            raise ConfigError("forest.tree_count and forest.max_depth must be >= 1")
        q = self.sequence
        if q.hidden < 1 or q.epochs < 1 or q.batch_size < 1 or q.learning_rate < 0 or q.clip_norm <= 0:
            raise ConfigError("invalid sequence settings")
        m = self.meta
        if m.rounds < 0 or m.learning_rate <= 0 or not 1 <= m.max_depth <= 3 or not 0 < m.subsample <= 1:
            raise ConfigError("invalid meta settings")
        if self.smote.k_neighbors < 1 or self.smote.ratio <= 0:
            raise ConfigError("invalid smote settings")
        t = self.thresholds
        for name in ("stage1", "final", "suspicious", "quarantine"):
            if not 0.0 < getattr(t, name) < 1.0:
                raise ConfigError(f"thresholds.{name} must lie in (0, 1)")
        if t.suspicious > t.quarantine:
            raise ConfigError("thresholds.suspicious must not exceed thresholds.quarantine")
        if self.agent.window_stride < 1:
            raise ConfigError("agent.window_stride must be >= 1")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return _build(cls, obj, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(obj).validate()


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in obj:
            continue
        hint = hints[f.name]
        val = obj[f.name]
        if dataclasses.is_dataclass(hint):
            kw[f.name] = _build(hint, val, f"{where}.{f.name}")
        elif typing.get_origin(hint) is tuple:
            kw[f.name] = tuple(val)
        else:
            kw[f.name] = val
    return cls(**kw)
