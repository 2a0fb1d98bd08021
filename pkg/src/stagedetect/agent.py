"""Simulated endpoint monitor: event replay, quarantine state machine, alerts, rollback.

The simulated system is a flat key -> value map standing in for registry
entries and files. Mutating events carry an effect ``{"key", "new"}``; a
``new`` of ``None`` deletes the key.
"""
from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dataset import MARKER_TOKEN, SYNTH_T0, SyntheticConfig, synth_events
from .errors import DataError
from .features import EVENT_TYPES, Event, normalize_context
from .stage3_fusion import RiskVerdict, run_pipeline

PAYLOAD_SENTINEL = "PayloadExecute"


class StreamError(DataError):
    pass


class AgentError(DataError):
    pass


@dataclass(frozen=True)
class EndpointEvent:
    t: int
    pid: int
    type: str
    name: str
    attrs: Mapping[str, float] = field(default_factory=dict)
    effect: Mapping | None = None
    context: Mapping | None = None
    static: tuple[float, ...] | None = None

    @classmethod
    def from_json(cls, obj: Mapping) -> "EndpointEvent":
        for key in ("t", "pid", "type", "name"):
            if key not in obj:
                raise StreamError(f"missing {key}")
        if obj["type"] not in EVENT_TYPES:
            raise StreamError(f"unknown event type {obj['type']!r}")
        effect = obj.get("effect")
        if effect is not None and (not isinstance(effect, dict) or "key" not in effect):
            raise StreamError("effect must be an object with a 'key'")
        static = obj.get("static")
        return cls(
            int(obj["t"]), int(obj["pid"]), obj["type"], str(obj["name"]),
            {str(k): float(v) for k, v in (obj.get("attrs") or {}).items()},
            None if effect is None else {"key": str(effect["key"]), "new": effect.get("new")},
            obj.get("context"),
            None if static is None else tuple(float(v) for v in static),
        )

    def to_json(self) -> dict:
        obj = {"t": self.t, "pid": self.pid, "type": self.type, "name": self.name,
               "attrs": dict(self.attrs)}
        if self.effect is not None:
            obj["effect"] = dict(self.effect)
        if self.context is not None:
            obj["context"] = dict(self.context)
        if self.static is not None:
            obj["static"] = list(self.static)
        return obj

    def as_trace_event(self) -> Event:
        return Event(self.t, self.type, self.name, self.attrs)


def read_stream(path) -> list[EndpointEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(EndpointEvent.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise StreamError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            except (DataError, TypeError, ValueError) as exc:
                raise StreamError(f"line {lineno}: {exc}") from None
    return events


def write_stream(events: Iterable[EndpointEvent], path) -> None:
    Path(path).write_text(
        "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in events), encoding="utf-8")


class Status(str, enum.Enum):
    ACTIVE = "Active"
    SUSPICIOUS = "Suspicious"
    QUARANTINED = "Quarantined"
    RESTORED = "Restored"


_LEGAL = {
    (Status.ACTIVE, Status.SUSPICIOUS),
    (Status.SUSPICIOUS, Status.ACTIVE),
    (Status.SUSPICIOUS, Status.QUARANTINED),
    (Status.QUARANTINED, Status.RESTORED),
}


@dataclass
class ProcessState:
    pid: int
    window: deque
    status: Status = Status.ACTIVE
    static: np.ndarray | None = None
    context: Mapping | None = None
    events_seen: int = 0
    dropped: int = 0
    last_t: int | None = None
    last_verdict: RiskVerdict | None = None

    def move(self, new: Status) -> None:
        if (self.status, new) not in _LEGAL:
            raise AgentError(f"illegal transition {self.status.value} -> {new.value} for pid {self.pid}")
        self.status = new


@dataclass(frozen=True)
class EffectRecord:
    key: str
    old: object
    new: object


@dataclass
class RollbackJournal:
    records: dict = field(default_factory=dict)

    def record(self, pid: int, rec: EffectRecord) -> None:
        self.records.setdefault(pid, []).append(rec)

    def for_pid(self, pid: int) -> list[EffectRecord]:
        return list(self.records.get(pid, []))


@dataclass(frozen=True)
class AlertReport:
    pid: int
    verdict: RiskVerdict
    window: Mapping
    recommended_action: str
    emitted_at: int
    event_index: int
    touched_keys: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "pid": self.pid,
            "emitted_at": self.emitted_at,
            "event_index": self.event_index,
            "recommended_action": self.recommended_action,
            "touched_keys": list(self.touched_keys),
            "window": dict(self.window),
            "verdict": self.verdict.to_json(),
        }


@dataclass(frozen=True)
class Policy:
    window_stride: int = 16
    suspicious: float = 0.6
    quarantine: float = 0.85

    @classmethod
    def from_config(cls, cfg) -> "Policy":
        return cls(cfg.agent.window_stride, cfg.thresholds.suspicious, cfg.thresholds.quarantine)


@dataclass(frozen=True)
class Transition:
    pid: int
    event_index: int
    old: Status
    new: Status
    risk: float


@dataclass
class ReplayResult:
    states: dict
    alerts: list
    journal: RollbackJournal
    system_map: dict
    transitions: list

    def alerts_jsonl(self) -> str:
        return "".join(json.dumps(a.to_json(), sort_keys=True) + "\n" for a in self.alerts)

    def summary(self) -> dict:
        return {
            "processes": {
                str(pid): {"status": st.status.value, "events_seen": st.events_seen,
                           "dropped": st.dropped,
                           "last_risk": None if st.last_verdict is None else st.last_verdict.risk}
                for pid, st in sorted(self.states.items())
            },
            "alerts": len(self.alerts),
            "transitions": [
                {"pid": t.pid, "event_index": t.event_index, "from": t.old.value, "to": t.new.value,
                 "risk": t.risk}
                for t in self.transitions
            ],
            "system_map_sha256": map_hash(self.system_map),
        }


@dataclass(frozen=True)
class _WindowSample:
    id: str
    static: np.ndarray
    context: Mapping
    trace: tuple


def map_snapshot(system_map: Mapping) -> str:
    return json.dumps(system_map, sort_keys=True)


def map_hash(system_map: Mapping) -> str:
    return hashlib.sha256(map_snapshot(system_map).encode()).hexdigest()


def _window_summary(window) -> dict:
    names = Counter(e.name for e in window)
    types = Counter(e.type for e in window)
    return {
        "events": len(window),
        "first_t": window[0].t if window else None,
        "last_t": window[-1].t if window else None,
        "names": dict(sorted(names.items())),
        "types": dict(sorted(types.items())),
    }


def _apply_effect(system_map: dict, journal: RollbackJournal, pid: int, effect: Mapping) -> None:
    key, new = effect["key"], effect.get("new")
    journal.record(pid, EffectRecord(key, system_map.get(key), new))
    if new is None:
        system_map.pop(key, None)
    else:
        system_map[key] = new


def replay(stream, bundle, policy: Policy | None = None,
           initial_map: Mapping | None = None) -> ReplayResult:
    """Feed events through the pipeline in order.

    Every ``window_stride`` events of a process, its last ``t_max`` events are
    scored. Risk at or above ``suspicious`` marks the process Suspicious, at or
    above ``quarantine`` quarantines it and emits one alert. Quarantined
    processes have their later events dropped.
    """
    if isinstance(stream, (str, Path)):
        stream = read_stream(stream)
    policy = policy or Policy.from_config(bundle.config)
    system_map = dict(initial_map or {})
    journal = RollbackJournal()
    states: dict[int, ProcessState] = {}
    alerts: list[AlertReport] = []
    transitions: list[Transition] = []

    def move(st: ProcessState, new: Status, idx: int, risk: float) -> None:
        old = st.status
        st.move(new)
        transitions.append(Transition(st.pid, idx, old, new, risk))

    for idx, ev in enumerate(stream):
        if not isinstance(ev, EndpointEvent):
            raise StreamError(f"event {idx}: expected EndpointEvent, got {type(ev).__name__}")
        st = states.get(ev.pid)
        if st is None:
            st = states[ev.pid] = ProcessState(ev.pid, deque(maxlen=bundle.t_max))
        if st.last_t is not None and ev.t < st.last_t:
            raise StreamError(f"event {idx}: timestamp {ev.t} precedes {st.last_t} for pid {ev.pid}")
        st.last_t = ev.t
        if st.status in (Status.QUARANTINED, Status.RESTORED):
            st.dropped += 1
            continue
        if ev.static is not None and st.static is None:
            st.static = np.asarray(ev.static, dtype=np.float64)
        if ev.context is not None and st.context is None:
            st.context = normalize_context(ev.context)
        if ev.effect is not None:
            _apply_effect(system_map, journal, ev.pid, ev.effect)
        st.window.append(ev.as_trace_event())
        st.events_seen += 1
        if st.events_seen % policy.window_stride:
            continue

        static = st.static if st.static is not None else np.zeros(bundle.n)
        context = st.context if st.context is not None else normalize_context(None)
        verdict = run_pipeline(bundle, _WindowSample(f"pid-{ev.pid}@{idx}", static, context,
                                                     tuple(st.window)))
        st.last_verdict = verdict
        risk = verdict.risk
        if risk >= policy.quarantine:
            if st.status is Status.ACTIVE:
                move(st, Status.SUSPICIOUS, idx, risk)
            move(st, Status.QUARANTINED, idx, risk)
            touched = tuple(sorted({r.key for r in journal.for_pid(ev.pid)}))
            alerts.append(AlertReport(
                ev.pid, verdict, _window_summary(st.window),
                "quarantine process; review the listed keys and roll back its recorded changes",
                ev.t, idx, touched,
            ))
        elif risk >= policy.suspicious:
            if st.status is Status.ACTIVE:
                move(st, Status.SUSPICIOUS, idx, risk)
        elif st.status is Status.SUSPICIOUS:
            move(st, Status.ACTIVE, idx, risk)

    return ReplayResult(states, alerts, journal, system_map, transitions)


def rollback(journal: RollbackJournal, pid: int, system_map: Mapping, states: Mapping) -> dict:
    """Undo ``pid``'s recorded effects in reverse order; returns the restored map."""
    st = states.get(pid)
    if st is None or st.status is not Status.QUARANTINED:
        status = "unknown" if st is None else st.status.value
        raise AgentError(f"pid {pid} is not quarantined (status {status})")
    restored = dict(system_map)
    for rec in reversed(journal.for_pid(pid)):
        if rec.old is None:
            restored.pop(rec.key, None)
        else:
            restored[rec.key] = rec.old
    st.move(Status.RESTORED)
    return restored


# ---------------------------------------------------------------------------
# fixture streams
# ---------------------------------------------------------------------------

BENIGN_CONTEXT = {"origin": "local", "hour": 10, "privileged": 0, "device": "workstation"}
MALICIOUS_CONTEXT = {"origin": "download", "hour": 3, "privileged": 1, "device": "server"}


def _effect_for(ev: Event, pid: int, j: int) -> dict | None:
    if ev.type == "registry_write":
        return {"key": f"HKCU/Software/p{pid}/value{j % 4}", "new": f"{ev.name}:{j}"}
    if ev.type == "file_op":
        return {"key": f"C:/Users/p{pid}/file{j % 5}.dat", "new": f"{ev.name}:{j}"}
    return None


def _process_events(pid: int, label: int, count: int, n: int, separation: float,
                    rng: np.random.Generator, t0: int, cfg: SyntheticConfig) -> list[EndpointEvent]:
    body = synth_events(rng, label, count - 1, cfg, t0)
    center = np.zeros(n) if label == 0 else np.full(n, separation / np.sqrt(n))
    ctx = MALICIOUS_CONTEXT if label == 1 else BENIGN_CONTEXT
    out = [EndpointEvent(t0, pid, "process_create", "CreateProcessW", {}, None, dict(ctx),
                         tuple(center.tolist()))]
    for j, ev in enumerate(body, start=1):
        out.append(EndpointEvent(ev.t, pid, ev.type, ev.name, ev.attrs, _effect_for(ev, pid, j)))
    return out


def _interleave(*streams: list[EndpointEvent]) -> list[EndpointEvent]:
    merged = [e for s in streams for e in s]
    merged.sort(key=lambda e: (e.t, e.pid))
    return merged


def fixture_stream(kind: str, n: int = 16, separation: float = 4.0, seed: int = 11,
                   events_per_process: int = 48) -> list[EndpointEvent]:
    """Deterministic replay fixtures.

    ``benign``: three benign processes. ``malicious``: one benign process plus
    one malicious process whose first scoring window already contains the
    marker token and whose ``PayloadExecute`` sentinel (with a persistence
    write) comes after its third window.
    """
    cfg = SyntheticConfig(n=n, separation=separation, marker_rate=0.0)
    rng = np.random.default_rng(seed)
    if kind == "benign":
        return _interleave(*(
            _process_events(pid, 0, events_per_process, n, separation, rng, SYNTH_T0 + 7 * pid, cfg)
            for pid in (100, 200, 300)
        ))
    if kind != "malicious":
        raise ValueError(f"unknown fixture kind {kind!r}")
    benign = _process_events(100, 0, events_per_process, n, separation, rng, SYNTH_T0, cfg)
    mal = _process_events(4242, 1, events_per_process, n, separation, rng, SYNTH_T0 + 3, cfg)
    # markers inside the first window, persistence write just before, sentinel last
    for j in (3, 9):
        e = mal[j]
        mal[j] = EndpointEvent(e.t, e.pid, "api_call", MARKER_TOKEN, e.attrs)
    e = mal[5]
    mal[5] = EndpointEvent(e.t, e.pid, "registry_write", "RegSetValueExW", e.attrs,
                           {"key": "HKLM/Software/Microsoft/Windows/CurrentVersion/Run/updater",
                            "new": "C:/Users/Public/updater.exe"})
    last = mal[-1]
    mal.append(EndpointEvent(last.t + 5, 4242, "api_call", PAYLOAD_SENTINEL, {},
                             {"key": "C:/Windows/System32/drivers/etc/hosts", "new": "tampered"}))
    return _interleave(benign, mal)
