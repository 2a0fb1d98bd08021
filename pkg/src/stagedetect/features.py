"""Feature extraction for the three input families.

* static: byte statistics and a minimal PE header summary of a file at rest
* behavioral: one-hot token rows plus scaled numeric attributes per event
* context: origin / hour / privilege / device metadata as a fixed vector
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

OOV_ID = 0
EVENT_TYPES = ("api_call", "registry_write", "file_op", "net_session", "process_create")

ORIGINS = ("download", "removable_media", "local", "network_share")
DEVICES = ("workstation", "server", "test")
CONTEXT_DEFAULTS = {"origin": "local", "hour": 12, "privileged": 0, "device": "workstation"}
CONTEXT_DIM = len(ORIGINS) + 2 + 1 + len(DEVICES)

# PE constants
_DOS_MAGIC = b"MZ"
_PE_MAGIC = b"PE\0\0"
_E_LFANEW_OFFSET = 0x3C
_COFF_SIZE = 20
_SECTION_SIZE = 40
_SCN_CNT_CODE = 0x00000020
_SCN_MEM_EXECUTE = 0x20000000

HEADER_FIELDS = (
    "machine",
    "section_count",
    "timestamp",
    "optional_header_size",
    "characteristics",
    "executable_sections",
    "parse_failed",
)
SECTION_SLOTS = 8


class FeatureError(DataError):
    pass


class PeParseError(FeatureError):
    """Structured PE parse failure; ``offset`` is where reading went wrong."""

    def __init__(self, kind: str, offset: int, detail: str = ""):
        self.kind = kind
        self.offset = offset
        msg = f"{kind} at offset {offset:#x}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


# ---------------------------------------------------------------------------
# static
# ---------------------------------------------------------------------------

def _as_u8(data: bytes | bytearray | memoryview | np.ndarray) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.uint8, copy=False).ravel()
    return np.frombuffer(bytes(data), dtype=np.uint8)


def byte_histogram(data) -> np.ndarray:
    """Normalized 256-bin byte frequency vector (all zeros for empty input)."""
    arr = _as_u8(data)
    counts = np.bincount(arr, minlength=256).astype(np.float64)
    if arr.size == 0:
        return counts
    return counts / arr.size


def shannon_entropy(data) -> float:
    """Entropy of the byte distribution in bits, in [0, 8]."""
    arr = _as_u8(data)
    if arr.size == 0:
        return 0.0
    counts = np.bincount(arr, minlength=256)
    p = counts[counts > 0] / arr.size
    h = float(-(p * np.log2(p)).sum())
    # -0.0 and tiny negative round-off for single-symbol input
    return min(max(h, 0.0), 8.0)


@dataclass(frozen=True)
class SectionInfo:
    name: str
    raw_size: int
    entropy: float
    executable: bool


@dataclass(frozen=True)
class PeHeaderSummary:
    machine: int
    section_count: int
    timestamp: int
    optional_header_size: int
    characteristics: int
    sections: tuple[SectionInfo, ...]


def _read(buf: bytes, fmt: str, offset: int, what: str):
    size = struct.calcsize(fmt)
    if offset < 0 or offset + size > len(buf):
        raise PeParseError("truncated", offset, f"need {size} bytes for {what}, have {max(len(buf) - offset, 0)}")
    return struct.unpack_from(fmt, buf, offset)


def parse_pe_header(data: bytes) -> PeHeaderSummary:
    """Parse the DOS stub pointer, COFF header and section table.

    Every read is bounds-checked; malformed input raises :class:`PeParseError`.
    """
    buf = bytes(data)
    if len(buf) < 2:
        raise PeParseError("truncated", 0, "no DOS magic")
    if buf[:2] != _DOS_MAGIC:
        raise PeParseError("bad_magic", 0, "expected 'MZ'")
    (e_lfanew,) = _read(buf, "<I", _E_LFANEW_OFFSET, "e_lfanew")
    if e_lfanew + 4 > len(buf):
        raise PeParseError("truncated", e_lfanew, "PE signature beyond end of file")
    if buf[e_lfanew:e_lfanew + 4] != _PE_MAGIC:
        raise PeParseError("bad_magic", e_lfanew, "expected 'PE\\0\\0'")
    coff = e_lfanew + 4
    machine, nsec, stamp, _symptr, _nsym, opt_size, chars = _read(buf, "<HHIIIHH", coff, "COFF header")

    table = coff + _COFF_SIZE + opt_size
    end = table + nsec * _SECTION_SIZE
    if end > len(buf):
        raise PeParseError("section_table_overrun", table,
                           f"{nsec} sections need {nsec * _SECTION_SIZE} bytes")
    sections = []
    for idx in range(nsec):
        off = table + idx * _SECTION_SIZE
        raw_name, _vsize, _vaddr, raw_size, raw_ptr = struct.unpack_from("<8sIIII", buf, off)
        (sec_chars,) = struct.unpack_from("<I", buf, off + 36)
        if raw_ptr + raw_size > len(buf):
            raise PeParseError("section_data_overrun", off,
                               f"section {idx} raw data [{raw_ptr:#x}, {raw_ptr + raw_size:#x}) past end")
        name = raw_name.rstrip(b"\0").decode("latin-1")
        body = buf[raw_ptr:raw_ptr + raw_size]
        sections.append(SectionInfo(
            name=name,
            raw_size=raw_size,
            entropy=shannon_entropy(body),
            executable=bool(sec_chars & (_SCN_CNT_CODE | _SCN_MEM_EXECUTE)),
        ))
    return PeHeaderSummary(machine, nsec, stamp, opt_size, chars, tuple(sections))


def build_pe(sections: Sequence[tuple[str, bytes, bool]], machine: int = 0x14C,
             timestamp: int = 0x5F000000, e_lfanew: int = 0x40) -> bytes:
    """Assemble a minimal PE image (no optional header) from raw section bodies.

    Used to craft fixtures; the output round-trips through :func:`parse_pe_header`.
    """
    header = bytearray(e_lfanew)
    header[:2] = _DOS_MAGIC
    struct.pack_into("<I", header, _E_LFANEW_OFFSET, e_lfanew)
    header += _PE_MAGIC
    header += struct.pack("<HHIIIHH", machine, len(sections), timestamp, 0, 0, 0, 0x0102)
    data_start = len(header) + _SECTION_SIZE * len(sections)
    table = bytearray()
    bodies = bytearray()
    for name, body, executable in sections:
        ptr = data_start + len(bodies)
        chars = (_SCN_CNT_CODE | _SCN_MEM_EXECUTE) if executable else 0x40000000
        table += struct.pack("<8sIIIIIIHHI", name.encode("latin-1")[:8], len(body), 0x1000,
                             len(body), ptr, 0, 0, 0, 0, chars)
        bodies += body
    return bytes(header + table + bodies)


@dataclass(frozen=True)
class StaticLayout:
    """Named segments of the static vector, in concatenation order."""

    section_slots: int = SECTION_SLOTS

    @property
    def segments(self) -> dict[str, int]:
        return {
            "byte_histogram": 256,
            "entropy": 1,
            "file_size": 1,
            "header_fields": len(HEADER_FIELDS),
            "section_entropies": self.section_slots,
        }

    @property
    def n(self) -> int:
        return sum(self.segments.values())

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, width in self.segments.items():
            out[name] = slice(start, start + width)
            start += width
        return out


PE_LAYOUT = StaticLayout()


@dataclass(frozen=True)
class StaticFeatureVector:
    values: np.ndarray
    layout: StaticLayout = PE_LAYOUT

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout.slices()[name]]


def extract_static(data: bytes, layout: StaticLayout = PE_LAYOUT) -> StaticFeatureVector:
    buf = bytes(data)
    header = np.zeros(len(HEADER_FIELDS))
    sect = np.zeros(layout.section_slots)
    try:
        pe = parse_pe_header(buf)
    except PeParseError:
        header[HEADER_FIELDS.index("parse_failed")] = 1.0
    else:
        header[:6] = (
            pe.machine,
            pe.section_count,
            pe.timestamp,
            pe.optional_header_size,
            pe.characteristics,
            sum(s.executable for s in pe.sections),
        )
        ent = [s.entropy for s in pe.sections[:layout.section_slots]]
        sect[:len(ent)] = ent
    values = np.concatenate([
        byte_histogram(buf),
        [shannon_entropy(buf)],
        [math.log1p(len(buf))],
        header,
        sect,
    ])
    return StaticFeatureVector(values, layout)


# ---------------------------------------------------------------------------
# behavioral
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    t: int
    type: str
    name: str
    attrs: Mapping[str, float] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: Mapping) -> "Event":
        try:
            t, etype, name = obj["t"], obj["type"], obj["name"]
        except KeyError as exc:
            raise FeatureError(f"event missing field {exc.args[0]!r}") from None
        if etype not in EVENT_TYPES:
            raise FeatureError(f"unknown event type {etype!r}; expected one of {EVENT_TYPES}")
        attrs = obj.get("attrs") or {}
        return cls(int(t), str(etype), str(name), {str(k): float(v) for k, v in attrs.items()})

    def to_json(self) -> dict:
        return {"t": self.t, "type": self.type, "name": self.name, "attrs": dict(self.attrs)}


def vocab_size(vocabulary: Mapping[str, int]) -> int:
    return max([OOV_ID, *vocabulary.values()]) + 1


def validate_vocabulary(vocabulary: Mapping[str, int]) -> None:
    if not vocabulary:
        raise FeatureError("vocabulary is empty")
    ids = list(vocabulary.values())
    if OOV_ID in ids:
        raise FeatureError("token id 0 is reserved for out-of-vocabulary names")
    if len(set(ids)) != len(ids) or min(ids) < 0:
        raise FeatureError("vocabulary ids must be unique positive integers")


def normalize_attr(x: float) -> float:
    # signed log compression; raw sizes span many orders of magnitude
    return math.copysign(math.log1p(abs(x)), x) / 10.0


@dataclass(frozen=True)
class BehaviorTrace:
    events: tuple[Event, ...]
    tokens: np.ndarray
    encoded: np.ndarray

    @property
    def T(self) -> int:
        return len(self.events)


def trace_dim(vocabulary: Mapping[str, int], attr_keys: Sequence[str]) -> int:
    return vocab_size(vocabulary) + len(attr_keys)


def encode_trace(events: Iterable[Event], vocabulary: Mapping[str, int], t_max: int,
                 attr_keys: Sequence[str] = ()) -> BehaviorTrace:
    """Encode events as rows ``one_hot(token) || scaled attrs``; keeps the last ``t_max``."""
    if not vocabulary:
        raise FeatureError("vocabulary is empty")
    if t_max < 1:
        raise FeatureError("t_max must be >= 1")
    events = tuple(events)
    kept = events[-t_max:] if len(events) > t_max else events
    v = vocab_size(vocabulary)
    out = np.zeros((len(kept), v + len(attr_keys)))
    tokens = np.array([vocabulary.get(e.name, OOV_ID) for e in kept], dtype=np.int64)
    if len(kept):
        out[np.arange(len(kept)), tokens] = 1.0
        for j, key in enumerate(attr_keys):
            out[:, v + j] = [normalize_attr(e.attrs.get(key, 0.0)) for e in kept]
    return BehaviorTrace(kept, tokens, out)


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextVector:
    values: np.ndarray

    @property
    def k(self) -> int:
        return self.values.shape[0]


def normalize_context(metadata: Mapping | None) -> dict:
    """Fill defaults and validate categories; returns a plain dict."""
    meta = dict(CONTEXT_DEFAULTS)
    if metadata:
        meta.update({k: v for k, v in metadata.items() if v is not None})
    if meta["origin"] not in ORIGINS:
        raise FeatureError(f"unknown origin {meta['origin']!r}; valid: {', '.join(ORIGINS)}")
    if meta["device"] not in DEVICES:
        raise FeatureError(f"unknown device {meta['device']!r}; valid: {', '.join(DEVICES)}")
    if meta["privileged"] not in (0, 1, True, False):
        raise FeatureError(f"privileged must be 0 or 1, got {meta['privileged']!r}")
    meta["privileged"] = int(meta["privileged"])
    meta["hour"] = float(meta["hour"])
    return meta


def encode_context(metadata: Mapping | None) -> ContextVector:
    meta = normalize_context(metadata)
    vec = np.zeros(CONTEXT_DIM)
    vec[ORIGINS.index(meta["origin"])] = 1.0
    angle = 2.0 * math.pi * meta["hour"] / 24.0
    vec[4] = math.sin(angle)
    vec[5] = math.cos(angle)
    vec[6] = float(meta["privileged"])
    vec[7 + DEVICES.index(meta["device"])] = 1.0
    return ContextVector(vec)
