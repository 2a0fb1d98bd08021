"""Versioned JSON container for the three trained stages."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .config import RunConfig
from .errors import ModelFormatError
from .stage1_static import ForestModel
from .stage2_sequence import LstmParams
from .stage3_fusion import MetaModel

FORMAT_VERSION = "stagedetect-bundle/1"


@dataclass(frozen=True)
class ModelBundle:
    config: RunConfig
    forest: ForestModel
    lstm: LstmParams | None
    meta: MetaModel
    vocabulary: Mapping[str, int]
    attr_keys: tuple[str, ...]
    t_max: int
    fingerprint: Mapping = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.forest.n_features

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "forest": self.forest.to_json(),
            "lstm": None if self.lstm is None else self.lstm.to_json(),
            "meta": self.meta.to_json(),
            "vocabulary": dict(self.vocabulary),
            "attr_keys": list(self.attr_keys),
            "t_max": self.t_max,
            "fingerprint": dict(self.fingerprint),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "ModelBundle":
        if not isinstance(obj, dict):
            raise ModelFormatError("bundle must be a JSON object")
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported bundle format {version!r}; expected {FORMAT_VERSION!r}")
        try:
            return cls(
                RunConfig.from_dict(obj["config"]),
                ForestModel.from_json(obj["forest"]),
                None if obj["lstm"] is None else LstmParams.from_json(obj["lstm"]),
                MetaModel.from_json(obj["meta"]),
                {str(k): int(v) for k, v in obj["vocabulary"].items()},
                tuple(obj["attr_keys"]),
                int(obj["t_max"]),
                dict(obj.get("fingerprint", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"corrupt bundle: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"bundle {path} is not valid JSON: {exc.msg}") from None
        return cls.from_json(obj)
