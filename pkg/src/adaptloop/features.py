"""Windowed feature pooling shared by the engine and the models.

A labeled sample is the fixed-length feature vector extracted from one
cause-stream window plus its label and provenance. Pooling is
per-channel mean and standard deviation over the window, concatenated
in channel order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .envelope import SampleEnvelope


class FeatureError(ValueError):
    pass


@dataclass
class LabeledSample:
    features: list[float]
    label: str
    provenance: dict = field(default_factory=dict)  # record id + window
    split_tag: str = "train"
    empty_window: bool = False

    def validate(self) -> None:
        for v in self.features:
            if not math.isfinite(v):
                raise FeatureError(f"non-finite feature value {v}")

    def content_key(self) -> str:
        doc = json.dumps({"features": self.features, "label": self.label},
                         separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {"features": self.features, "label": self.label,
                "provenance": self.provenance, "split_tag": self.split_tag,
                "empty_window": self.empty_window}

    @classmethod
    def from_dict(cls, obj: dict) -> "LabeledSample":
        return cls(list(obj["features"]), obj["label"],
                   dict(obj.get("provenance", {})), obj.get("split_tag", "train"),
                   bool(obj.get("empty_window", False)))


def pool_envelopes(envelopes: list[SampleEnvelope],
                   channels: list[str]) -> Optional[list[float]]:
    """Mean and std per channel over the window; None if no samples."""
    if not envelopes:
        return None
    cols = [[float(e.payload[ch]) for e in envelopes if ch in e.payload]
            for ch in channels]
    feats: list[float] = []
    for col in cols:
        if not col:
            return None
        n = len(col)
        mean = sum(col) / n
        var = sum((v - mean) ** 2 for v in col) / n
        feats.append(mean)
        feats.append(math.sqrt(var))
    return feats
