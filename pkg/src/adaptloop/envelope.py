"""Canonical wire unit: one timestamped message on a topic.

Every sample moving through the platform (sensor readings, detector
events, self-label records) is wrapped in a SampleEnvelope. The JSON
encoding is canonical (fixed field order, no whitespace) so persisted
logs can be compared byte-for-byte on replay.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Any

WIRE_FIELDS = ("topic", "source_id", "seq", "ts_ns", "payload")

# one shared encoder; building it per call costs ~20% on the hot path
_encode = json.JSONEncoder(separators=(",", ":")).encode


class EnvelopeError(ValueError):
    """Raised when an envelope fails ingress validation."""


@dataclass(slots=True)
class SampleEnvelope:
    topic: str
    source_id: str
    seq: int
    timestamp_ns: int
    payload: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.topic:
            raise EnvelopeError("empty topic")
        if not self.source_id:
            raise EnvelopeError("empty source_id")
        if self.timestamp_ns <= 0:
            raise EnvelopeError(f"timestamp_ns must be > 0, got {self.timestamp_ns}")
        if not isinstance(self.payload, dict):
            raise EnvelopeError("payload must be a mapping")
        for key, value in self.payload.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise EnvelopeError(f"non-finite payload field {key!r}: {value}")

    def to_wire(self) -> str:
        """Canonical JSON line; field order is fixed by WIRE_FIELDS."""
        return _encode(
            {
                "topic": self.topic,
                "source_id": self.source_id,
                "seq": self.seq,
                "ts_ns": self.timestamp_ns,
                "payload": self.payload,
            }
        )

    @classmethod
    def from_wire(cls, line: str | bytes) -> "SampleEnvelope":
        obj = json.loads(line)
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "SampleEnvelope":
        try:
            return cls(
                topic=obj["topic"],
                source_id=obj["source_id"],
                seq=int(obj["seq"]),
                timestamp_ns=int(obj["ts_ns"]),
                payload=obj.get("payload", {}),
            )
        except (KeyError, TypeError) as exc:
            raise EnvelopeError(f"malformed envelope: {exc}") from exc


def binary_payload(data: bytes, content_type: str) -> dict[str, Any]:
    """Wrap an opaque byte block as an envelope payload."""
    return {
        "content_type": content_type,
        "data_b64": base64.b64encode(data).decode("ascii"),
    }


def binary_payload_bytes(payload: dict[str, Any]) -> bytes:
    return base64.b64decode(payload["data_b64"])
