"""Service registry implementing the unit-service lifecycle contract.

Every data-generating or model service registers a descriptor here;
control commands walk the registered -> running -> stopped -> running
state machine. The registry is the metadata store a full deployment
would keep in a relational database.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

LAYER_KINDS = ("edge_sensor", "external_receiver", "ml_service", "slb_service")
CONTROL_STATES = ("registered", "running", "stopped")

# legal (state, command) -> next state
_TRANSITIONS = {
    ("registered", "start"): "running",
    ("running", "stop"): "stopped",
    ("stopped", "start"): "running",
}


class RegistryError(Exception):
    pass


class IllegalTransitionError(RegistryError):
    pass


@dataclass
class ServiceDescriptor:
    service_id: str
    layer_kind: str
    input_topics: list[str] = field(default_factory=list)
    output_topics: list[str] = field(default_factory=list)
    control_state: str = "registered"
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.service_id:
            raise RegistryError("empty service_id")
        if self.layer_kind not in LAYER_KINDS:
            raise RegistryError(f"unknown layer_kind {self.layer_kind!r}")
        if self.control_state not in CONTROL_STATES:
            raise RegistryError(f"unknown control_state {self.control_state!r}")
        if self.layer_kind in ("edge_sensor", "external_receiver") and not self.output_topics:
            raise RegistryError(
                f"data-generating service {self.service_id!r} needs output_topics")

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "layer_kind": self.layer_kind,
            "input_topics": self.input_topics,
            "output_topics": self.output_topics,
            "control_state": self.control_state,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ServiceDescriptor":
        return cls(
            service_id=obj["service_id"],
            layer_kind=obj["layer_kind"],
            input_topics=list(obj.get("input_topics", [])),
            output_topics=list(obj.get("output_topics", [])),
            control_state=obj.get("control_state", "registered"),
            metadata=dict(obj.get("metadata", {})),
        )


class ServiceRegistry:
    def __init__(self, persist_path: Optional[Path] = None):
        self._lock = threading.Lock()
        self._services: dict[str, ServiceDescriptor] = {}
        self._path = Path(persist_path) if persist_path else None
        if self._path and self._path.exists():
            for obj in json.loads(self._path.read_text()):
                desc = ServiceDescriptor.from_dict(obj)
                self._services[desc.service_id] = desc

    def register(self, descriptor: ServiceDescriptor) -> str:
        descriptor.validate()
        with self._lock:
            descriptor.control_state = "registered"
            self._services[descriptor.service_id] = descriptor
            self._save()
        return descriptor.service_id

    def control(self, service_id: str, command: str,
                metadata: Optional[dict[str, str]] = None) -> str:
        with self._lock:
            desc = self._services.get(service_id)
            if desc is None:
                raise IllegalTransitionError(f"unregistered service {service_id!r}")
            if command == "update":
                if metadata is not None:
                    desc.metadata = dict(metadata)
                self._save()
                return desc.control_state
            nxt = _TRANSITIONS.get((desc.control_state, command))
            if nxt is None:
                raise IllegalTransitionError(
                    f"illegal transition: {command!r} from {desc.control_state!r}")
            desc.control_state = nxt
            self._save()
            return nxt

    def get(self, service_id: str) -> ServiceDescriptor:
        with self._lock:
            desc = self._services.get(service_id)
            if desc is None:
                raise RegistryError(f"unknown service {service_id!r}")
            return desc

    def is_registered(self, service_id: str) -> bool:
        with self._lock:
            return service_id in self._services

    def list(self) -> list[ServiceDescriptor]:
        with self._lock:
            return list(self._services.values())

    def _save(self) -> None:
        if self._path:
            self._path.write_text(json.dumps(
                [d.to_dict() for d in self._services.values()], indent=1))
