"""Causal knowledge graph store: nodes, directed edges, truth tables.

A truth table encodes the state-transition logic between one cause
node and an ordered list of effect nodes: each row maps a tuple of
effect state symbols (one per effect node, "*" = don't care) to
exactly one cause state. The mapping must be a partial function after
wildcard expansion; validation brute-forces the expansion over the
effect alphabets.

The whole store round-trips through a single JSON document, which is
also the on-disk format.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

WILDCARD = "*"


class KgError(Exception):
    pass


class TableConflictError(KgError):
    def __init__(self, conflicts: list[str]):
        super().__init__("; ".join(conflicts))
        self.conflicts = conflicts


@dataclass
class KgNode:
    node_id: str
    label: str
    state_alphabet: list[str]
    bindings: dict[str, str] = field(default_factory=dict)  # e.g. topic, esd_service

    def validate(self) -> None:
        if not self.node_id:
            raise KgError("empty node_id")
        if not self.state_alphabet:
            raise KgError(f"node {self.node_id!r}: empty state alphabet")
        if len(set(self.state_alphabet)) != len(self.state_alphabet):
            raise KgError(f"node {self.node_id!r}: duplicate state symbols")

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "label": self.label,
                "state_alphabet": self.state_alphabet, "bindings": self.bindings}

    @classmethod
    def from_dict(cls, obj: dict) -> "KgNode":
        return cls(obj["node_id"], obj.get("label", obj["node_id"]),
                   list(obj["state_alphabet"]), dict(obj.get("bindings", {})))


@dataclass
class KgEdge:
    edge_id: str
    from_node: str
    to_node: str

    def validate(self) -> None:
        if self.from_node == self.to_node:
            raise KgError(f"edge {self.edge_id!r}: self-loop")

    def to_dict(self) -> dict:
        return {"edge_id": self.edge_id, "from_node": self.from_node,
                "to_node": self.to_node}

    @classmethod
    def from_dict(cls, obj: dict) -> "KgEdge":
        return cls(obj["edge_id"], obj["from_node"], obj["to_node"])


@dataclass
class TruthTable:
    table_id: str
    cause_node: str
    effect_nodes: list[str]
    # rows: (effect symbol tuple) -> cause state symbol
    rows: list[tuple[tuple[str, ...], str]]
    max_wait_ns: int = 10 * 10**9

    def to_dict(self) -> dict:
        return {
            "table_id": self.table_id,
            "cause_node": self.cause_node,
            "effect_nodes": self.effect_nodes,
            "rows": [{"effects": list(t), "cause": c} for t, c in self.rows],
            "max_wait_ns": self.max_wait_ns,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TruthTable":
        return cls(
            table_id=obj["table_id"],
            cause_node=obj["cause_node"],
            effect_nodes=list(obj["effect_nodes"]),
            rows=[(tuple(r["effects"]), r["cause"]) for r in obj["rows"]],
            max_wait_ns=int(obj.get("max_wait_ns", 10 * 10**9)),
        )


class KgStore:
    """Embedded, read-mostly store; mutations serialized by one lock."""

    def __init__(self, persist_path: Optional[Path] = None):
        self._lock = threading.Lock()
        self.nodes: dict[str, KgNode] = {}
        self.edges: dict[str, KgEdge] = {}
        self.tables: dict[str, TruthTable] = {}
        self._path = Path(persist_path) if persist_path else None
        if self._path and self._path.exists():
            self.import_json(json.loads(self._path.read_text()))

    # -- graph -------------------------------------------------------

    def upsert_node(self, node: KgNode) -> str:
        node.validate()
        with self._lock:
            self.nodes[node.node_id] = node
            self._save()
        return node.node_id

    def upsert_edge(self, edge: KgEdge) -> str:
        edge.validate()
        with self._lock:
            for end in (edge.from_node, edge.to_node):
                if end not in self.nodes:
                    raise KgError(f"edge {edge.edge_id!r}: unknown node {end!r}")
            self.edges[edge.edge_id] = edge
            self._save()
        return edge.edge_id

    def get_node(self, node_id: str) -> KgNode:
        node = self.nodes.get(node_id)
        if node is None:
            raise KgError(f"unknown node {node_id!r}")
        return node

    # -- truth tables ------------------------------------------------

    def validate_table(self, table: TruthTable) -> list[str]:
        """Return all conflicts; empty list means the table is well formed."""
        conflicts: list[str] = []
        if table.cause_node not in self.nodes:
            return [f"unknown cause node {table.cause_node!r}"]
        cause_alpha = set(self.nodes[table.cause_node].state_alphabet)
        effect_alphas: list[list[str]] = []
        for nid in table.effect_nodes:
            if nid not in self.nodes:
                return [f"unknown effect node {nid!r}"]
            effect_alphas.append(self.nodes[nid].state_alphabet)
        if table.max_wait_ns <= 0:
            conflicts.append("max_wait must be > 0")
        seen: dict[tuple[str, ...], str] = {}
        for tup, cause in table.rows:
            if len(tup) != len(table.effect_nodes):
                conflicts.append(f"row {tup} arity != {len(table.effect_nodes)}")
                continue
            if cause not in cause_alpha:
                conflicts.append(f"cause symbol {cause!r} not in alphabet")
                continue
            bad = False
            for sym, alpha in zip(tup, effect_alphas):
                if sym != WILDCARD and sym not in alpha:
                    conflicts.append(f"effect symbol {sym!r} not in alphabet")
                    bad = True
            if bad:
                continue
            for expanded in expand_row(tup, effect_alphas):
                prev = seen.get(expanded)
                if prev is not None and prev != cause:
                    conflicts.append(
                        f"ambiguous rows: {expanded} -> {prev!r} and {cause!r}")
                else:
                    seen[expanded] = cause
        return conflicts

    def put_truth_table(self, table: TruthTable) -> str:
        conflicts = self.validate_table(table)
        if conflicts:
            raise TableConflictError(conflicts)
        with self._lock:
            self.tables[table.table_id] = table
            self._save()
        return table.table_id

    def get_truth_table(self, cause_node: str,
                        effect_nodes: list[str]) -> TruthTable:
        key = (cause_node, tuple(effect_nodes))
        for table in self.tables.values():
            if (table.cause_node, tuple(table.effect_nodes)) == key:
                return table
        raise KgError(f"no truth table for {key}")

    def get_table(self, table_id: str) -> TruthTable:
        table = self.tables.get(table_id)
        if table is None:
            raise KgError(f"unknown table {table_id!r}")
        return table

    def list_causal_pairs(self) -> list[tuple[str, tuple[str, ...], str]]:
        return [(t.cause_node, tuple(t.effect_nodes), t.table_id)
                for t in self.tables.values()]

    # -- serialization -----------------------------------------------

    def export_json(self) -> dict:
        with self._lock:
            return {
                "nodes": [n.to_dict() for n in self.nodes.values()],
                "edges": [e.to_dict() for e in self.edges.values()],
                "truth_tables": [t.to_dict() for t in self.tables.values()],
            }

    def import_json(self, obj: dict) -> None:
        for n in obj.get("nodes", []):
            node = KgNode.from_dict(n)
            node.validate()
            self.nodes[node.node_id] = node
        for e in obj.get("edges", []):
            edge = KgEdge.from_dict(e)
            edge.validate()
            self.edges[edge.edge_id] = edge
        for t in obj.get("truth_tables", []):
            table = TruthTable.from_dict(t)
            self.tables[table.table_id] = table

    def save(self, path: Optional[Path] = None) -> None:
        target = Path(path) if path else self._path
        if target:
            target.write_text(json.dumps(self.export_json(), indent=1))

    def _save(self) -> None:
        # called under lock; rebuild document without re-locking
        if self._path:
            doc = {
                "nodes": [n.to_dict() for n in self.nodes.values()],
                "edges": [e.to_dict() for e in self.edges.values()],
                "truth_tables": [t.to_dict() for t in self.tables.values()],
            }
            self._path.write_text(json.dumps(doc, indent=1))


def expand_row(tup: tuple[str, ...],
               effect_alphas: list[list[str]]) -> list[tuple[str, ...]]:
    """Expand wildcard slots over the corresponding effect alphabets."""
    choices = [alpha if sym == WILDCARD else [sym]
               for sym, alpha in zip(tup, effect_alphas)]
    return [tuple(combo) for combo in itertools.product(*choices)]


def printer_demo_graph() -> dict:
    """Illustrative two-node graph for a desk 3D printer.

    The state machine contents are authored for this artifact, not
    taken from any deployment.
    """
    return {
        "nodes": [
            {"node_id": "hand_arm", "label": "Hand&Arm",
             "state_alphabet": ["press_button", "background"], "bindings": {}},
            {"node_id": "controller", "label": "Controller",
             "state_alphabet": ["power_on", "power_off"], "bindings": {}},
        ],
        "edges": [
            {"edge_id": "hand_arm->controller",
             "from_node": "hand_arm", "to_node": "controller"},
        ],
        "truth_tables": [
            {"table_id": "printer_power", "cause_node": "hand_arm",
             "effect_nodes": ["controller"],
             "rows": [
                 {"effects": ["power_on"], "cause": "press_button"},
                 {"effects": ["power_off"], "cause": "press_button"},
             ],
             "max_wait_ns": 10 * 10**9},
        ],
    }
