"""Hyper-heterogeneous multi-graph data model for grid operating conditions.

An operating condition is a set of typed hyper-edges plugged into shared
integer addresses through named ports.  Alongside the context itself live
the two decision-side containers: ``Decision`` (concrete controller
actions) and ``SurrogateDecision`` (the real-valued parameters of the
stochastic policy over those actions).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

ABSENT = "absent"  # JSON spelling of a feature a given instance does not carry

# Controller decision kinds
D_NONE = "none"
D_BINARY = "binary"
D_CONTINUOUS = "continuous"
D_ONE_HOT = "one_hot"

RTC_CATEGORIES = 4


@dataclass(frozen=True)
class ClassSchema:
    """Static description of one hyper-edge class."""

    class_name: str
    port_names: tuple[str, ...]
    context_feature_names: tuple[str, ...]
    decision_kind: str = D_NONE
    decision_feature: str = ""

    @property
    def is_controller(self) -> bool:
        return self.decision_kind != D_NONE

    @property
    def decision_dim(self) -> int:
        """Length of the surrogate vector attached to one edge of this class."""
        if self.decision_kind == D_ONE_HOT:
            return RTC_CATEGORIES
        if self.decision_kind == D_NONE:
            return 0
        return 1


def _schema_table() -> dict[str, ClassSchema]:
    def s(name, ports, feats, kind=D_NONE, dfeat=""):
        return ClassSchema(name, tuple(ports), tuple(feats), kind, dfeat)

    entries = [
        s("bus", ["bus"], ["v", "theta", "v_nom", "v_max", "v_min", "opt"]),
        s("load", ["bus"], ["p", "q", "i", "p_target", "q_target"]),
        s("battery", ["bus"],
          ["p", "q", "i", "p_target", "q_target", "v_target",
           "p_max", "p_min", "q_max", "q_min", "regulation_mode"]),
        s("svc", ["bus"], ["p", "q", "i", "v_target", "q_target", "regulation_mode"]),
        s("vsc_station", ["station", "bus"],
          ["p", "q", "i", "v_target", "q_target", "q_min", "q_max", "regulation_mode"]),
        s("hvdc_line", ["station1", "station2"], ["p_target", "p_max", "r", "droop"]),
        s("line", ["line", "bus1", "bus2"],
          ["p1", "q1", "i1", "p2", "q2", "i2", "r", "x", "g", "b",
           "i1_max", "i2_max", "opt", "status"]),
        s("line_controller", ["line"], [], D_BINARY, "disconnect"),
        s("shunt", ["shunt", "bus"], ["p", "q", "i", "g", "b", "status"]),
        s("shunt_controller", ["shunt"], [], D_BINARY, "switch"),
        s("generator", ["gen", "bus"],
          ["p", "q", "i", "p_target", "q_target", "v_target",
           "q_max", "q_min", "regulation_mode", "slack"]),
        s("svr_unit", ["gen", "zone"], ["participate"]),
        s("svr_zone", ["zone", "regulated_bus"], ["v", "theta", "v_nom", "v_target"]),
        s("svr_controller", ["zone"], [], D_CONTINUOUS, "delta_v_target"),
        s("twt", ["twt", "bus1", "bus2"],
          ["p1", "q1", "i1", "p2", "q2", "i2", "r", "x", "g", "b",
           "ratio", "phase_shift", "i1_max", "i2_max", "opt"]),
        s("rtc", ["twt", "regulated_bus"], []),
        s("rtc_controller", ["twt"], ["v_target", "v_nom"], D_ONE_HOT, "setpoint_category"),
    ]
    return {e.class_name: e for e in entries}


#: The 17 registered hyper-edge classes, keyed by class name.
SCHEMA: dict[str, ClassSchema] = _schema_table()

#: Controller classes, in canonical order.
CONTROLLER_CLASSES: tuple[str, ...] = tuple(
    name for name in sorted(SCHEMA) if SCHEMA[name].is_controller
)

#: Electrical classes the AC solver interprets.
SOLVER_CLASSES = ("bus", "load", "line", "shunt", "generator",
                  "svr_unit", "svr_zone", "twt", "rtc")

#: Classes representable in the data model but inert in the solver.
INERT_CLASSES = ("battery", "svc", "vsc_station", "hvdc_line")

#: Ports that must resolve to an address occupied by a bus hyper-edge.
BUS_PORTS = frozenset({"bus", "bus1", "bus2", "regulated_bus"})


def schema_hash() -> str:
    """Stable digest of the registered class table (pinned into checkpoints)."""
    doc = {
        name: {
            "ports": list(cs.port_names),
            "features": list(cs.context_feature_names),
            "decision": [cs.decision_kind, cs.decision_feature],
        }
        for name, cs in sorted(SCHEMA.items())
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class H2MGError(ValueError):
    """Structural error in a context, decision, or serialized document."""


@dataclass(frozen=True)
class HyperEdge:
    """One typed object instance plugged into shared addresses.

    ``features`` maps each schema feature name to a float, or to ``None``
    when the instance does not carry that physical quantity ("absent").
    """

    id: str
    class_name: str
    ports: Mapping[str, int]
    features: Mapping[str, float | None]

    def __post_init__(self):
        if self.class_name not in SCHEMA:
            raise H2MGError(f"unknown class {self.class_name!r}")
        cs = SCHEMA[self.class_name]
        if tuple(self.ports.keys()) != cs.port_names:
            raise H2MGError(
                f"{self.class_name} edge {self.id!r}: ports {tuple(self.ports)} "
                f"do not match schema ports {cs.port_names}")
        if set(self.features.keys()) != set(cs.context_feature_names):
            raise H2MGError(
                f"{self.class_name} edge {self.id!r}: features must be exactly "
                f"{cs.context_feature_names}")

    def feature(self, name: str, default: float | None = None) -> float | None:
        val = self.features[name]
        return default if val is None else val


@dataclass(frozen=True)
class H2MGContext:
    """One grid operating condition: structure plus features.

    Immutable after construction; derived variants are built with
    :meth:`replace_features` or by the decision-application step.
    """

    address_count: int
    edges: Mapping[str, tuple[HyperEdge, ...]]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for cname in self.edges:
            if cname not in SCHEMA:
                raise H2MGError(f"unknown class {cname!r}")

    def edges_of(self, class_name: str) -> tuple[HyperEdge, ...]:
        return self.edges.get(class_name, ())

    def sorted_edges(self, class_name: str) -> list[HyperEdge]:
        """Edges of a class in canonical (id-lexicographic) order."""
        return sorted(self.edges_of(class_name), key=lambda e: e.id)

    def edge(self, class_name: str, edge_id: str) -> HyperEdge:
        for e in self.edges_of(class_name):
            if e.id == edge_id:
                return e
        raise H2MGError(f"no {class_name} edge with id {edge_id!r}")

    def all_edges(self) -> Iterator[HyperEdge]:
        for cname in sorted(self.edges):
            yield from self.sorted_edges(cname)

    def controller_ids(self) -> dict[str, list[str]]:
        """Controller edge ids per controller class, canonically ordered."""
        return {
            c: [e.id for e in self.sorted_edges(c)]
            for c in CONTROLLER_CLASSES
            if self.edges_of(c)
        }

    def replace_features(self, updates: Mapping[tuple[str, str], Mapping[str, float | None]],
                         ) -> "H2MGContext":
        """Copy with per-edge feature overrides, keyed by (class, edge id)."""
        new_edges: dict[str, tuple[HyperEdge, ...]] = {}
        for cname, elist in self.edges.items():
            out = []
            for e in elist:
                upd = updates.get((cname, e.id))
                if upd:
                    feats = dict(e.features)
                    feats.update(upd)
                    e = HyperEdge(e.id, cname, dict(e.ports), feats)
                out.append(e)
            new_edges[cname] = tuple(out)
        return H2MGContext(self.address_count, new_edges, dict(self.metadata))


@dataclass(frozen=True)
class Violation:
    class_name: str
    edge_id: str
    rule: str

    def __str__(self):
        return f"[{self.class_name}:{self.edge_id}] {self.rule}"


def _port_index(x: H2MGContext) -> dict[tuple[str, str], list[tuple[str, str]]]:
    """Map (class, port name) -> list of (edge id, address-as-str)."""
    idx: dict[tuple[str, str], list] = {}
    for cname in x.edges:
        for e in x.edges_of(cname):
            for pname, addr in e.ports.items():
                idx.setdefault((cname, pname), []).append((e.id, addr))
    return idx


def validate_context(x: H2MGContext) -> list[Violation]:
    """Check every structural invariant; an empty report means a valid context.

    Violations are reported, never raised, so callers can show all problems
    at once.
    """
    report: list[Violation] = []

    def bad(cname, eid, rule):
        report.append(Violation(cname, eid, rule))

    # Port closure and feature finiteness
    for e in x.all_edges():
        for pname, addr in e.ports.items():
            if not isinstance(addr, int) or addr < 0 or addr >= x.address_count:
                bad(e.class_name, e.id,
                    f"port {pname!r} references address {addr} outside "
                    f"0..{x.address_count - 1}")
        for fname, val in e.features.items():
            if val is not None and not np.isfinite(val):
                bad(e.class_name, e.id, f"feature {fname!r} is not finite")

    # Duplicate ids within a class
    for cname in x.edges:
        seen: set[str] = set()
        for e in x.edges_of(cname):
            if e.id in seen:
                bad(cname, e.id, "duplicate edge id")
            seen.add(e.id)

    # Bus addresses are distinct; bus-type ports land on bus addresses
    bus_addrs: dict[int, str] = {}
    for e in x.edges_of("bus"):
        addr = e.ports["bus"]
        if addr in bus_addrs:
            bad("bus", e.id, f"address {addr} already occupied by bus {bus_addrs[addr]!r}")
        bus_addrs[addr] = e.id
    for cname in x.edges:
        if cname == "bus":
            continue
        for e in x.edges_of(cname):
            for pname, addr in e.ports.items():
                if pname in BUS_PORTS and addr not in bus_addrs:
                    bad(cname, e.id,
                        f"port {pname!r} at address {addr} is not occupied by a bus")

    # Controller wiring (each controller must anchor to exactly one device)
    idx = _port_index(x)

    def anchors(cname, pname, addr):
        return [eid for eid, a in idx.get((cname, pname), []) if a == addr]

    for e in x.edges_of("line_controller"):
        if len(anchors("line", "line", e.ports["line"])) != 1:
            bad("line_controller", e.id, "line port does not match exactly one line")
    for e in x.edges_of("shunt_controller"):
        if len(anchors("shunt", "shunt", e.ports["shunt"])) != 1:
            bad("shunt_controller", e.id, "shunt port does not match exactly one shunt")
    for e in x.edges_of("svr_controller"):
        zone = e.ports["zone"]
        if len(anchors("svr_zone", "zone", zone)) != 1:
            bad("svr_controller", e.id, "zone port does not match exactly one svr_zone")
        if len(anchors("svr_unit", "zone", zone)) < 1:
            bad("svr_controller", e.id, "zone has no participating svr_unit")
    for e in x.edges_of("rtc_controller"):
        twt_addr = e.ports["twt"]
        rtcs = anchors("rtc", "twt", twt_addr)
        if len(rtcs) != 1:
            bad("rtc_controller", e.id, "twt port does not match exactly one rtc")
        elif len(anchors("twt", "twt", twt_addr)) != 1:
            bad("rtc_controller", e.id, "anchored rtc does not match exactly one twt")

    # Electrical feature sanity
    for e in x.edges_of("bus"):
        vmin, vmax = e.features["v_min"], e.features["v_max"]
        if vmin is not None and vmax is not None and not vmin < vmax:
            bad("bus", e.id, f"v_min {vmin} must be < v_max {vmax}")
    for cname in ("line", "twt"):
        for e in x.edges_of(cname):
            for fname in ("i1_max", "i2_max"):
                rating = e.features[fname]
                if rating is not None and rating <= 0:
                    bad(cname, e.id, f"{fname} must be > 0 where rated")

    return report


def neighborhood(x: H2MGContext, address: int) -> list[tuple[str, str, str]]:
    """All (class, edge id, port name) triples plugged into ``address``.

    Output order is canonical: class name, then edge id, then port name.
    """
    if not 0 <= address < x.address_count:
        raise H2MGError(
            f"address {address} outside 0..{x.address_count - 1}")
    out = []
    for cname in sorted(x.edges):
        for e in x.sorted_edges(cname):
            for pname in SCHEMA[cname].port_names:
                if e.ports[pname] == address:
                    out.append((cname, e.id, pname))
    return out


# ---------------------------------------------------------------------------
# Serialization: top-level keys address_count / classes / metadata; feature
# values are numbers or the string "absent".

def to_document(x: H2MGContext) -> dict:
    classes = {}
    for cname in sorted(x.edges):
        classes[cname] = [
            {
                "id": e.id,
                "ports": dict(e.ports),
                "features": {
                    f: (ABSENT if v is None else v) for f, v in e.features.items()
                },
            }
            for e in x.sorted_edges(cname)
        ]
    return {
        "address_count": x.address_count,
        "classes": classes,
        "metadata": dict(x.metadata),
    }


def from_document(doc: dict) -> H2MGContext:
    try:
        address_count = int(doc["address_count"])
        class_map = doc["classes"]
        metadata = dict(doc.get("metadata", {}))
    except (KeyError, TypeError) as exc:
        raise H2MGError(f"malformed grid document: {exc}") from exc

    edges: dict[str, tuple[HyperEdge, ...]] = {}
    for cname, records in class_map.items():
        if cname not in SCHEMA:
            raise H2MGError(f"unknown class {cname!r}")
        cs = SCHEMA[cname]
        elist = []
        for rec in records:
            feats: dict[str, float | None] = {}
            for fname, val in rec["features"].items():
                if fname not in cs.context_feature_names:
                    raise H2MGError(
                        f"unknown feature {fname!r} for class {cname!r}")
                feats[fname] = None if val == ABSENT else float(val)
            for fname in cs.context_feature_names:
                if fname not in feats:
                    raise H2MGError(
                        f"{cname} edge {rec.get('id')!r}: missing feature {fname!r}")
            if set(rec["ports"]) != set(cs.port_names):
                raise H2MGError(
                    f"{cname} edge {rec.get('id')!r}: ports must be exactly "
                    f"{cs.port_names}")
            ports = {p: int(rec["ports"][p]) for p in cs.port_names}
            elist.append(HyperEdge(str(rec["id"]), cname, ports, feats))
        edges[cname] = tuple(elist)
    return H2MGContext(address_count, edges, metadata)


def serialize(x: H2MGContext) -> bytes:
    return json.dumps(to_document(x), indent=1, sort_keys=True).encode()


def deserialize(blob: bytes) -> H2MGContext:
    try:
        doc = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise H2MGError(f"not a valid grid document: {exc}") from exc
    return from_document(doc)


# ---------------------------------------------------------------------------
# Decision containers

def _check_paired(kind: str, values: Mapping[str, Mapping], x: H2MGContext) -> None:
    expected = x.controller_ids()
    got = {c: sorted(v) for c, v in values.items() if v}
    want = {c: sorted(v) for c, v in expected.items()}
    if got != want:
        raise H2MGError(
            f"{kind} controller sets do not match the context "
            f"(got {got}, expected {want})")


@dataclass(frozen=True)
class Decision:
    """Concrete controller actions, keyed by class then controller id.

    Values: 0/1 for binary classes (1 requests the change), a float for
    svr_controller (setpoint delta, p.u.), a category index 0..3 for
    rtc_controller.
    """

    values: Mapping[str, Mapping[str, float | int]]

    @classmethod
    def paired(cls, x: H2MGContext, values: Mapping[str, Mapping[str, float | int]]
               ) -> "Decision":
        _check_paired("Decision", values, x)
        for cname, per_edge in values.items():
            kind = SCHEMA[cname].decision_kind
            for eid, v in per_edge.items():
                if kind == D_BINARY and v not in (0, 1):
                    raise H2MGError(f"{cname}:{eid}: binary decision must be 0 or 1")
                if kind == D_ONE_HOT and v not in range(RTC_CATEGORIES):
                    raise H2MGError(
                        f"{cname}:{eid}: category must be 0..{RTC_CATEGORIES - 1}")
                if kind == D_CONTINUOUS and not np.isfinite(v):
                    raise H2MGError(f"{cname}:{eid}: continuous decision must be finite")
        frozen = {c: dict(v) for c, v in values.items() if v}
        return cls(frozen)

    def get(self, class_name: str, edge_id: str):
        return self.values[class_name][edge_id]

    def replace(self, class_name: str, edge_id: str, value) -> "Decision":
        out = {c: dict(v) for c, v in self.values.items()}
        out[class_name][edge_id] = value
        return Decision(out)


@dataclass(frozen=True)
class SurrogateDecision:
    """Real-valued policy parameters, one vector per controller edge.

    Vectors have length 1 for binary and continuous classes and length 4
    for rtc_controller.
    """

    values: Mapping[str, Mapping[str, np.ndarray]]

    @classmethod
    def paired(cls, x: H2MGContext, values: Mapping[str, Mapping[str, np.ndarray]]
               ) -> "SurrogateDecision":
        _check_paired("SurrogateDecision", values, x)
        frozen: dict[str, dict[str, np.ndarray]] = {}
        for cname, per_edge in values.items():
            if not per_edge:
                continue
            dim = SCHEMA[cname].decision_dim
            frozen[cname] = {}
            for eid, vec in per_edge.items():
                arr = np.asarray(vec, dtype=float).reshape(-1)
                if arr.shape != (dim,):
                    raise H2MGError(
                        f"{cname}:{eid}: surrogate vector must have length {dim}")
                if not np.all(np.isfinite(arr)):
                    raise H2MGError(f"{cname}:{eid}: surrogate vector must be finite")
                frozen[cname][eid] = arr
        return cls(frozen)

    def get(self, class_name: str, edge_id: str) -> np.ndarray:
        return self.values[class_name][edge_id]
