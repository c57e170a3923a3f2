"""Synthetic operating-condition generator and input-feature normalizer.

Grids follow a two-tier layout: a meshed transmission network at the upper
nominal voltage, and lower-voltage buses fed radially through transformers,
a subset of which carry tap changers.  Every generated context embeds a
converged base-case power-flow state, so downstream solves warm-start from
an AC-consistent point.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .h2mg import ABSENT, H2MGContext, H2MGError, HyperEdge, SCHEMA, validate_context
from .powerflow import SolverOptions, solve_ac


@dataclass(frozen=True)
class GridFamilySpec:
    """Parameters of one family of synthetic grids."""

    bus_count_min: int = 28
    bus_count_max: int = 32
    voltage_levels: tuple[float, float] = (1.0, 0.5625)  # upper / lower tier, p.u.
    line_density: float = 1.4            # transmission lines per upper-tier bus
    controllable_line_count: int = 4     # always-present parallel circuits
    optional_line_count: int = 3         # parallel circuits present ~70% of the time
    shunt_count: int = 8
    generator_count: int = 9
    twt_count: int = 12                  # one lower-tier bus hangs from each
    rtc_count: int = 10
    line_controller_count: int = 4
    shunt_controller_count: int = 6
    svr_zone_count: int = 3
    svr_units_per_zone: int = 2
    svr_controller_count: int = 3
    rtc_controller_count: int = 8
    load_scale_range: tuple[float, float] = (0.6, 1.3)  # log-uniform global factor
    load_noise: float = 0.2              # per-load multiplicative spread
    lv_load_range: tuple[float, float] = (0.15, 0.45)   # p.u. per lower-tier bus
    hv_load_count: int = 3
    hv_load_range: tuple[float, float] = (0.3, 0.8)
    seed: int = 0

    def validate(self) -> None:
        if self.bus_count_min < self.twt_count + 4:
            raise ValueError("bus_count_min leaves fewer than 4 upper-tier buses")
        if self.bus_count_max < self.bus_count_min:
            raise ValueError("bus_count_max < bus_count_min")
        if self.line_controller_count > self.controllable_line_count:
            raise ValueError("more line controllers than controllable lines")
        if self.shunt_controller_count > self.shunt_count:
            raise ValueError("more shunt controllers than shunts")
        if self.rtc_controller_count > self.rtc_count:
            raise ValueError("more rtc controllers than rtcs")
        if self.rtc_count > self.twt_count:
            raise ValueError("more rtcs than twts")
        if self.svr_controller_count > self.svr_zone_count:
            raise ValueError("more svr controllers than zones")
        if self.svr_units_per_zone < 1:
            raise ValueError("each SVR zone needs at least one unit")
        if self.svr_zone_count * self.svr_units_per_zone + 1 > self.generator_count:
            raise ValueError("not enough generators for the SVR zones plus a slack")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "GridFamilySpec":
        kwargs = dict(doc)
        for key in ("voltage_levels", "load_scale_range", "lv_load_range",
                    "hv_load_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _absent_features(class_name: str) -> dict[str, None]:
    return {f: None for f in SCHEMA[class_name].context_feature_names}


def _edge(eid, cname, ports, **features) -> HyperEdge:
    feats = _absent_features(cname)
    feats.update(features)
    return HyperEdge(eid, cname, ports, feats)


class _Draft:
    """One structural draw, before the base-case solve fills features."""

    def __init__(self, spec: GridFamilySpec, rng: np.random.Generator):
        self.spec = spec
        hv_nom, lv_nom = spec.voltage_levels
        n_bus = int(rng.integers(spec.bus_count_min, spec.bus_count_max + 1))
        n_lv = spec.twt_count
        n_hv = n_bus - n_lv
        self.n_bus = n_bus
        self.v_nom = np.array([hv_nom] * n_hv + [lv_nom] * n_lv)
        self.hv = list(range(n_hv))
        self.lv = list(range(n_hv, n_bus))
        next_addr = n_bus
        self.edges: dict[str, list[HyperEdge]] = {c: [] for c in SCHEMA}

        def new_addr():
            nonlocal next_addr
            next_addr += 1
            return next_addr - 1

        for b in range(n_bus):
            vn = self.v_nom[b]
            self.edges["bus"].append(_edge(
                f"bus_{b:03d}", "bus", {"bus": b},
                v=vn, theta=0.0, v_nom=vn, v_max=1.05 * vn, v_min=0.95 * vn, opt=1.0))

        # Transmission mesh: spanning tree plus random extra circuits
        lines: list[tuple[int, int, bool]] = []  # (bus1, bus2, controllable)
        for b in range(1, n_hv):
            other = int(rng.integers(0, b))
            lines.append((other, b, False))
        n_extra = max(0, round(spec.line_density * n_hv) - (n_hv - 1))
        for _ in range(n_extra):
            b1, b2 = rng.choice(n_hv, size=2, replace=False)
            lines.append((int(min(b1, b2)), int(max(b1, b2)), False))
        # Controllable and optional circuits duplicate existing mesh lines,
        # so dropping one never islands the grid.
        base_count = len(lines)
        for k in range(spec.controllable_line_count):
            b1, b2, _ = lines[int(rng.integers(0, base_count))]
            lines.append((b1, b2, True))
        for _ in range(spec.optional_line_count):
            if rng.random() < 0.7:
                b1, b2, _ = lines[int(rng.integers(0, base_count))]
                lines.append((b1, b2, False))

        self.line_addr: list[int] = []
        self.controllable_lines: list[int] = []
        for k, (b1, b2, controllable) in enumerate(lines):
            addr = new_addr()
            self.line_addr.append(addr)
            if controllable:
                self.controllable_lines.append(k)
            r = float(rng.uniform(0.002, 0.01))
            xre = float(rng.uniform(0.02, 0.08))
            chg = float(rng.uniform(0.04, 0.22))  # charging susceptance
            self.edges["line"].append(_edge(
                f"line_{k:03d}", "line", {"line": addr, "bus1": b1, "bus2": b2},
                r=r, x=xre, g=0.0, b=chg, opt=1.0, status=1.0))

        # Transformers: one per lower-tier bus, impedance referred to that tier
        self.twt_addr: list[int] = []
        for k, b2 in enumerate(self.lv):
            b1 = int(rng.integers(0, n_hv))
            addr = new_addr()
            self.twt_addr.append(addr)
            z_scale = lv_nom ** 2
            r = float(rng.uniform(0.002, 0.006)) * z_scale
            xre = float(rng.uniform(0.08, 0.15)) * z_scale
            tau_nom = hv_nom / lv_nom
            self.edges["twt"].append(_edge(
                f"twt_{k:03d}", "twt", {"twt": addr, "bus1": b1, "bus2": b2},
                r=r, x=xre, g=0.0, b=0.0, ratio=tau_nom, phase_shift=0.0, opt=1.0))

        # Tap changers on the first rtc_count transformers, regulating their
        # lower-tier bus toward a continuous initial target.
        rtc_twts = sorted(rng.choice(spec.twt_count, size=spec.rtc_count,
                                     replace=False).tolist())
        self.rtc_twts = rtc_twts
        for k, t in enumerate(rtc_twts):
            reg_bus = self.lv[t]
            self.edges["rtc"].append(_edge(
                f"rtc_{k:03d}", "rtc",
                {"twt": self.twt_addr[t], "regulated_bus": reg_bus}))

        # Generators: slack first, then SVR units, then voltage regulators
        self.gen_addr: list[int] = []
        gen_buses = rng.choice(n_hv, size=spec.generator_count,
                               replace=spec.generator_count > n_hv)
        n_units = spec.svr_zone_count * spec.svr_units_per_zone
        for k in range(spec.generator_count):
            addr = new_addr()
            self.gen_addr.append(addr)
            slack = 1.0 if k == 0 else 0.0
            is_unit = 1 <= k <= n_units
            qr = float(rng.uniform(0.6, 1.5))
            self.edges["generator"].append(_edge(
                f"gen_{k:03d}", "generator",
                {"gen": addr, "bus": int(gen_buses[k])},
                p_target=0.0, q_target=0.0,
                v_target=float(rng.uniform(0.99, 1.05)),
                q_max=qr, q_min=-qr,
                regulation_mode=0.0 if is_unit else 1.0,
                slack=slack))

        # SVR zones: regulated upper-tier bus plus units drawn in order.
        # Regulated buses avoid generator buses so their voltage stays free.
        self.zone_addr: list[int] = []
        candidates = [b for b in range(n_hv) if b not in set(gen_buses.tolist())]
        if len(candidates) < spec.svr_zone_count:
            candidates = list(range(n_hv))
        zone_buses = rng.choice(candidates, size=spec.svr_zone_count, replace=False)
        unit_counter = 0
        for z in range(spec.svr_zone_count):
            addr = new_addr()
            self.zone_addr.append(addr)
            self.edges["svr_zone"].append(_edge(
                f"zone_{z}", "svr_zone",
                {"zone": addr, "regulated_bus": int(zone_buses[z])},
                v=1.0, theta=0.0, v_nom=hv_nom,
                v_target=float(rng.uniform(0.97, 1.07))))
            for _ in range(spec.svr_units_per_zone):
                unit_counter += 1
                self.edges["svr_unit"].append(_edge(
                    f"unit_{unit_counter:02d}", "svr_unit",
                    {"gen": self.gen_addr[unit_counter], "zone": addr},
                    participate=1.0))

        # Shunts: mostly at lower-tier buses, reactors and capacitors mixed
        self.shunt_addr: list[int] = []
        for k in range(spec.shunt_count):
            addr = new_addr()
            self.shunt_addr.append(addr)
            if k < max(1, spec.shunt_count - 2):
                bus = int(rng.choice(self.lv))
            else:
                bus = int(rng.integers(0, n_hv))
            vn = self.v_nom[bus]
            q_at_nom = float(rng.uniform(0.08, 0.30))
            sign = -1.0 if rng.random() < 0.5 else 1.0  # reactor vs capacitor
            self.edges["shunt"].append(_edge(
                f"shunt_{k:03d}", "shunt", {"shunt": addr, "bus": bus},
                g=0.0, b=sign * q_at_nom / vn ** 2,
                status=float(rng.random() < 0.5)))

        # Loads with a shared global level times per-load noise
        scale = math.exp(rng.uniform(math.log(spec.load_scale_range[0]),
                                     math.log(spec.load_scale_range[1])))
        self.load_scale = scale
        loads: list[tuple[int, float]] = []
        for b in self.lv:
            loads.append((b, float(rng.uniform(*spec.lv_load_range))))
        for b in rng.choice(n_hv, size=min(spec.hv_load_count, n_hv), replace=False):
            loads.append((int(b), float(rng.uniform(*spec.hv_load_range))))
        total_p = 0.0
        for k, (bus, p_base) in enumerate(loads):
            p = p_base * scale * (1.0 + spec.load_noise * float(rng.uniform(-1, 1)))
            q = p * float(rng.uniform(0.25, 0.40))
            total_p += p
            self.edges["load"].append(_edge(
                f"load_{k:03d}", "load", {"bus": bus},
                p=p, q=q, i=None, p_target=p, q_target=q))

        # Dispatch active power: non-slack generators cover most of the load,
        # the slack picks up the remainder plus losses.
        non_slack = self.edges["generator"][1:]
        shares = rng.uniform(0.5, 1.5, size=len(non_slack))
        shares = shares / shares.sum() * float(rng.uniform(0.85, 0.98))
        for g, share in zip(non_slack, shares):
            feats = dict(g.features)
            feats["p_target"] = share * total_p
            self.edges["generator"][self.edges["generator"].index(g)] = HyperEdge(
                g.id, "generator", dict(g.ports), feats)

        # Controllers
        lc_lines = rng.choice(self.controllable_lines,
                              size=spec.line_controller_count, replace=False)
        for k, li in enumerate(sorted(lc_lines.tolist())):
            self.edges["line_controller"].append(_edge(
                f"lc_{k}", "line_controller", {"line": self.line_addr[li]}))
        sc_shunts = rng.choice(spec.shunt_count,
                               size=spec.shunt_controller_count, replace=False)
        for k, si in enumerate(sorted(sc_shunts.tolist())):
            self.edges["shunt_controller"].append(_edge(
                f"sc_{k}", "shunt_controller", {"shunt": self.shunt_addr[si]}))
        vc_zones = rng.choice(spec.svr_zone_count,
                              size=spec.svr_controller_count, replace=False)
        for k, zi in enumerate(sorted(vc_zones.tolist())):
            self.edges["svr_controller"].append(_edge(
                f"vc_{k}", "svr_controller", {"zone": self.zone_addr[zi]}))
        rc_rtcs = rng.choice(spec.rtc_count,
                             size=spec.rtc_controller_count, replace=False)
        for k, ri in enumerate(sorted(rc_rtcs.tolist())):
            t = rtc_twts[ri]
            reg_bus = self.lv[t]
            vn = float(self.v_nom[reg_bus])
            self.edges["rtc_controller"].append(_edge(
                f"rc_{k}", "rtc_controller", {"twt": self.twt_addr[t]},
                v_target=vn * float(rng.uniform(0.97, 1.08)), v_nom=vn))

        self.address_count = next_addr

    def to_context(self, metadata: dict[str, str]) -> H2MGContext:
        edges = {c: tuple(v) for c, v in self.edges.items() if v}
        return H2MGContext(self.address_count, edges, metadata)


def _fill_from_solution(x: H2MGContext, sol) -> H2MGContext:
    """Write the base-case solved state back into the context features."""
    updates: dict[tuple[str, str], dict] = {}
    for e in x.edges_of("bus"):
        updates[("bus", e.id)] = {"v": sol.bus_v[e.id], "theta": sol.bus_theta[e.id]}
    bus_by_addr = {b.ports["bus"]: b for b in x.edges_of("bus")}
    for cname in ("line", "twt"):
        for e in x.edges_of(cname):
            key = (cname, e.id)
            if key in sol.branch_flows:
                f = sol.branch_flows[key]
                updates[key] = {"p1": f.p1, "q1": f.q1, "i1": f.i1,
                                "p2": f.p2, "q2": f.q2, "i2": f.i2}
                rating = max(f.i1, f.i2) * 1.6 + 0.1
                updates[key]["i1_max"] = rating
                updates[key]["i2_max"] = rating
    rtc_by_twt_addr = {}
    for r in x.edges_of("rtc"):
        rtc_by_twt_addr[r.ports["twt"]] = r.id
    for e in x.edges_of("twt"):
        rid = rtc_by_twt_addr.get(e.ports["twt"])
        if rid is not None and rid in sol.rtc_ratio:
            upd = updates.setdefault(("twt", e.id), {})
            upd["ratio"] = sol.rtc_ratio[rid]
    for e in x.edges_of("generator"):
        upd = {"q": sol.gen_q.get(e.id, 0.0)}
        upd["p"] = sol.gen_p.get(e.id, e.feature("p_target", 0.0))
        bus = bus_by_addr[e.ports["bus"]]
        vm = sol.bus_v[bus.id]
        upd["i"] = math.hypot(upd["p"], upd["q"]) / vm
        updates[("generator", e.id)] = upd
    for e in x.edges_of("load"):
        bus = bus_by_addr[e.ports["bus"]]
        vm = sol.bus_v[bus.id]
        p, q = e.feature("p_target", 0.0), e.feature("q_target", 0.0)
        updates[("load", e.id)] = {"p": p, "q": q, "i": math.hypot(p, q) / vm}
    for e in x.edges_of("shunt"):
        bus = bus_by_addr[e.ports["bus"]]
        vm = sol.bus_v[bus.id]
        status = e.feature("status", 0.0)
        g, b = e.feature("g", 0.0), e.feature("b", 0.0)
        p = status * g * vm ** 2
        q = -status * b * vm ** 2
        updates[("shunt", e.id)] = {"p": p, "q": q, "i": math.hypot(p, q) / vm}
    for e in x.edges_of("svr_zone"):
        bus = bus_by_addr[e.ports["regulated_bus"]]
        updates[("svr_zone", e.id)] = {"v": sol.bus_v[bus.id],
                                       "theta": sol.bus_theta[bus.id]}
    return x.replace_features(updates)


def generate_context(spec: GridFamilySpec, rng: np.random.Generator,
                     origin: str = "synthetic",
                     timestamp: str = "2024-01-01T00:00:00Z",
                     solver: SolverOptions = SolverOptions(),
                     max_attempts: int = 50) -> H2MGContext:
    """Draw one validated context whose base case converges.

    Draws that fail validation or diverge at base case are rejected and
    redrawn from the same stream, so the result is a pure function of
    (spec, stream state).
    """
    spec.validate()
    for _ in range(max_attempts):
        draft = _Draft(spec, rng)
        x = draft.to_context({"origin": origin, "timestamp": timestamp})
        if validate_context(x):
            continue
        sol = solve_ac(x, solver)
        if not sol.converged:
            continue
        return _fill_from_solution(x, sol)
    raise H2MGError(
        f"no solvable context after {max_attempts} attempts; spec too aggressive")


def base_case_success_rate(spec: GridFamilySpec, rng: np.random.Generator,
                           draws: int = 100) -> float:
    """Fraction of raw draws whose base case converges (generator tuning aid)."""
    ok = 0
    for _ in range(draws):
        draft = _Draft(spec, rng)
        x = draft.to_context({"origin": "probe", "timestamp": ""})
        if not validate_context(x) and solve_ac(x).converged:
            ok += 1
    return ok / draws


# ---------------------------------------------------------------------------
# Dataset files

def write_dataset(out_dir: str | Path, contexts: list[H2MGContext],
                  spec: GridFamilySpec, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for x in contexts:
        cid = x.metadata["origin"]
        ids.append(cid)
        (out / f"{cid}.json").write_bytes(
            json.dumps(_to_doc(x), indent=1, sort_keys=True).encode())
    manifest = {"seed": seed, "count": len(ids), "ids": ids,
                "spec": spec.to_json()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _to_doc(x: H2MGContext) -> dict:
    from .h2mg import to_document
    return to_document(x)


def load_dataset(data_dir: str | Path) -> list[H2MGContext]:
    from .h2mg import deserialize
    data = Path(data_dir)
    manifest = json.loads((data / "manifest.json").read_text())
    return [deserialize((data / f"{cid}.json").read_bytes())
            for cid in manifest["ids"]]


def load_manifest(data_dir: str | Path) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# Piecewise-linear empirical-CDF normalizer

@dataclass
class Normalizer:
    """Per (class, feature) monotone map onto [0, 1].

    Each table entry is a pair of arrays (values, levels): strictly
    increasing breakpoint values and their nondecreasing cumulative levels.
    Queries interpolate linearly and clamp to the end levels outside the
    breakpoint range; a constant feature maps to 0.5 everywhere; features
    that were absent throughout fitting pass through unchanged.  An absent
    value always normalizes to 0.
    """

    knots: int
    tables: dict[tuple[str, str], tuple[np.ndarray, np.ndarray] | str] = field(
        default_factory=dict)

    CONSTANT = "constant"
    IDENTITY = "identity"

    def apply(self, class_name: str, feature: str, value: float | None) -> float:
        if value is None:
            return 0.0
        entry = self.tables.get((class_name, feature), self.IDENTITY)
        if entry == self.IDENTITY:
            return float(value)
        if entry == self.CONSTANT:
            return 0.5
        values, levels = entry
        return float(np.interp(value, values, levels))

    def to_json(self) -> dict:
        tables: dict[str, dict] = {}
        for (cname, fname), entry in sorted(self.tables.items()):
            slot = tables.setdefault(cname, {})
            if isinstance(entry, str):
                slot[fname] = {"kind": entry}
            else:
                slot[fname] = {"kind": "pwl",
                               "values": entry[0].tolist(),
                               "levels": entry[1].tolist()}
        return {"knots": self.knots, "tables": tables}

    @classmethod
    def from_json(cls, doc: dict) -> "Normalizer":
        tables: dict[tuple[str, str], tuple[np.ndarray, np.ndarray] | str] = {}
        for cname, feats in doc["tables"].items():
            for fname, entry in feats.items():
                if entry["kind"] == "pwl":
                    tables[(cname, fname)] = (np.asarray(entry["values"], dtype=float),
                                              np.asarray(entry["levels"], dtype=float))
                else:
                    tables[(cname, fname)] = entry["kind"]
        return cls(int(doc["knots"]), tables)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Normalizer":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def fit_normalizer(dataset: list[H2MGContext], knots: int = 101) -> Normalizer:
    """Fit the empirical-CDF breakpoints on a training dataset.

    Breakpoints sit at the empirical quantiles of levels k/(knots-1); tied
    quantile values collapse to a single breakpoint at their mean level.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if knots < 2:
        raise ValueError("knots must be at least 2")
    samples: dict[tuple[str, str], list[float]] = {}
    present: set[tuple[str, str]] = set()
    for x in dataset:
        for cname in x.edges:
            for fname in SCHEMA[cname].context_feature_names:
                present.add((cname, fname))
            for e in x.edges_of(cname):
                for fname, val in e.features.items():
                    if val is not None:
                        samples.setdefault((cname, fname), []).append(float(val))

    norm = Normalizer(knots=knots)
    levels = np.arange(knots) / (knots - 1)
    for key in sorted(present):
        vals = samples.get(key)
        if not vals:
            warnings.warn(f"feature {key[0]}.{key[1]} absent in all contexts; "
                          "emitting an identity map", stacklevel=2)
            norm.tables[key] = Normalizer.IDENTITY
            continue
        arr = np.asarray(vals, dtype=float)
        if arr.min() == arr.max():
            norm.tables[key] = Normalizer.CONSTANT
            continue
        qs = np.quantile(arr, levels)
        values, starts = np.unique(qs, return_index=True)
        # mean level of each run of tied quantiles
        bounds = np.append(starts, len(qs))
        lvl = np.array([levels[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
        norm.tables[key] = (values, lvl)
    return norm


def normalize(x: H2MGContext, norm: Normalizer) -> H2MGContext:
    """Replace every feature by its normalized value (absent becomes 0)."""
    updates: dict[tuple[str, str], dict] = {}
    for cname in x.edges:
        for e in x.edges_of(cname):
            updates[(cname, e.id)] = {
                f: norm.apply(cname, f, v) for f, v in e.features.items()}
    return x.replace_features(updates)
