"""AC power-flow oracle: decision application, Newton solve, objective.

The solver is a dense polar Newton-Raphson with three outer control loops
(discrete transformer tap stepping, secondary-voltage-regulation reactive
dispatch, generator Q-limit switching).  Non-convergence is always a value,
never an exception, and maps to a fixed prohibitive objective cost.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .h2mg import (
    CONTROLLER_CLASSES,
    Decision,
    H2MGContext,
    H2MGError,
    INERT_CLASSES,
)

#: Allowed regulated-bus setpoints for tap-changer controllers, as a
#: fraction of nominal voltage.
RTC_SETPOINT_LADDER = (1.00, 1.02, 1.05, 1.07)

#: Discrete physical tap ladder: 21 multipliers of the nominal ratio.
TAP_MULTIPLIERS = np.round(np.linspace(0.9, 1.1, 21), 10)
TAP_STEP = 0.01

_warned_inert = False


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8          # max power-mismatch residual, p.u.
    max_inner: int = 30              # Newton iterations per solve
    max_outer: int = 100             # control-adjustment rounds
    rtc_deadband: float = 0.005      # fraction of regulated-bus nominal (half a tap step)
    svr_deadband: float = 1e-5       # regulated-bus voltage tolerance, p.u.
    lambda_v: float = 1.0
    lambda_i: float = 1.0
    lambda_j: float = 0.1
    eps_v: float = 0.05
    eps_i: float = 0.05
    prohibitive_cost: float = 100.0
    target_clamp: tuple[float, float] = (0.0, 3.0)  # plausible-voltage clamp on targets

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_inner <= 0 or self.max_outer <= 0:
            raise ValueError("tolerances and iteration caps must be positive")


@dataclass(frozen=True)
class BranchFlow:
    p1: float
    q1: float
    i1: float
    p2: float
    q2: float
    i2: float


@dataclass(frozen=True)
class PowerFlowSolution:
    converged: bool
    bus_v: dict[str, float]
    bus_theta: dict[str, float]
    branch_flows: dict[tuple[str, str], BranchFlow]
    gen_q: dict[str, float]
    gen_p: dict[str, float]
    rtc_ratio: dict[str, float]
    inner_iterations: int
    outer_iterations: int


@dataclass(frozen=True)
class ObjectiveBreakdown:
    f_v: float
    f_i: float
    f_j: float
    total: float
    converged: bool


@dataclass(frozen=True)
class MetricsRecord:
    valid: bool
    over_voltages: int
    under_voltages: int
    violations: int
    overflows: int
    joule_losses: float
    normalized_voltages: np.ndarray  # one entry per optimized bus
    normalized_currents: np.ndarray  # one entry per optimized rated branch


# ---------------------------------------------------------------------------
# Decision application

def _anchor(x: H2MGContext, device_class: str, port: str, address: int,
            controller_id: str):
    matches = [e for e in x.edges_of(device_class) if e.ports[port] == address]
    if len(matches) != 1:
        raise H2MGError(
            f"controller {controller_id!r} does not anchor to exactly one "
            f"{device_class} (found {len(matches)})")
    return matches[0]


def apply_decision(x: H2MGContext, y: Decision) -> H2MGContext:
    """Return a copy of ``x`` with the controller actions of ``y`` applied.

    Binary actions request a change (1 = act, 0 = leave as is): line
    controllers disconnect their line, shunt controllers toggle their
    shunt.  SVR controllers shift the zone target; RTC controllers pick a
    regulated-bus setpoint from the discrete ladder.
    """
    expected = x.controller_ids()
    got = {c: sorted(v) for c, v in y.values.items() if v}
    if got != {c: sorted(v) for c, v in expected.items()}:
        raise H2MGError("decision is not paired with this context")

    updates: dict[tuple[str, str], dict] = {}
    for e in x.edges_of("line_controller"):
        if y.get("line_controller", e.id) == 1:
            line = _anchor(x, "line", "line", e.ports["line"], e.id)
            updates[("line", line.id)] = {"status": 0.0}
    for e in x.edges_of("shunt_controller"):
        if y.get("shunt_controller", e.id) == 1:
            shunt = _anchor(x, "shunt", "shunt", e.ports["shunt"], e.id)
            status = shunt.features["status"]
            if status is None:
                raise H2MGError(f"shunt {shunt.id!r} has no status to switch")
            updates[("shunt", shunt.id)] = {"status": 1.0 - status}
    for e in x.edges_of("svr_controller"):
        zone = _anchor(x, "svr_zone", "zone", e.ports["zone"], e.id)
        delta = float(y.get("svr_controller", e.id))
        target = zone.features["v_target"]
        if target is None:
            raise H2MGError(f"svr_zone {zone.id!r} has no v_target")
        updates[("svr_zone", zone.id)] = {"v_target": target + delta}
    for e in x.edges_of("rtc_controller"):
        # anchoring check only; the new target lives on the controller itself
        _anchor(x, "rtc", "twt", e.ports["twt"], e.id)
        category = int(y.get("rtc_controller", e.id))
        v_nom = e.features["v_nom"]
        if v_nom is None:
            raise H2MGError(f"rtc_controller {e.id!r} has no v_nom")
        updates[("rtc_controller", e.id)] = {
            "v_target": RTC_SETPOINT_LADDER[category] * v_nom}
    return x.replace_features(updates)


# ---------------------------------------------------------------------------
# Internal array model

class _GridModel:
    """Numpy view of one context, ready for the Newton loop."""

    def __init__(self, x: H2MGContext, opts: SolverOptions):
        global _warned_inert
        if not _warned_inert and any(x.edges_of(c) for c in INERT_CLASSES):
            warnings.warn(
                "battery/svc/vsc_station/hvdc_line edges are ignored by the solver",
                RuntimeWarning, stacklevel=2)
            _warned_inert = True

        lo, hi = opts.target_clamp
        buses = x.sorted_edges("bus")
        if not buses:
            raise H2MGError("context has no buses")
        self.bus_ids = [e.id for e in buses]
        self.addr_to_bus = {e.ports["bus"]: i for i, e in enumerate(buses)}
        n = len(buses)
        self.n = n
        self.v_nom = np.array([e.feature("v_nom", 1.0) for e in buses])
        self.v_min = np.array([np.nan if e.features["v_min"] is None
                               else e.features["v_min"] for e in buses])
        self.v_max = np.array([np.nan if e.features["v_max"] is None
                               else e.features["v_max"] for e in buses])
        self.opt = np.array([e.feature("opt", 0.0) for e in buses])
        self.vm0 = np.array([e.features["v"] if e.features["v"] is not None
                             else self.v_nom[i] for i, e in enumerate(buses)])
        self.va0 = np.array([e.feature("theta", 0.0) for e in buses])

        # Fixed injections
        self.p_spec = np.zeros(n)
        self.q_fixed = np.zeros(n)
        for e in x.edges_of("load"):
            b = self._bus(e.ports["bus"], e)
            self.p_spec[b] -= e.feature("p_target", 0.0)
            self.q_fixed[b] -= e.feature("q_target", 0.0)

        # Generators
        gens = x.sorted_edges("generator")
        self.gen_ids = [e.id for e in gens]
        self.gen_bus = np.array([self._bus(e.ports["bus"], e) for e in gens],
                                dtype=int)
        self.gen_p = np.array([e.feature("p_target", 0.0) for e in gens])
        self.gen_qset = np.array([e.feature("q_target", 0.0) for e in gens])
        self.gen_vset = np.clip(
            np.array([e.feature("v_target", 1.0) for e in gens]), lo, hi)
        self.gen_qmin = np.array([-np.inf if e.features["q_min"] is None
                                  else e.features["q_min"] for e in gens])
        self.gen_qmax = np.array([np.inf if e.features["q_max"] is None
                                  else e.features["q_max"] for e in gens])
        self.gen_regulating = np.array(
            [e.feature("regulation_mode", 0.0) > 0.5 for e in gens])
        slack_flags = [e.feature("slack", 0.0) > 0.5 for e in gens]
        if not any(slack_flags):
            raise H2MGError("no slack generator designated")
        self.slack_gen = slack_flags.index(True)
        self.slack_bus = int(self.gen_bus[self.slack_gen])
        non_slack = np.arange(len(gens)) != self.slack_gen
        np.add.at(self.p_spec, self.gen_bus[non_slack], self.gen_p[non_slack])

        addr_of_gen_port = {e.ports["gen"]: i for i, e in enumerate(gens)}

        # SVR zones with their participating units
        self.zones = []
        controllers_by_zone_addr = {}
        for e in x.edges_of("svr_controller"):
            controllers_by_zone_addr[e.ports["zone"]] = e.id
        for z in x.sorted_edges("svr_zone"):
            unit_gens = []
            for u in x.sorted_edges("svr_unit"):
                if u.ports["zone"] == z.ports["zone"] and u.feature("participate", 0.0) > 0.5:
                    gi = addr_of_gen_port.get(u.ports["gen"])
                    if gi is None:
                        raise H2MGError(f"svr_unit {u.id!r} references no generator")
                    unit_gens.append(gi)
            target = z.features["v_target"]
            self.zones.append({
                "id": z.id,
                "bus": self._bus(z.ports["regulated_bus"], z),
                "target": np.clip(target, lo, hi) if target is not None else None,
                "units": np.array(sorted(unit_gens), dtype=int),
            })
        self.svr_gen = np.zeros(len(gens), dtype=bool)
        for z in self.zones:
            self.svr_gen[z["units"]] = True
        if self.svr_gen[self.slack_gen]:
            raise H2MGError("slack generator cannot participate in an SVR zone")
        # Dispatched reactive output per SVR unit, warm-started from the
        # context's solved q when available.
        self.svr_q = np.array([
            gens[i].feature("q", gens[i].feature("q_target", 0.0)) if self.svr_gen[i]
            else 0.0
            for i in range(len(gens))])
        self.svr_q = np.clip(self.svr_q, self.gen_qmin, self.gen_qmax)

        # Branches: lines with status 1, then all twts
        fb, tb, ys, ysh, ratio, shift = [], [], [], [], [], []
        self.branch_keys: list[tuple[str, str]] = []
        self.branch_opt, self.branch_i1max, self.branch_i2max = [], [], []
        twt_index_by_addr = {}
        for e in x.sorted_edges("line"):
            if e.feature("status", 1.0) < 0.5:
                continue
            self._append_branch(e, fb, tb, ys, ysh, ratio, shift, 1.0, 0.0)
        for e in x.sorted_edges("twt"):
            twt_index_by_addr[e.ports["twt"]] = len(self.branch_keys)
            rho = e.feature("ratio", 1.0)
            alpha = e.feature("phase_shift", 0.0)
            self._append_branch(e, fb, tb, ys, ysh, ratio, shift, rho, alpha)
        self.fb = np.array(fb, dtype=int)
        self.tb = np.array(tb, dtype=int)
        self.ys = np.array(ys, dtype=complex)
        self.ysh = np.array(ysh, dtype=complex)
        self.ratio = np.array(ratio, dtype=float)
        self.shift = np.array(shift, dtype=float)
        self.branch_opt = np.array(self.branch_opt)
        self.branch_i1max = np.array(self.branch_i1max)
        self.branch_i2max = np.array(self.branch_i2max)

        # Bus shunt admittance from in-service shunt edges
        self.y_shunt_bus = np.zeros(n, dtype=complex)
        for e in x.sorted_edges("shunt"):
            if e.feature("status", 1.0) < 0.5:
                continue
            b = self._bus(e.ports["bus"], e)
            self.y_shunt_bus[b] += complex(e.feature("g", 0.0), e.feature("b", 0.0))

        # Tap changers: regulation targets come from rtc controllers
        target_by_twt_addr = {}
        for e in x.sorted_edges("rtc_controller"):
            t = e.features["v_target"]
            if t is not None:
                target_by_twt_addr[e.ports["twt"]] = np.clip(t, lo, hi)
        self.rtcs = []
        for e in x.sorted_edges("rtc"):
            bi = twt_index_by_addr.get(e.ports["twt"])
            if bi is None:
                raise H2MGError(f"rtc {e.id!r} references no twt")
            reg_bus = self._bus(e.ports["regulated_bus"], e)
            tau_nom = self.v_nom[self.fb[bi]] / self.v_nom[self.tb[bi]]
            mult = self.ratio[bi] / tau_nom
            tap = int(np.clip(round((mult - 0.9) / TAP_STEP), 0, 20))
            self.ratio[bi] = tau_nom * TAP_MULTIPLIERS[tap]
            self.rtcs.append({
                "id": e.id,
                "branch": bi,
                "bus": reg_bus,
                "tau_nom": tau_nom,
                "tap": tap,
                "target": target_by_twt_addr.get(e.ports["twt"]),
                "last_dir": 0,   # anti-hunting memory
                "locked": False,
            })

    def _bus(self, addr: int, edge) -> int:
        try:
            return self.addr_to_bus[addr]
        except KeyError:
            raise H2MGError(
                f"{edge.class_name} {edge.id!r}: address {addr} is not a bus") from None

    def _append_branch(self, e, fb, tb, ys, ysh, ratio, shift, rho, alpha):
        r = e.feature("r", 0.0)
        xre = e.feature("x", 0.0)
        if r == 0.0 and xre == 0.0:
            raise H2MGError(f"{e.class_name} {e.id!r} has zero impedance")
        fb.append(self._bus(e.ports["bus1"], e))
        tb.append(self._bus(e.ports["bus2"], e))
        ys.append(1.0 / complex(r, xre))
        ysh.append(complex(e.feature("g", 0.0), e.feature("b", 0.0)))
        ratio.append(rho)
        shift.append(alpha)
        self.branch_keys.append((e.class_name, e.id))
        self.branch_opt.append(e.feature("opt", 0.0))
        self.branch_i1max.append(np.nan if e.features["i1_max"] is None
                                 else e.features["i1_max"])
        self.branch_i2max.append(np.nan if e.features["i2_max"] is None
                                 else e.features["i2_max"])

    # -- admittance assembly -------------------------------------------------

    def branch_admittances(self):
        tau = self.ratio * np.exp(1j * self.shift)
        yff = (self.ys + self.ysh / 2.0) / (self.ratio ** 2)
        ytt = self.ys + self.ysh / 2.0
        yft = -self.ys / np.conj(tau)
        ytf = -self.ys / tau
        return yff, yft, ytf, ytt

    def ybus(self) -> np.ndarray:
        n = self.n
        y = np.zeros((n, n), dtype=complex)
        yff, yft, ytf, ytt = self.branch_admittances()
        np.add.at(y, (self.fb, self.fb), yff)
        np.add.at(y, (self.fb, self.tb), yft)
        np.add.at(y, (self.tb, self.fb), ytf)
        np.add.at(y, (self.tb, self.tb), ytt)
        y[np.arange(n), np.arange(n)] += self.y_shunt_bus
        return y


class _State:
    """Mutable solver state across outer iterations."""

    def __init__(self, m: _GridModel):
        self.vm = m.vm0.copy()
        self.va = m.va0.copy()
        # Bus regulation: slack fixed; PV where a regulating non-SVR gen sits
        self.is_pv = np.zeros(m.n, dtype=bool)
        self.vset = np.full(m.n, np.nan)
        for gi in np.flatnonzero(m.gen_regulating & ~m.svr_gen):
            b = m.gen_bus[gi]
            if b == m.slack_bus:
                continue
            if not self.is_pv[b]:
                self.is_pv[b] = True
                self.vset[b] = m.gen_vset[gi]
        self.vset[m.slack_bus] = m.gen_vset[m.slack_gen]
        self.pinned = np.zeros(m.n, dtype=int)  # 0 free, +1 at q_max, -1 at q_min
        self.pinned_q = np.zeros(m.n)
        self.switch_budget = np.full(m.n, 6)  # pin/unpin flips allowed per solve
        self.svr_q = m.svr_q.copy()
        self.jac = None
        self.jac_index = None


def _q_spec(m: _GridModel, st: _State) -> np.ndarray:
    q = m.q_fixed.copy()
    nonreg = ~m.gen_regulating & ~m.svr_gen
    np.add.at(q, m.gen_bus[nonreg], m.gen_qset[nonreg])
    np.add.at(q, m.gen_bus[m.svr_gen], st.svr_q[m.svr_gen])
    return q


def _newton(m: _GridModel, st: _State, opts: SolverOptions):
    """Inner Newton loop; returns (ok, iterations). Mutates st.vm/st.va."""
    ybus = m.ybus()
    slack = m.slack_bus
    pv = np.flatnonzero(st.is_pv & (st.pinned == 0))
    pq = np.array(sorted(set(range(m.n)) - set(pv.tolist()) - {slack}), dtype=int)
    pvpq = np.concatenate([pv, pq]).astype(int)

    st.vm[slack] = st.vset[slack]
    st.va[slack] = 0.0
    st.vm[pv] = st.vset[pv]

    # Pinned buses behave as PQ with the regulating output frozen at a limit.
    q_spec = _q_spec(m, st)
    q_spec[st.pinned != 0] += st.pinned_q[st.pinned != 0]

    npv, npq = len(pv), len(pq)
    for it in range(opts.max_inner + 1):
        v = st.vm * np.exp(1j * st.va)
        ibus = ybus @ v
        s = v * np.conj(ibus)
        dp = m.p_spec[pvpq] - s.real[pvpq]
        dq = q_spec[pq] - s.imag[pq]
        mis = np.concatenate([dp, dq])
        if mis.size == 0:
            st.jac, st.jac_index = None, (pv, pq, pvpq)
            return True, it
        norm = np.max(np.abs(mis))
        if not np.isfinite(norm):
            return False, it
        if norm <= opts.tolerance:
            st.jac_index = (pv, pq, pvpq)
            st.jac = _jacobian(ybus, v, ibus, pvpq, pq)
            return True, it
        if it == opts.max_inner:
            return False, it
        jac = _jacobian(ybus, v, ibus, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError:
            return False, it
        st.va[pvpq] += dx[:npv + npq]
        st.vm[pq] += dx[npv + npq:]
        if np.any(st.vm <= 0) or not np.all(np.isfinite(st.vm)):
            return False, it
    return False, opts.max_inner


def _jacobian(ybus, v, ibus, pvpq, pq):
    vnorm = v / np.abs(v)
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_vn = np.diag(vnorm)
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    ds_dvm = diag_vn @ np.conj(diag_i) + diag_v @ np.conj(ybus @ diag_vn)
    j11 = ds_dva.real[np.ix_(pvpq, pvpq)]
    j12 = ds_dvm.real[np.ix_(pvpq, pq)]
    j21 = ds_dva.imag[np.ix_(pq, pvpq)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def _newton_restarting(m: _GridModel, st: _State, opts: SolverOptions):
    """Newton with one flat-start retry, so a poor warm start is not fatal."""
    ok, it = _newton(m, st, opts)
    if ok:
        return ok, it
    st.vm = m.v_nom.copy()
    st.va = np.zeros(m.n)
    ok2, it2 = _newton(m, st, opts)
    return ok2, it + it2


def _rtc_step(m: _GridModel, st: _State, opts: SolverOptions) -> bool:
    """Move each regulating tap one position toward its target.

    A tap asked to reverse direction within one solve is hunting between
    two adjacent positions; it locks where it stands for the rest of the
    solve.
    """
    changed = False
    for r in m.rtcs:
        if r["target"] is None or r["locked"]:
            continue
        bus = r["bus"]
        err = r["target"] - st.vm[bus]
        if abs(err) <= opts.rtc_deadband * m.v_nom[bus]:
            continue
        bi = r["branch"]
        # Raising the non-tap-side voltage takes a lower ratio; flip when the
        # regulated bus sits on the tap side.
        raise_dir = +1 if bus == m.fb[bi] else -1
        step = raise_dir if err > 0 else -raise_dir
        if r["last_dir"] != 0 and step != r["last_dir"]:
            r["locked"] = True
            continue
        new_tap = int(np.clip(r["tap"] + step, 0, 20))
        if new_tap != r["tap"]:
            r["tap"] = new_tap
            r["last_dir"] = step
            m.ratio[bi] = r["tau_nom"] * TAP_MULTIPLIERS[new_tap]
            changed = True
    return changed


def _svr_sensitivity(m: _GridModel, st: _State, zone) -> np.ndarray | None:
    """dV(regulated bus)/dQ(injection at each unit bus) from the last Jacobian."""
    if st.jac is None or st.jac_index is None:
        return None
    pv, pq, pvpq = st.jac_index
    bus = zone["bus"]
    pq_pos = {b: k for k, b in enumerate(pq)}
    if bus not in pq_pos:
        return None
    row = len(pvpq) + pq_pos[bus]
    e = np.zeros(st.jac.shape[0])
    e[row] = 1.0
    try:
        w = np.linalg.solve(st.jac.T, e)
    except np.linalg.LinAlgError:
        return None
    sens = np.zeros(len(zone["units"]))
    for k, gi in enumerate(zone["units"]):
        b = m.gen_bus[gi]
        if b in pq_pos:
            sens[k] = w[len(pvpq) + pq_pos[b]]
    return sens


def _svr_dispatch(m: _GridModel, st: _State, opts: SolverOptions) -> bool:
    changed = False
    for zone in m.zones:
        if zone["target"] is None or len(zone["units"]) == 0:
            continue
        err = zone["target"] - st.vm[zone["bus"]]
        if abs(err) <= opts.svr_deadband:
            continue
        units = zone["units"]
        sens = _svr_sensitivity(m, st, zone)
        if sens is None:
            continue
        ranges = np.maximum(m.gen_qmax[units] - m.gen_qmin[units], 0.0)
        ranges = np.where(np.isfinite(ranges), ranges, 1.0)
        if ranges.sum() <= 0:
            continue
        shares = ranges / ranges.sum()
        denom = float(sens @ shares)
        if denom <= 1e-12:
            continue
        # Rate-limit each round so a weak sensitivity estimate cannot command
        # a reactive step large enough to break the next Newton solve.
        remaining = float(np.clip(err / denom, -0.5, 0.5))
        # Proportional split with limit waterfall: saturated units freeze and
        # the remainder redistributes among the others.
        for _ in range(4):
            if abs(remaining) < 1e-14:
                break
            q_now = st.svr_q[units]
            head = np.where(remaining > 0,
                            m.gen_qmax[units] - q_now,
                            q_now - m.gen_qmin[units])
            active = head > 1e-12
            if not np.any(active):
                break
            w = np.where(active, ranges, 0.0)
            w = w / w.sum()
            dq = w * remaining
            new_q = np.clip(q_now + dq, m.gen_qmin[units], m.gen_qmax[units])
            applied = new_q - q_now
            st.svr_q[units] = new_q
            if np.max(np.abs(applied)) > 1e-12:
                changed = True
            remaining -= applied.sum()
    return changed


def _q_limit_switch(m: _GridModel, st: _State, opts: SolverOptions) -> bool:
    """Pin PV buses whose regulating generators exceed reactive limits."""
    v = st.vm * np.exp(1j * st.va)
    s = v * np.conj(m.ybus() @ v)
    changed = False
    for b in range(m.n):
        if b == m.slack_bus or not st.is_pv[b] or st.switch_budget[b] <= 0:
            continue
        reg = m.gen_regulating & ~m.svr_gen & (m.gen_bus == b)
        if not np.any(reg):
            continue
        qmin = m.gen_qmin[reg].sum()
        qmax = m.gen_qmax[reg].sum()
        if st.pinned[b] == 0:
            q_other = m.q_fixed[b]
            nonreg = (~m.gen_regulating & ~m.svr_gen) & (m.gen_bus == b)
            q_other += m.gen_qset[nonreg].sum()
            q_other += st.svr_q[m.svr_gen & (m.gen_bus == b)].sum()
            q_reg = s.imag[b] - q_other
            if q_reg > qmax + 1e-9:
                st.pinned[b], st.pinned_q[b] = +1, qmax
                st.switch_budget[b] -= 1
                changed = True
            elif q_reg < qmin - 1e-9:
                st.pinned[b], st.pinned_q[b] = -1, qmin
                st.switch_budget[b] -= 1
                changed = True
        else:
            # Restore regulation once the pin stops binding
            if st.pinned[b] == +1 and st.vm[b] > st.vset[b] + 1e-7:
                st.pinned[b] = 0
                st.switch_budget[b] -= 1
                changed = True
            elif st.pinned[b] == -1 and st.vm[b] < st.vset[b] - 1e-7:
                st.pinned[b] = 0
                st.switch_budget[b] -= 1
                changed = True
    return changed


class _RawSolution:
    def __init__(self, m: _GridModel, st: _State, converged, inner, outer):
        self.model = m
        self.converged = converged
        self.inner = inner
        self.outer = outer
        self.vm = st.vm
        self.va = st.va
        self.state = st
        if converged and len(m.fb):
            v = st.vm * np.exp(1j * st.va)
            yff, yft, ytf, ytt = m.branch_admittances()
            vf, vt = v[m.fb], v[m.tb]
            i1 = yff * vf + yft * vt
            i2 = ytf * vf + ytt * vt
            s1 = vf * np.conj(i1)
            s2 = vt * np.conj(i2)
            self.p1, self.q1, self.i1 = s1.real, s1.imag, np.abs(i1)
            self.p2, self.q2, self.i2 = s2.real, s2.imag, np.abs(i2)
        else:
            z = np.zeros(len(m.fb))
            self.p1 = self.q1 = self.i1 = self.p2 = self.q2 = self.i2 = z

    def gen_reactive(self) -> np.ndarray:
        """Per-generator reactive output implied by the solved state."""
        m, st = self.model, self.state
        v = st.vm * np.exp(1j * st.va)
        s = v * np.conj(m.ybus() @ v)
        q = np.zeros(len(m.gen_ids))
        nonreg = ~m.gen_regulating & ~m.svr_gen
        q[nonreg] = m.gen_qset[nonreg]
        q[m.svr_gen] = st.svr_q[m.svr_gen]
        for b in sorted(set(m.gen_bus.tolist())):
            if b == m.slack_bus:
                idx = np.flatnonzero(m.gen_bus == b)
                others = idx[idx != m.slack_gen]
                q[m.slack_gen] = s.imag[b] - m.q_fixed[b] - q[others].sum()
                continue
            idx = np.flatnonzero(m.gen_regulating & ~m.svr_gen & (m.gen_bus == b))
            if len(idx) == 0:
                continue
            q_other = m.q_fixed[b]
            nonreg_here = (~m.gen_regulating & ~m.svr_gen) & (m.gen_bus == b)
            q_other += m.gen_qset[nonreg_here].sum()
            q_other += st.svr_q[m.svr_gen & (m.gen_bus == b)].sum()
            need = s.imag[b] - q_other
            ranges = np.maximum(m.gen_qmax[idx] - m.gen_qmin[idx], 0.0)
            ranges = np.where(np.isfinite(ranges) & (ranges > 0), ranges, 1.0)
            q[idx] = need * ranges / ranges.sum()
        return q

    def gen_active(self) -> np.ndarray:
        """Per-generator active output; the slack machine takes the residual."""
        m, st = self.model, self.state
        p = m.gen_p.copy()
        v = st.vm * np.exp(1j * st.va)
        s = v * np.conj(m.ybus() @ v)
        b = m.slack_bus
        p[m.slack_gen] = s.real[b] - m.p_spec[b]
        return p


def _solve_raw(x: H2MGContext, opts: SolverOptions) -> _RawSolution:
    m = _GridModel(x, opts)
    st = _State(m)
    total_inner = 0
    ok, it = _newton_restarting(m, st, opts)
    total_inner += it
    if not ok:
        return _RawSolution(m, st, False, total_inner, 0)
    outer = 0
    converged = False
    while outer < opts.max_outer:
        outer += 1
        changed = _rtc_step(m, st, opts)
        changed |= _svr_dispatch(m, st, opts)
        changed |= _q_limit_switch(m, st, opts)
        if not changed:
            converged = True
            break
        ok, it = _newton_restarting(m, st, opts)
        total_inner += it
        if not ok:
            return _RawSolution(m, st, False, total_inner, outer)
    return _RawSolution(m, st, converged, total_inner, outer)


def solve_ac(grid: H2MGContext, opts: SolverOptions = SolverOptions()) -> PowerFlowSolution:
    """Solve the static AC equations with tap, SVR, and Q-limit outer loops."""
    raw = _solve_raw(grid, opts)
    m = raw.model
    flows = {}
    for k, key in enumerate(m.branch_keys):
        flows[key] = BranchFlow(raw.p1[k], raw.q1[k], raw.i1[k],
                                raw.p2[k], raw.q2[k], raw.i2[k])
    gen_q, gen_p = {}, {}
    if raw.converged:
        for gid, q, p in zip(m.gen_ids, raw.gen_reactive(), raw.gen_active()):
            gen_q[gid] = float(q)
            gen_p[gid] = float(p)
    return PowerFlowSolution(
        converged=raw.converged,
        bus_v={bid: float(v) for bid, v in zip(m.bus_ids, raw.vm)},
        bus_theta={bid: float(a) for bid, a in zip(m.bus_ids, raw.va)},
        branch_flows=flows,
        gen_q=gen_q,
        gen_p=gen_p,
        rtc_ratio={r["id"]: float(m.ratio[r["branch"]]) for r in m.rtcs},
        inner_iterations=raw.inner,
        outer_iterations=raw.outer,
    )


# ---------------------------------------------------------------------------
# Objective and metrics

def _normalized_voltages(raw: _RawSolution):
    m = raw.model
    mask = (m.opt > 0.5) & np.isfinite(m.v_min) & np.isfinite(m.v_max)
    ve = (raw.vm[mask] - m.v_min[mask]) / (m.v_max[mask] - m.v_min[mask])
    return ve


def _normalized_currents(raw: _RawSolution):
    m = raw.model
    if len(m.fb) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    r1 = np.where(np.isfinite(m.branch_i1max) & (m.branch_i1max > 0),
                  raw.i1 / np.where(m.branch_i1max > 0, m.branch_i1max, 1.0), -np.inf)
    r2 = np.where(np.isfinite(m.branch_i2max) & (m.branch_i2max > 0),
                  raw.i2 / np.where(m.branch_i2max > 0, m.branch_i2max, 1.0), -np.inf)
    ie = np.maximum(r1, r2)
    rated = np.isfinite(m.branch_i1max) | np.isfinite(m.branch_i2max)
    mask = (m.branch_opt > 0.5) & rated
    return ie[mask], mask


def evaluate_objective(x: H2MGContext, y: Decision,
                       opts: SolverOptions = SolverOptions()) -> ObjectiveBreakdown:
    """Apply ``y``, solve, and score voltage/current violations plus losses."""
    raw = _solve_raw(apply_decision(x, y), opts)
    if not raw.converged:
        return ObjectiveBreakdown(0.0, 0.0, 0.0, opts.prohibitive_cost, False)
    m = raw.model
    ve = _normalized_voltages(raw)
    pen_v = np.maximum(0.0, np.maximum(opts.eps_v - ve, ve - 1.0 + opts.eps_v))
    f_v = opts.lambda_v * float(np.sum(pen_v ** 2))
    ie, _ = _normalized_currents(raw)
    pen_i = np.maximum(0.0, np.abs(ie) - 1.0 + opts.eps_i)
    f_i = opts.lambda_i * float(np.sum(pen_i ** 2))
    opt_branch = m.branch_opt > 0.5
    f_j = opts.lambda_j * float(np.sum(np.abs(raw.p1 + raw.p2)[opt_branch]))
    return ObjectiveBreakdown(f_v, f_i, f_j, f_v + f_i + f_j, True)


def count_metrics(x: H2MGContext, y: Decision,
                  opts: SolverOptions = SolverOptions()) -> MetricsRecord:
    """Count violations and losses for a decision (invalid when unsolvable)."""
    raw = _solve_raw(apply_decision(x, y), opts)
    if not raw.converged:
        return MetricsRecord(False, 0, 0, 0, 0, 0.0, np.zeros(0), np.zeros(0))
    m = raw.model
    ve = _normalized_voltages(raw)
    over = int(np.sum(ve > 1.0))
    under = int(np.sum(ve < 0.0))
    ie, _ = _normalized_currents(raw)
    overflow = int(np.sum(np.abs(ie) > 1.0))
    opt_branch = m.branch_opt > 0.5
    joule = float(np.sum(np.abs(raw.p1 + raw.p2)[opt_branch]))
    return MetricsRecord(True, over, under, over + under, overflow, joule,
                         ve, np.abs(ie))
