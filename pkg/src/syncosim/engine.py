"""Time-domain integration engine.

Fixed-step RK4 with a partitioned algebraic network solve at every stage:
device states are frozen, the network voltages are solved with the devices'
Norton injections, then device derivatives are evaluated at those voltages.
Events never fall inside a step; integration splits steps so each event
fires exactly at its nominal instant. One run is strictly single-threaded
and deterministic.
"""

import cmath
import math
from dataclasses import dataclass, replace

import numpy as np

from . import gfl as gfl_mod
from . import machines as mach
from .netmodel import (
    NetworkDivergence,
    NetworkSolveCache,
    PowerFlowError,
    build_ybus,
    network_solve_dynamic,
    solve_power_flow,
)

TERM_COMPLETED = "completed"
TERM_COLLAPSE = "network_collapse"
TERM_NO_SOURCES = "all_sources_offline"

_EVENT_KINDS = ("apply_fault", "clear_fault", "open_breaker", "close_breaker")
_TIME_EPS = 1e-12


class ScenarioError(Exception):
    """Structurally invalid scenario."""


class InitializationError(Exception):
    """No usable equilibrium at t = 0."""

    def __init__(self, message, residuals=None):
        self.residuals = residuals or {}
        if self.residuals:
            detail = ", ".join(
                f"{k}={v:.3e}" for k, v in sorted(self.residuals.items())
            )
            message = f"{message} [{detail}]"
        super().__init__(message)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    bus: int | None = None
    g: float = 0.0
    b: float = 0.0
    device: str | None = None
    branch: int | None = None

    def __post_init__(self):
        if self.time < 0:
            raise ScenarioError("event time must be nonnegative")
        if self.kind not in _EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        if self.kind == "apply_fault" and self.bus is None:
            raise ScenarioError("apply_fault needs a bus")
        if self.kind in ("open_breaker", "close_breaker"):
            if (self.device is None) == (self.branch is None):
                raise ScenarioError(
                    f"{self.kind} needs exactly one of device or branch"
                )

    @property
    def admittance(self):
        return complex(self.g, self.b)

    def describe(self):
        if self.kind == "apply_fault":
            return f"apply_fault bus={self.bus} y={self.admittance}"
        if self.kind == "clear_fault":
            return "clear_fault"
        tgt = self.device if self.device is not None else f"branch:{self.branch}"
        return f"{self.kind} {tgt}"


@dataclass(frozen=True)
class SimConfig:
    t_end: float = 20.0
    dt: float = 0.001
    output_decimation: int = 2
    network_tol: float = 1e-8
    base_mva: float = 100.0
    base_freq: float = 60.0

    def __post_init__(self):
        if not (0.0 < self.dt <= 0.01):
            raise ScenarioError("dt must be in (0, 0.01] s")
        if self.t_end <= 0:
            raise ScenarioError("t_end must be positive")
        if self.output_decimation < 1:
            raise ScenarioError("output_decimation must be >= 1")

    @property
    def omega_base(self):
        return 2.0 * math.pi * self.base_freq


def validate_events(events):
    """Events must be time-sorted and every clear must follow an apply."""
    times = [e.time for e in events]
    if times != sorted(times):
        raise ScenarioError("events must be sorted by time")
    depth = 0
    for e in events:
        if e.kind == "apply_fault":
            depth += 1
        elif e.kind == "clear_fault":
            depth -= 1
            if depth < 0:
                raise ScenarioError("clear_fault without a matching apply_fault")


@dataclass
class DeviceRecord:
    """Per-device logged series of one run."""

    name: str
    kind: str
    bus: int
    p: np.ndarray
    q: np.ndarray
    freq: np.ndarray
    delta: np.ndarray
    online: np.ndarray


@dataclass
class SimResult:
    scenario: str
    t: np.ndarray
    bus_names: list
    v_mag: np.ndarray
    v_ang: np.ndarray
    devices: list
    events_applied: list
    termination: str

    def device(self, name):
        for d in self.devices:
            if d.name == name:
                return d
        raise KeyError(f"no device named {name!r}")


class _SyncMachine:
    """Synchronous generator or condenser wired into the engine."""

    n_states = 7  # delta, omega, eq_p, ed_p, eq_pp, ed_pp, v_meas

    def __init__(self, name, bus, params, exciter, kind):
        self.name = name
        self.bus = bus
        self.params = params  # system base
        self.exciter = exciter
        self.kind = kind
        self.p_mech = 0.0
        self.online = True
        self.offset = 0

    @property
    def is_source(self):
        return self.kind == "sync_gen"

    def norton_admittance(self):
        return 1.0 / complex(self.params.ra, self.params.xd_pp)

    def pack(self, state):
        return [
            state.delta, state.omega,
            state.eq_p, state.ed_p, state.eq_pp, state.ed_pp,
            self.exciter.v_meas,
        ]

    def unpack(self, xv):
        o = self.offset
        return mach.MachineState(
            delta=xv[o], omega=xv[o + 1],
            eq_p=xv[o + 2], ed_p=xv[o + 3],
            eq_pp=xv[o + 4], ed_pp=xv[o + 5],
        )

    def norton_current(self, xv):
        o = self.offset
        emf = complex(xv[o + 4], -xv[o + 5]) * cmath.exp(1j * xv[o])
        return emf * self.norton_admittance()

    def derivs(self, xv, v_bus, out, omega_base):
        o = self.offset
        if not self.online:
            for k in range(self.n_states):
                out[o + k] = 0.0
            return
        state = self.unpack(xv)
        v_meas = xv[o + 6]
        efd = self.exciter.output(v_meas)
        d = mach.machine_derivs(
            self.params, state, efd, v_bus, self.p_mech, omega_base
        )
        out[o] = d[0]
        out[o + 1] = d[1]
        out[o + 2] = d[2]
        out[o + 3] = d[3]
        out[o + 4] = d[4]
        out[o + 5] = d[5]
        out[o + 6] = (abs(v_bus) - v_meas) / self.exciter.tr


class _Gfl:
    """Grid-following inverter wired into the engine."""

    n_states = 4  # theta_pll, pll_integ, id_filt, iq_filt
    kind = "gfl"

    def __init__(self, name, bus, params, i_scale, s_dispatch=0.0 + 0.0j):
        self.name = name
        self.bus = bus
        self.params = params  # device base
        self.i_scale = i_scale  # rated_mva / base_mva
        self.s_dispatch = s_dispatch  # system base
        self.state = gfl_mod.GflState()
        self.online = True
        self.offset = 0

    @property
    def is_source(self):
        return self.online and self.state.online

    def pack(self):
        s = self.state
        return [s.theta_pll, s.pll_integ, s.id_filt, s.iq_filt]

    def sync_discrete(self, xv):
        o = self.offset
        self.state.theta_pll = xv[o]
        self.state.pll_integ = xv[o + 1]
        self.state.id_filt = xv[o + 2]
        self.state.iq_filt = xv[o + 3]

    def norton_current(self, xv):
        if not (self.online and self.state.online):
            return 0.0 + 0.0j
        o = self.offset
        return (
            complex(xv[o + 2], xv[o + 3])
            * cmath.exp(1j * xv[o])
            * self.i_scale
        )

    def derivs(self, xv, v_bus, out, omega_base):
        o = self.offset
        if not (self.online and self.state.online):
            for k in range(self.n_states):
                out[o + k] = 0.0
            return
        p = self.params
        theta, integ, idf, iqf = xv[o], xv[o + 1], xv[o + 2], xv[o + 3]
        vm = abs(v_bus)
        if vm < p.v_dip:
            # ride-through: frozen PLL, dip-depth reactive current command
            out[o] = integ
            out[o + 1] = 0.0
            i_cmd = gfl_mod.ride_through_command(p, vm)
        else:
            v_pll = v_bus * cmath.exp(-1j * theta)
            v_q = v_pll.imag
            omega_pll = 1.0 + (p.kp_pll * v_q + integ) / omega_base
            out[o] = omega_base * (omega_pll - 1.0)
            out[o + 1] = p.ki_pll * v_q
            p_star, q_star = gfl_mod.droop_targets(p, omega_pll, vm)
            i_cmd = gfl_mod.current_command(p, p_star, q_star, v_pll)
        out[o + 2] = (i_cmd.real - idf) / p.t_i
        diq = (i_cmd.imag - iqf) / p.t_i
        if diq > p.iq_withdraw_rate:
            diq = p.iq_withdraw_rate
        out[o + 3] = diq


class _AuxSource:
    """Ideal startup source: frozen emf behind a small reactance."""

    n_states = 0

    def __init__(self, name, bus, x):
        self.name = name
        self.bus = bus
        self.x = x
        self.emf = 1.0 + 0.0j
        self.online = True
        self.kind = "aux_source"
        self.offset = 0

    @property
    def is_source(self):
        return self.online

    def norton_admittance(self):
        return 1.0 / complex(0.0, self.x)

    def norton_current(self, xv):
        return self.emf * self.norton_admittance()


@dataclass
class AssembledSystem:
    """Everything the engine needs: a network with effective bus roles, the
    device wrappers in placement order, events and the power-flow dispatch."""

    name: str
    network: object
    config: SimConfig
    devices: list
    events: list
    dispatch: dict


class Simulation:
    """Initialized system ready to be stepped. Created from an assembled
    system description (see scenarios.build_system)."""

    def __init__(self, system):
        self.name = system.name
        self.network = system.network
        self.config = system.config
        self.devices = system.devices
        self.events = list(system.events)
        validate_events(self.events)
        self.loads = [
            (b.id, complex(b.load_p, b.load_q))
            for b in self.network.buses
            if b.load_p != 0.0 or b.load_q != 0.0
        ]
        self.omega_base = self.config.omega_base

        self._open_branches = set()
        self._ybus_base = build_ybus(self.network.buses, self.network.branches)
        self._fault_stack = []
        self._y_aug = None
        self._net_cache = None
        self._v = None
        self._v_pf = None
        self.t = 0.0
        self.x = []

        self._assign_offsets()
        self._initialize(system)

    # -- topology ---------------------------------------------------------

    def _assign_offsets(self):
        off = 0
        for dev in self.devices:
            dev.offset = off
            off += dev.n_states
        self.n_states = off

    def _rebuild_topology(self):
        if self._open_branches:
            branches = [
                br
                for k, br in enumerate(self.network.branches)
                if k not in self._open_branches
            ]
            y = build_ybus(self.network.buses, branches)
        else:
            y = self._ybus_base
        for bus, adm in self._fault_stack:
            y = y.with_fault(bus, adm)
        shunts = {}
        for dev in self.devices:
            if dev.online and hasattr(dev, "norton_admittance"):
                ya = dev.norton_admittance()
                shunts[dev.bus] = shunts.get(dev.bus, 0.0 + 0.0j) + ya
        self._y_aug = y.with_diagonal(shunts)
        self._net_cache = NetworkSolveCache(self._y_aug, self.loads)

    # -- network + derivatives --------------------------------------------

    def _injections(self, xv):
        i = np.zeros(self.network.n_bus, dtype=complex)
        for dev in self.devices:
            if dev.online:
                i[dev.bus] += dev.norton_current(xv)
        return i

    def _solve_network(self, xv, tol=None):
        inj = self._injections(xv)
        tol = tol if tol is not None else self.config.network_tol
        try:
            v = network_solve_dynamic(
                self._y_aug, inj, self.loads,
                v_guess=self._v, tol=tol, cache=self._net_cache,
            )
        except NetworkDivergence:
            if self._v is None:
                raise
            # the warm start may sit in a dead basin after a violent
            # transient; retry through the load-model homotopy (which
            # selects the physical branch) before declaring a collapse
            v = network_solve_dynamic(
                self._y_aug, inj, self.loads,
                v_guess=None, tol=tol, cache=self._net_cache,
            )
            if np.max(np.abs(v)) > 2.0:
                # far off any physical operating branch: treat as collapse
                raise
        self._v = v
        return v

    def _solve_after_event(self, tol=None):
        """Post-discontinuity network solution.

        Solves from both the pre-event iterate (continuity) and the
        load-model homotopy, and keeps the converged solution whose voltage
        profile is closest to nominal: the stable upper branch of the
        nose curve. Raises NetworkDivergence only if both fail."""
        inj = self._injections(self.x)
        tol = tol if tol is not None else self.config.network_tol
        candidates = []
        err = None
        for seed in (self._v, None):
            try:
                candidates.append(
                    network_solve_dynamic(
                        self._y_aug, inj, self.loads,
                        v_guess=seed, tol=tol, cache=self._net_cache,
                    )
                )
            except NetworkDivergence as exc:
                err = exc
        candidates = [vv for vv in candidates if np.max(np.abs(vv)) <= 2.0]
        if not candidates:
            if err is not None:
                raise err
            raise NetworkDivergence(float("nan"), 0)
        v = min(candidates, key=lambda vv: np.max(np.abs(np.abs(vv) - 1.0)))
        self._v = v
        return v

    def _derivs(self, xv):
        v = self._solve_network(xv)
        out = [0.0] * self.n_states
        for dev in self.devices:
            if dev.n_states:
                dev.derivs(xv, v[dev.bus], out, self.omega_base)
        return out, v

    # -- initialization ----------------------------------------------------

    def _allocate_targets(self, pf):
        """Complex power each device must deliver at t = 0 (system base).

        Inverters hold their dispatched injection; the machine at a bus picks
        up the remainder of the bus's power-flow generation (condensers end
        up near zero active power, slack machines absorb the losses)."""
        gfl_s = {}
        for dev in self.devices:
            if isinstance(dev, _Gfl):
                gfl_s[dev.bus] = gfl_s.get(dev.bus, 0.0 + 0.0j) + dev.s_dispatch
        machines_at = {}
        for dev in self.devices:
            if isinstance(dev, (_SyncMachine, _AuxSource)):
                machines_at.setdefault(dev.bus, []).append(dev)

        targets = {}
        for dev in self.devices:
            if isinstance(dev, _Gfl):
                targets[dev.name] = dev.s_dispatch
                continue
            if len(machines_at[dev.bus]) != 1:
                raise InitializationError(
                    f"bus {dev.bus}: only one machine or source per bus is "
                    "supported"
                )
            bus_gen = complex(
                pf.gen_p.get(dev.bus, 0.0), pf.gen_q.get(dev.bus, 0.0)
            )
            targets[dev.name] = bus_gen - gfl_s.get(dev.bus, 0.0 + 0.0j)
        return targets

    def _initialize(self, system):
        try:
            pf = solve_power_flow(self.network, system.dispatch, tol=1e-12)
        except PowerFlowError as exc:
            raise InitializationError(f"power flow failed: {exc}") from exc
        self.power_flow = pf
        v = pf.complex_voltage()
        targets = self._allocate_targets(pf)

        for dev in self.devices:
            if isinstance(dev, _AuxSource):
                s = targets[dev.name]
                i_out = (s / v[dev.bus]).conjugate()
                dev.emf = v[dev.bus] + complex(0.0, dev.x) * i_out

        self._rebuild_topology()
        self._v_pf = v.copy()  # branch-selection seed after discontinuities
        self._v = v.copy()  # warm-start the algebraic solve at the PF point
        v_prev = v
        for _ in range(4):
            x = []
            for dev in self.devices:
                if isinstance(dev, _SyncMachine):
                    s = targets[dev.name]
                    state, efd, p_mech = mach.init_from_terminal(
                        dev.params, v[dev.bus], s, dev.exciter
                    )
                    dev.p_mech = p_mech
                    x.extend(dev.pack(state))
                elif isinstance(dev, _Gfl):
                    s = targets[dev.name] / dev.i_scale  # to device base
                    dev.state = gfl_mod.init_locked(
                        dev.params, v[dev.bus], s.real, s.imag
                    )
                    cmd = math.hypot(dev.state.id_filt, dev.state.iq_filt)
                    if cmd > dev.params.i_max + 1e-12:
                        raise InitializationError(
                            f"{dev.name}: dispatch needs {cmd:.3f} pu current, "
                            f"limit is {dev.params.i_max} pu"
                        )
                    x.extend(dev.pack())
            self.x = x
            v_prev = v
            v = self._solve_network(x, tol=1e-13)
        if np.max(np.abs(v - v_prev)) > 1e-9:
            raise InitializationError(
                "no self-consistent equilibrium (dispatch infeasible?)"
            )

        # Re-anchor droop set points so the operating point is an exact
        # equilibrium of the droop laws at the solved voltage.
        for dev in self.devices:
            if isinstance(dev, _Gfl):
                i_net = complex(
                    dev.state.id_filt, dev.state.iq_filt
                ) * cmath.exp(1j * dev.state.theta_pll)
                s = v[dev.bus] * i_net.conjugate()  # device base
                par = dev.params
                dev.params = replace(
                    par,
                    p_set=s.real - (par.omega_n - 1.0) * par.m_p,
                    q_set=s.imag - (par.v_n - abs(v[dev.bus])) * par.m_q,
                )

        dx, v = self._derivs(self.x)
        residuals = {}
        for dev in self.devices:
            if dev.n_states:
                o = dev.offset
                residuals[dev.name] = max(
                    abs(d) for d in dx[o : o + dev.n_states]
                )
        worst = max(residuals.values(), default=0.0)
        if worst > 1e-9:
            raise InitializationError(
                "initial state is not an equilibrium", residuals
            )
        self._update_gfl_frequency(v)

    # -- stepping -----------------------------------------------------------

    def step(self, dt):
        """One RK4 step of length dt; returns the network solution at the
        new state. Raises NetworkDivergence if the algebraic solve fails."""
        x = self.x
        k1, _ = self._derivs(x)
        h2 = 0.5 * dt
        x2 = [xi + h2 * ki for xi, ki in zip(x, k1)]
        k2, _ = self._derivs(x2)
        x3 = [xi + h2 * ki for xi, ki in zip(x, k2)]
        k3, _ = self._derivs(x3)
        x4 = [xi + dt * ki for xi, ki in zip(x, k3)]
        k4, _ = self._derivs(x4)
        h6 = dt / 6.0
        self.x = [
            xi + h6 * (a + 2.0 * (b + c) + d)
            for xi, a, b, c, d in zip(x, k1, k2, k3, k4)
        ]
        self.t += dt
        v = self._solve_network(self.x)
        for dev in self.devices:
            if isinstance(dev, _Gfl):
                dev.sync_discrete(self.x)
        self._update_gfl_frequency(v, dt)
        return v

    def _update_gfl_frequency(self, v, dt=0.0):
        for dev in self.devices:
            if isinstance(dev, _Gfl) and dev.online and dev.state.online:
                dev.state.omega_pll = gfl_mod.pll_frequency(
                    dev.params, dev.state, v[dev.bus], self.omega_base
                )
                gfl_mod.measured_frequency_update(dev.params, dev.state, dt)

    def _run_trip_checks(self, v, dt):
        """Per-step discrete inverter updates: ride-through bookkeeping and
        trip latching. Returns True if any injection changed
        discontinuously."""
        changed = False
        for dev in self.devices:
            if isinstance(dev, _Gfl) and dev.online and dev.state.online:
                o = dev.offset
                vb = v[dev.bus]
                if gfl_mod.ride_through_update(dev.params, dev.state, vb, dt):
                    self.x[o] = dev.state.theta_pll
                    changed = True
                was = dev.state.online
                gfl_mod.trip_check(dev.params, dev.state, abs(vb), dt)
                if dev.state.online != was:
                    self.x[o + 2] = 0.0
                    self.x[o + 3] = 0.0
                    changed = True
        return changed

    def sources_online(self):
        return any(dev.is_source for dev in self.devices)

    def apply_event(self, ev):
        if ev.kind == "apply_fault":
            self._fault_stack.append((ev.bus, ev.admittance))
        elif ev.kind == "clear_fault":
            if not self._fault_stack:
                raise ScenarioError("clear_fault with no active fault")
            self._fault_stack.pop()
        elif ev.kind in ("open_breaker", "close_breaker"):
            online = ev.kind == "close_breaker"
            if ev.device is not None:
                dev = self._device_by_name(ev.device)
                dev.online = online
                if isinstance(dev, _Gfl):
                    dev.state.online = online
            else:
                if not (0 <= ev.branch < len(self.network.branches)):
                    raise ScenarioError(f"no branch {ev.branch}")
                if online:
                    self._open_branches.discard(ev.branch)
                else:
                    self._open_branches.add(ev.branch)
        self._rebuild_topology()

    def _device_by_name(self, name):
        for dev in self.devices:
            if dev.name == name:
                return dev
        raise ScenarioError(f"no device named {name!r}")


def run(system):
    """Integrate an assembled system to t_end, recording decimated output.

    Always returns a SimResult; a diverging network solve terminates the run
    with reason 'network_collapse', loss of the last power source with
    'all_sources_offline'.
    """
    sim = Simulation(system)
    cfg = sim.config
    recorder = _Recorder(sim)

    events = sorted(sim.events, key=lambda e: e.time)
    boundaries = sorted({e.time for e in events if e.time < cfg.t_end})
    boundaries.append(cfg.t_end)

    v = sim._solve_network(sim.x)
    recorder.log(sim, v)
    termination = TERM_COMPLETED
    step_count = 0
    ev_idx = 0

    try:
        t_start = 0.0
        for boundary in boundaries:
            span = boundary - t_start
            if span > _TIME_EPS:
                n_full = int(math.floor(span / cfg.dt + 1e-9))
                rem = span - n_full * cfg.dt
                if rem < _TIME_EPS:
                    rem = 0.0
                sub = 0
                while sub < n_full or rem > 0.0:
                    if sub < n_full:
                        h = cfg.dt
                        sub += 1
                        t_new = t_start + sub * cfg.dt
                    else:
                        h = rem
                        rem = 0.0
                        t_new = boundary
                    v = sim.step(h)
                    sim.t = t_new
                    step_count += 1
                    if sim._run_trip_checks(v, h):
                        v = sim._solve_network(sim.x)
                        sim._update_gfl_frequency(v)
                    at_boundary = (
                        abs(t_new - boundary) < _TIME_EPS
                        and boundary < cfg.t_end
                    )
                    if not at_boundary and step_count % cfg.output_decimation == 0:
                        recorder.log(sim, v)
                    if not sim.sources_online():
                        recorder.log(sim, v, force=True)
                        termination = TERM_NO_SOURCES
                        raise _EarlyStop
            t_start = boundary
            if boundary >= cfg.t_end:
                break
            while ev_idx < len(events) and events[ev_idx].time <= boundary + _TIME_EPS:
                ev = events[ev_idx]
                sim.apply_event(ev)
                recorder.events.append((boundary, ev.describe()))
                ev_idx += 1
            v = sim._solve_after_event()
            if sim._run_trip_checks(v, 0.0):
                v = sim._solve_after_event()
            sim._update_gfl_frequency(v)
            recorder.log(sim, v, force=True)
            if not sim.sources_online():
                termination = TERM_NO_SOURCES
                raise _EarlyStop
        recorder.log(sim, v, force=True)
    except _EarlyStop:
        pass
    except NetworkDivergence:
        termination = TERM_COLLAPSE

    return recorder.result(sim, termination)


class _EarlyStop(Exception):
    pass


class _Recorder:
    def __init__(self, sim):
        self.rows_t = []
        self.v_mag = []
        self.v_ang = []
        self.dev_rows = {d.name: [] for d in sim.devices}
        self.events = []

    def log(self, sim, v, force=False):
        if self.rows_t and sim.t <= self.rows_t[-1] + _TIME_EPS:
            if not force:
                return
            # replace the row at this instant with the post-event values
            self._pop()
        self.rows_t.append(sim.t)
        self.v_mag.append(np.abs(v))
        self.v_ang.append(np.angle(v))
        for dev in sim.devices:
            self.dev_rows[dev.name].append(_device_row(sim, dev, v))

    def _pop(self):
        self.rows_t.pop()
        self.v_mag.pop()
        self.v_ang.pop()
        for rows in self.dev_rows.values():
            rows.pop()

    def result(self, sim, termination):
        devices = []
        for dev in sim.devices:
            rows = np.array(self.dev_rows[dev.name])
            devices.append(
                DeviceRecord(
                    name=dev.name,
                    kind=getattr(dev, "kind", "aux_source"),
                    bus=dev.bus,
                    p=rows[:, 0],
                    q=rows[:, 1],
                    freq=rows[:, 2],
                    delta=rows[:, 3],
                    online=rows[:, 4],
                )
            )
        return SimResult(
            scenario=sim.name,
            t=np.array(self.rows_t),
            bus_names=[b.name for b in sim.network.buses],
            v_mag=np.array(self.v_mag),
            v_ang=np.array(self.v_ang),
            devices=devices,
            events_applied=self.events,
            termination=termination,
        )


def _device_row(sim, dev, v):
    vb = v[dev.bus]
    if isinstance(dev, _SyncMachine):
        if dev.online:
            state = dev.unpack(sim.x)
            p, q = mach.terminal_power(dev.params, state, vb)
            return (p, q, state.omega * sim.config.base_freq, state.delta, 1.0)
        state = dev.unpack(sim.x)
        return (0.0, 0.0, state.omega * sim.config.base_freq, state.delta, 0.0)
    if isinstance(dev, _Gfl):
        s = vb * dev.norton_current(sim.x).conjugate()
        online = dev.online and dev.state.online
        return (
            s.real,
            s.imag,
            dev.state.freq_meas * sim.config.base_freq,
            dev.state.theta_pll,
            1.0 if online else 0.0,
        )
    # aux source
    if dev.online:
        i_out = (dev.emf - vb) * dev.norton_admittance()
        s = vb * i_out.conjugate()
        return (s.real, s.imag, sim.config.base_freq, cmath.phase(dev.emf), 1.0)
    return (0.0, 0.0, sim.config.base_freq, cmath.phase(dev.emf), 0.0)


def simulate_forced_imbalance(h, delta_pe, t_end, dt, d=0.0, base_freq=60.0):
    """Swing response of an isolated rotor to a held power imbalance.

    Integrates the swing law with the electrical power forced to a constant
    offset (network bypassed, exciter frozen), using the same RK4 stepping as
    the engine. Returns (t, omega_pu, delta_rad) arrays; delta starts at 0.
    """
    omega_base = 2.0 * math.pi * base_freq
    n = int(round(t_end / dt))
    t = np.empty(n + 1)
    omega = np.empty(n + 1)
    delta = np.empty(n + 1)
    x = [0.0, 1.0]  # delta, omega
    t[0], delta[0], omega[0] = 0.0, x[0], x[1]

    def f(xv):
        dd = omega_base * (xv[1] - 1.0)
        dw = (delta_pe - d * (xv[1] - 1.0)) / (2.0 * h)
        return [dd, dw]

    for k in range(1, n + 1):
        k1 = f(x)
        x2 = [xi + 0.5 * dt * ki for xi, ki in zip(x, k1)]
        k2 = f(x2)
        x3 = [xi + 0.5 * dt * ki for xi, ki in zip(x, k2)]
        k3 = f(x3)
        x4 = [xi + dt * ki for xi, ki in zip(x, k3)]
        k4 = f(x4)
        x = [
            xi + dt / 6.0 * (a + 2.0 * (b + c) + e)
            for xi, a, b, c, e in zip(x, k1, k2, k3, k4)
        ]
        t[k] = k * dt
        delta[k], omega[k] = x[0], x[1]
    return t, omega, delta
