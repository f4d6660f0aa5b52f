"""Scenario definitions: the WSCC 9-bus case data, the experiment catalog,
metric extraction, stability classification and CSV export.

The network uses the published WSCC (Anderson) 9-bus line and load data on a
100 MVA system base. Machine dynamic data are generic round-rotor library
values since the study system uses generic models; unit ratings, inertia
constants and the subtransient-reactance variants are set per case.
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine as eng
from . import gfl as gfl_mod
from . import machines as mach
from .engine import AssembledSystem, Event, ScenarioError, SimConfig
from .netmodel import Branch, Bus, NetworkModel

UFLS_HZ = 59.50
ROCOF_WINDOW_S = 0.10
SETTLE_BAND_HZ = 0.05
STABILITY_WINDOW_S = 2.0
FREQ_SANE_BAND = (55.0, 65.0)

FIVE_CYCLES = 5.0 / 60.0

DEVICE_KINDS = ("sync_gen", "sync_cond", "gfl", "aux_source")


# ---------------------------------------------------------------------------
# WSCC 9-bus data (100 MVA base). Bus ids are 0-based; names keep the
# conventional 1-based labels.
# ---------------------------------------------------------------------------

def wscc9_network(load_scale=1.0):
    s = load_scale
    buses = [
        Bus(0, "Bus1", 16.5),
        Bus(1, "Bus2", 18.0),
        Bus(2, "Bus3", 13.8),
        Bus(3, "Bus4", 230.0),
        Bus(4, "Bus5", 230.0, load_p=1.25 * s, load_q=0.50 * s),
        Bus(5, "Bus6", 230.0, load_p=0.90 * s, load_q=0.30 * s),
        Bus(6, "Bus7", 230.0),
        Bus(7, "Bus8", 230.0, load_p=1.00 * s, load_q=0.35 * s),
        Bus(8, "Bus9", 230.0),
    ]
    branches = [
        Branch(0, 3, 0.0, 0.0576, 0.0),      # step-up T1
        Branch(3, 4, 0.010, 0.085, 0.176),
        Branch(3, 5, 0.017, 0.092, 0.158),
        Branch(4, 6, 0.032, 0.161, 0.306),
        Branch(5, 8, 0.039, 0.170, 0.358),
        Branch(6, 7, 0.0085, 0.072, 0.149),
        Branch(7, 8, 0.0119, 0.1008, 0.209),
        Branch(1, 6, 0.0, 0.0625, 0.0),      # step-up T2
        Branch(2, 8, 0.0, 0.0586, 0.0),      # step-up T3
    ]
    return NetworkModel(buses=buses, branches=branches)


FAULT_BUS = 5  # 0-based id of "Bus6"

# Generic round-rotor machine data (per unit on the machine rating).
MACHINE_DEFAULTS = {
    "rated_mva": 200.0,
    "h": 4.0,
    "d": 0.0,
    "ra": 0.0,
    "xd": 1.80,
    "xq": 1.70,
    "xd_p": 0.26,
    "xq_p": 0.45,
    "xd_pp": 0.22,
    "xq_pp": 0.22,
    "xl": 0.12,
    "td0_p": 8.0,
    "tq0_p": 0.40,
    "td0_pp": 0.045,
    "tq0_pp": 0.07,
}

EXCITER_DEFAULTS = {
    "exc_tr": 0.02,
    "exc_ka": 200.0,
    "exc_efd_min": -8.0,
    "exc_efd_max": 8.0,
}

GFL_DEFAULTS = {
    "v_dip": gfl_mod.V_PLL_FREEZE,
    "v_trip_hi": 1.0e9,
    "rated_mva": 200.0,
    "p_set": 0.0,
    "q_set": 0.0,
    "m_p": 20.0,
    "m_q": 5.0,
    "omega_n": 1.0,
    "v_n": 1.0,
    "kp_pll": gfl_mod.DEFAULT_KP_PLL,
    "ki_pll": gfl_mod.DEFAULT_KI_PLL,
    "i_max": 1.2,
    "t_i": 0.010,
    "f_trip_lo": 57.0,
    "f_trip_hi": 63.0,
    "v_trip_lo": 0.1,
    "t_trip": 0.15,
}

AUX_DEFAULTS = {"v_target": 1.025, "x": 0.01}

_MACHINE_KEYS = (
    set(MACHINE_DEFAULTS) | set(EXCITER_DEFAULTS) | {"p_set", "v_target"}
)
_GFL_KEYS = set(GFL_DEFAULTS)
_AUX_KEYS = set(AUX_DEFAULTS)
_ALLOWED_PARAMS = {
    "sync_gen": _MACHINE_KEYS,
    "sync_cond": _MACHINE_KEYS - {"p_set"},
    "gfl": _GFL_KEYS,
    "aux_source": _AUX_KEYS,
}


@dataclass
class Placement:
    bus: int
    kind: str
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise ScenarioError(f"{self.name}: unknown device kind {self.kind!r}")
        allowed = _ALLOWED_PARAMS[self.kind]
        for key in self.params:
            if key not in allowed:
                raise ScenarioError(
                    f"{self.name}: unknown key {key!r} for kind {self.kind}"
                )


@dataclass
class ScenarioSpec:
    name: str
    network: str = "wscc9"
    placements: list = field(default_factory=list)
    events: list = field(default_factory=list)
    config: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        names = [p.name for p in self.placements]
        if len(names) != len(set(names)):
            raise ScenarioError(f"{self.name}: duplicate device names")
        n_aux = sum(1 for p in self.placements if p.kind == "aux_source")
        if n_aux > 1:
            raise ScenarioError(f"{self.name}: at most one aux_source")
        net = resolve_network(self.network)
        for p in self.placements:
            if not (0 <= p.bus < net.n_bus):
                raise ScenarioError(f"{self.name}: placement bus {p.bus} not in network")
        eng.validate_events(self.events)


def resolve_network(network):
    """Accept the builtin name (optionally with a load scale) or an inline
    bus/branch description."""
    if isinstance(network, NetworkModel):
        return network
    if network == "wscc9":
        return wscc9_network()
    if isinstance(network, dict):
        if network.get("name") == "wscc9":
            extra = set(network) - {"name", "load_scale"}
            if extra:
                raise ScenarioError(f"unknown network key {extra.pop()!r}")
            return wscc9_network(load_scale=network.get("load_scale", 1.0))
        buses = [Bus(**b) for b in network["buses"]]
        branches = [Branch(**b) for b in network["branches"]]
        return NetworkModel(buses=buses, branches=branches)
    raise ScenarioError(f"unknown network {network!r}")


# ---------------------------------------------------------------------------
# Assembly: ScenarioSpec -> AssembledSystem for the engine
# ---------------------------------------------------------------------------

def build_system(spec):
    net = resolve_network(spec.network)
    base_mva = spec.config.base_mva

    # Effective power-flow roles: the aux source hosts the slack, otherwise
    # the first synchronous generator; machine buses are PV, the rest PQ.
    aux = [p for p in spec.placements if p.kind == "aux_source"]
    gens = [p for p in spec.placements if p.kind == "sync_gen"]
    if aux:
        slack_bus = aux[0].bus
    elif gens:
        slack_bus = gens[0].bus
    else:
        raise ScenarioError(
            f"{spec.name}: need an aux_source or sync_gen to host the slack"
        )
    pv_buses = {
        p.bus
        for p in spec.placements
        if p.kind in ("sync_gen", "sync_cond", "aux_source")
    }
    for b in net.buses:
        if b.id == slack_bus:
            b.init_role = "slack"
        elif b.id in pv_buses:
            b.init_role = "pv"
        else:
            b.init_role = "pq"

    dispatch = {}

    def bus_entry(bus):
        return dispatch.setdefault(bus, {})

    devices = []
    for p in spec.placements:
        if p.kind in ("sync_gen", "sync_cond"):
            merged = {**MACHINE_DEFAULTS, **EXCITER_DEFAULTS}
            merged.update(p.params)
            p_set = merged.pop("p_set", 0.0)
            v_target = merged.pop("v_target", 1.025)
            exciter = mach.ExciterST1A(
                tr=merged.pop("exc_tr"),
                ka=merged.pop("exc_ka"),
                efd_min=merged.pop("exc_efd_min"),
                efd_max=merged.pop("exc_efd_max"),
            )
            mode = "condenser" if p.kind == "sync_cond" else "generator"
            params = mach.MachineParams(mode=mode, **merged)
            params = params.to_base(params.rated_mva, base_mva)
            devices.append(eng._SyncMachine(p.name, p.bus, params, exciter, p.kind))
            entry = bus_entry(p.bus)
            entry["v"] = v_target
            if p.kind == "sync_gen":
                entry["p"] = entry.get("p", 0.0) + p_set
        elif p.kind == "gfl":
            merged = dict(GFL_DEFAULTS)
            merged.update(p.params)
            params = gfl_mod.GflParams(**merged)
            scale = params.rated_mva / base_mva
            s_dispatch = complex(params.p_set, params.q_set) * scale
            devices.append(
                eng._Gfl(p.name, p.bus, params, scale, s_dispatch)
            )
            entry = bus_entry(p.bus)
            entry["p"] = entry.get("p", 0.0) + s_dispatch.real
            entry["q"] = entry.get("q", 0.0) + s_dispatch.imag
        else:  # aux_source
            merged = dict(AUX_DEFAULTS)
            merged.update(p.params)
            devices.append(eng._AuxSource(p.name, p.bus, merged["x"]))
            bus_entry(p.bus)["v"] = merged["v_target"]

    return AssembledSystem(
        name=spec.name,
        network=net,
        config=spec.config,
        devices=devices,
        events=list(spec.events),
        dispatch=dispatch,
    )


def run_scenario(spec):
    return eng.run(build_system(spec))


def without_events(spec, t_end=5.0):
    """Copy of a scenario with no events, for quiescence checks."""
    cfg = spec.config
    return ScenarioSpec(
        name=spec.name + "-quiescent",
        network=spec.network,
        placements=spec.placements,
        events=[],
        config=SimConfig(
            t_end=t_end,
            dt=cfg.dt,
            output_decimation=cfg.output_decimation,
            network_tol=cfg.network_tol,
            base_mva=cfg.base_mva,
            base_freq=cfg.base_freq,
        ),
    )


# ---------------------------------------------------------------------------
# Case catalog
# ---------------------------------------------------------------------------

def _gen(bus, name, p_set, v_target, **over):
    params = {"p_set": p_set, "v_target": v_target}
    params.update(over)
    return Placement(bus=bus, kind="sync_gen", name=name, params=params)


def _synco(bus, name, rated_mva, h, v_target=1.040, **over):
    params = {"rated_mva": rated_mva, "h": h, "v_target": v_target}
    params.update(over)
    return Placement(bus=bus, kind="sync_cond", name=name, params=params)


def _gfl(bus, name, p_set, q_set=0.0, **over):
    params = {"p_set": p_set, "q_set": q_set}
    params.update(over)
    return Placement(bus=bus, kind="gfl", name=name, params=params)


def _aux(bus, name, v_target=1.025, x=0.01):
    return Placement(
        bus=bus, kind="aux_source", name=name,
        params={"v_target": v_target, "x": x},
    )


def _fault_events(t_fault=1.0, duration=FIVE_CYCLES, bus=FAULT_BUS, g=1e6):
    return [
        Event(time=t_fault, kind="apply_fault", bus=bus, g=g, b=0.0),
        Event(time=t_fault + duration, kind="clear_fault"),
    ]


# The catalog runs the system at 85 % of the published loading: the mix of
# two current-limited plants and one machine has its post-fault loadability
# nose right on top of the published operating point, and the study needs a
# case family that straddles the stability boundary rather than starting on
# it. Device dispatch is scaled with the load.
CATALOG_LOAD_SCALE = 0.85
_CATALOG_NETWORK = {"name": "wscc9", "load_scale": CATALOG_LOAD_SCALE}

# Grid-strength suite: GFL plants at buses 1 and 3, synchronous generator at
# bus 2, short circuit at bus 6 cleared after five cycles.
_GFL13_GEN = dict(bus=1, name="Gen2", p_set=1.386, v_target=1.040)


def _gfl13_placements(syncos=()):
    # GFL1 absorbs the local var surplus so the paired condenser runs
    # overexcited, its physical operating mode.
    pl = [
        _gfl(0, "GFL1", p_set=0.306, q_set=-0.10),
        _gen(**_GFL13_GEN),
        _gfl(2, "GFL3", p_set=0.361, q_set=0.05),
    ]
    pl.extend(syncos)
    return pl


def _gfl13_case(name, syncos=(), gen_h=4.0, t_end=21.5):
    placements = _gfl13_placements(syncos)
    for p in placements:
        if p.name == "Gen2":
            p.params["h"] = gen_h
    return ScenarioSpec(
        name=name,
        network=_CATALOG_NETWORK,
        placements=placements,
        events=_fault_events(),
        config=SimConfig(t_end=t_end, dt=0.001, output_decimation=2),
    )


# Grid-forming suite: every generator replaced by a GFL plant, started from
# an auxiliary ideal source whose breaker opens once the system is steady.
# The inverters run as dispatched (no frequency-watt droop); losing the
# source leaves an uncovered deficit and no voltage reference, so the PLL
# frequency estimates dive at a rate set by whatever rotating mass is
# present, and each plant ceases operation when its measured frequency
# leaves the lock band (the cessation rule standing in for loss of PLL
# synchronism). q_set is trimmed per variant so the auxiliary source opens
# at near-zero reactive output.
def _grid_forming_case(name, syncos=(), q_set=-0.02):
    gfl_over = dict(
        p_set=0.40, q_set=q_set, m_p=0.0, m_q=2.0, v_dip=0.0, t_i=0.03,
        kp_pll=50.0, ki_pll=50.0,
        f_trip_lo=59.45, f_trip_hi=60.7, t_trip=0.002,
        v_trip_lo=0.8, v_trip_hi=1.3,
    )
    placements = [
        _gfl(0, "GFL1", **gfl_over),
        _gfl(1, "GFL2", **gfl_over),
        _gfl(2, "GFL3", **gfl_over),
    ]
    for syn in syncos:
        syn.params["v_target"] = 1.03
        placements.append(syn)
    placements.append(_aux(8, "Aux9", v_target=1.03))
    return ScenarioSpec(
        name=name,
        network=_CATALOG_NETWORK,
        placements=placements,
        events=[Event(time=1.0, kind="open_breaker", device="Aux9")],
        config=SimConfig(t_end=8.0, dt=0.00025, output_decimation=2),
    )


def case_catalog():
    """All named experiments, keyed by case name (insertion-ordered)."""
    cases = []

    # (a) grid-forming tests
    cases.append(_grid_forming_case("GF-noSynCo", q_set=-0.02))
    cases.append(
        _grid_forming_case(
            "GF-1SynCo", syncos=[_synco(0, "SynCo1", 14.85, 4.0)], q_set=-0.04
        )
    )
    cases.append(
        _grid_forming_case(
            "GF-3SynCo",
            syncos=[
                _synco(0, "SynCo1", 14.85, 4.0),
                _synco(1, "SynCo2", 14.58, 4.0),
                _synco(2, "SynCo3", 20.70, 4.0),
            ],
            q_set=-0.06,
        )
    )

    # (b) grid-strength tests: single condenser paired with the GFL at bus 1
    cases.append(_gfl13_case("GFL13-noSynCo"))
    cases.append(
        _gfl13_case(
            "GFL13-synco-S14.85-H4", syncos=[_synco(0, "SynCo1", 14.85, 4.0)]
        )
    )
    cases.append(
        _gfl13_case(
            "GFL13-synco-S14.85-H6", syncos=[_synco(0, "SynCo1", 14.85, 6.0)]
        )
    )
    cases.append(
        _gfl13_case(
            "GFL13-synco-S24.75-H4", syncos=[_synco(0, "SynCo1", 24.75, 4.0)]
        )
    )

    # (c) subtransient-reactance sweep on the stabilizing condenser; the
    # transient reactance stays a step above the swept subtransient value
    for xdpp in (0.150, 0.220, 0.295):
        cases.append(
            _gfl13_case(
                f"GFL13-synco-S24.75-xdpp{xdpp:.3f}",
                syncos=[
                    _synco(
                        0, "SynCo1", 24.75, 4.0,
                        xd_pp=xdpp, xq_pp=xdpp,
                        xd_p=max(0.26, xdpp + 0.04),
                    )
                ],
            )
        )

    # (d) reduced-inertia generator with condenser inertia raised
    cases.append(
        _gfl13_case(
            "GFL13-genH2-synco-S24.75-H4",
            syncos=[_synco(0, "SynCo1", 24.75, 4.0)],
            gen_h=2.0,
        )
    )
    cases.append(
        _gfl13_case(
            "GFL13-genH2-synco-S24.75-H6",
            syncos=[_synco(0, "SynCo1", 24.75, 6.0)],
            gen_h=2.0,
        )
    )

    # (e) dual-condenser cases at buses 1 and 3
    cases.append(
        _gfl13_case(
            "GFL13-2synco-S12.36-S10.35",
            syncos=[
                _synco(0, "SynCo1", 12.36, 4.0),
                _synco(2, "SynCo3", 10.35, 4.0),
            ],
        )
    )
    for s1, s3 in ((14.36, 8.35), (16.36, 6.35)):
        cases.append(
            _gfl13_case(
                f"GFL13-2synco-S{s1:.2f}-S{s3:.2f}",
                syncos=[
                    _synco(0, "SynCo1", s1, 4.0),
                    _synco(2, "SynCo3", s3, 4.0),
                ],
            )
        )
    cases.append(
        _gfl13_case(
            "GFL13-genH2-2synco-S24.75-S20.70",
            syncos=[
                _synco(0, "SynCo1", 24.75, 4.0),
                _synco(2, "SynCo3", 20.70, 4.0),
            ],
            gen_h=2.0,
        )
    )
    cases.append(
        _gfl13_case(
            "GFL13-genH2-2synco-bigS-lowH",
            syncos=[
                _synco(0, "SynCo1", 14.85, 2.0),
                _synco(2, "SynCo3", 9.09, 6.0),
            ],
            gen_h=2.0,
        )
    )
    cases.append(
        _gfl13_case(
            "GFL13-genH2-2synco-bigS-bigH",
            syncos=[
                _synco(0, "SynCo1", 14.85, 6.0),
                _synco(2, "SynCo3", 9.09, 2.0),
            ],
            gen_h=2.0,
        )
    )

    return {c.name: c for c in cases}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    nadir_hz: float
    time_to_ufls: float | None
    max_rocof: float
    settling_time: float | None
    osc_period: float | None
    verdict: str

    def as_dict(self):
        return {
            "nadir_hz": self.nadir_hz,
            "time_to_ufls_s": self.time_to_ufls,
            "max_rocof_hz_s": self.max_rocof,
            "settling_time_s": self.settling_time,
            "osc_period_s": self.osc_period,
            "verdict": self.verdict,
        }


class MetricsError(Exception):
    pass


def first_event_time(result):
    return result.events_applied[0][0] if result.events_applied else 0.0


def last_event_time(result):
    return result.events_applied[-1][0] if result.events_applied else 0.0


def metrics(result, device):
    """MetricReport for one device's frequency trace, taken from the first
    event onward."""
    rec = result.device(device) if isinstance(device, str) else device
    if len(result.t) == 0:
        raise MetricsError("empty trace")
    t0 = first_event_time(result)
    sel = result.t >= t0 - 1e-12
    t = result.t[sel]
    f = rec.freq[sel]
    if len(t) == 0:
        raise MetricsError("no samples after the first event")

    nadir = float(np.min(f))
    time_to_ufls = _first_crossing(t, f, UFLS_HZ)
    max_rocof = _max_rocof(t, f, ROCOF_WINDOW_S)
    settling = _settling_time(t, f)
    verdict = classify_stability(
        t,
        f,
        t_last_event=last_event_time(result),
        terminated_early=result.termination != eng.TERM_COMPLETED,
    )
    osc_period = _osc_period(t, f) if verdict == "unstable" else None
    return MetricReport(
        nadir_hz=nadir,
        time_to_ufls=time_to_ufls,
        max_rocof=max_rocof,
        settling_time=settling,
        osc_period=osc_period,
        verdict=verdict,
    )


def _first_crossing(t, f, threshold):
    if f[0] <= threshold:
        return float(t[0])
    below = np.nonzero(f <= threshold)[0]
    if len(below) == 0:
        return None
    k = below[0]
    f0, f1 = f[k - 1], f[k]
    t0, t1 = t[k - 1], t[k]
    if f1 == f0:
        return float(t1)
    return float(t0 + (threshold - f0) * (t1 - t0) / (f1 - f0))


def _max_rocof(t, f, window):
    if len(t) < 2:
        return 0.0
    worst = 0.0
    j = 0
    for i in range(len(t)):
        tj = t[i] + window
        while j < len(t) and t[j] < tj - 1e-12:
            j += 1
        if j >= len(t):
            break
        dt = t[j] - t[i]
        if dt <= 0:
            continue
        worst = max(worst, abs(f[j] - f[i]) / dt)
    return float(worst)


def _settling_time(t, f, f_nom=60.0, band=SETTLE_BAND_HZ):
    inside = np.abs(f - f_nom) <= band
    if not inside[-1]:
        return None
    out = np.nonzero(~inside)[0]
    if len(out) == 0:
        return float(t[0])
    return float(t[out[-1] + 1])


def _osc_period(t, f, span=5.0):
    sel = t >= t[-1] - span
    tw, fw = t[sel], f[sel]
    centered = fw - np.mean(fw)
    ups = []
    for k in range(1, len(centered)):
        if centered[k - 1] < 0.0 <= centered[k]:
            frac = -centered[k - 1] / (centered[k] - centered[k - 1])
            ups.append(tw[k - 1] + frac * (tw[k] - tw[k - 1]))
    if len(ups) < 2:
        return None
    return float((ups[-1] - ups[0]) / (len(ups) - 1))


def classify_stability(t, freq, t_last_event=0.0, terminated_early=False):
    """stable / unstable / collapsed for a frequency trace in Hz.

    Collapsed if the run ended early or the trace leaves the sane band;
    otherwise the peak-to-peak excursion in the final window decides, and
    the trace must cover at least 5 s beyond the last event.
    """
    if terminated_early:
        return "collapsed"
    if np.any(freq < FREQ_SANE_BAND[0]) or np.any(freq > FREQ_SANE_BAND[1]):
        return "collapsed"
    if t[-1] - t_last_event < 5.0 - 1e-9:
        raise MetricsError(
            f"trace must cover 5 s after the last event "
            f"(has {t[-1] - t_last_event:.2f} s)"
        )
    sel = t >= t[-1] - STABILITY_WINDOW_S
    if not np.any(sel):
        raise MetricsError("final window longer than trace")
    p2p = float(np.max(freq[sel]) - np.min(freq[sel]))
    return "stable" if p2p < SETTLE_BAND_HZ else "unstable"


def final_window_amplitude(result, device, window=STABILITY_WINDOW_S):
    """Peak-to-peak frequency excursion over the trace's final window."""
    rec = result.device(device) if isinstance(device, str) else device
    sel = result.t >= result.t[-1] - window
    f = rec.freq[sel]
    return float(np.max(f) - np.min(f))


# The short-circuit exchange of a machine spans the fault itself plus the
# electromechanical clearing swing in which the stored rotor energy
# discharges back into the grid.
FAULT_WINDOW_TAIL_S = 0.25


def fault_window(result):
    """(t_apply, t_clear + tail) of the first fault in the event log."""
    t_apply = t_clear = None
    for t, desc in result.events_applied:
        if desc.startswith("apply_fault") and t_apply is None:
            t_apply = t
        elif desc.startswith("clear_fault") and t_apply is not None:
            t_clear = t
            break
    if t_apply is None:
        raise MetricsError("no fault in event log")
    t_end = t_clear + FAULT_WINDOW_TAIL_S if t_clear is not None else result.t[-1]
    return t_apply, min(t_end, result.t[-1])


def fault_window_series(result, device):
    """(t, p, q, v_mag) of a device restricted to the first fault window."""
    rec = result.device(device)
    t0, t1 = fault_window(result)
    sel = (result.t >= t0 - 1e-12) & (result.t <= t1 + 1e-12)
    v = result.v_mag[sel, rec.bus]
    return result.t[sel], rec.p[sel], rec.q[sel], v


def peak_fault_apparent_power(result, device):
    _, p, q, _ = fault_window_series(result, device)
    return float(np.max(np.hypot(p, q)))


def peak_fault_current(result, device):
    _, p, q, v = fault_window_series(result, device)
    s = np.hypot(p, q)
    vm = np.maximum(v, 1e-9)
    return float(np.max(s / vm))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def csv_columns(result):
    cols = ["t"]
    for name in result.bus_names:
        cols.append(f"vmag_{name}")
        cols.append(f"vang_{name}")
    for dev in result.devices:
        cols.extend(
            f"{sig}_{dev.name}" for sig in ("p", "q", "freq", "delta", "online")
        )
    return cols


def export_csv(result, path):
    """One header row plus one row per recorded step, full float precision.

    Column order is fixed: t, per-bus voltage magnitude/angle, then the five
    per-device series in placement order. Deterministic byte-for-byte for
    identical results.
    """
    cols = csv_columns(result)
    n = len(result.t)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(n):
            row = [repr(float(result.t[k]))]
            for b in range(len(result.bus_names)):
                row.append(repr(float(result.v_mag[k, b])))
                row.append(repr(float(result.v_ang[k, b])))
            for dev in result.devices:
                row.append(repr(float(dev.p[k])))
                row.append(repr(float(dev.q[k])))
                row.append(repr(float(dev.freq[k])))
                row.append(repr(float(dev.delta[k])))
                row.append(repr(float(dev.online[k])))
            fh.write(",".join(row) + "\n")
    return path


# ---------------------------------------------------------------------------
# Reporting device: the trace the per-case metrics file describes
# ---------------------------------------------------------------------------

def reporting_device(spec_or_result):
    """Device whose frequency trace represents the case in summaries: the
    first synchronous generator if any, else the last GFL (the bus-3 plant
    in the catalog cases), else the first device."""
    if isinstance(spec_or_result, ScenarioSpec):
        kinds = [(p.kind, p.name) for p in spec_or_result.placements]
    else:
        kinds = [(d.kind, d.name) for d in spec_or_result.devices]
    for kind, name in kinds:
        if kind == "sync_gen":
            return name
    gfls = [name for kind, name in kinds if kind == "gfl"]
    if gfls:
        return gfls[-1]
    return kinds[0][1]


def power_balance_residuals(result, spec):
    """Complex power balance | S_devices - S_loads - S_network | at every
    recorded step, reconstructed purely from logged quantities plus the
    network data and event log."""
    net = resolve_network(spec.network)
    from .netmodel import build_ybus, load_scale

    y_base = build_ybus(net.buses, net.branches).to_dense()

    # reconstruct the fault state over time from the event log
    fault_changes = []
    stack = []
    for t, desc in result.events_applied:
        if desc.startswith("apply_fault"):
            bus = int(desc.split("bus=")[1].split(" ")[0])
            y = complex(desc.split("y=")[1])
            stack.append((bus, y))
            fault_changes.append((t, bus, y))
        elif desc.startswith("clear_fault"):
            bus, y = stack.pop()
            fault_changes.append((t, bus, -y))

    residuals = np.empty(len(result.t))
    for k, t in enumerate(result.t):
        y = y_base.copy()
        for tt, bus, dy in fault_changes:
            if bus is not None and tt <= t + 1e-12:
                y[bus, bus] += dy
        v = result.v_mag[k] * np.exp(1j * result.v_ang[k])
        s_dev = 0.0 + 0.0j
        for dev in result.devices:
            s_dev += complex(dev.p[k], dev.q[k])
        s_load = 0.0 + 0.0j
        for b in net.buses:
            if b.load_p or b.load_q:
                s_load += complex(b.load_p, b.load_q) * load_scale(
                    result.v_mag[k, b.id]
                )
        s_net = np.sum(v * np.conj(y @ v))
        residuals[k] = abs(s_dev - s_load - s_net)
    return residuals
