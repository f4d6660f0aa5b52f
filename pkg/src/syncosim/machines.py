"""Synchronous machine dynamics shared by generators and condensers.

Model: swing equation plus a two-axis electrical model with transient and
subtransient emf states behind (ra, x''), and a solid-state (ST1A-style)
excitation system. A condenser is the same machine with zero mechanical
power, so a positive electrical power absorbed from the network accelerates
the rotor.

dq conventions used throughout this module: for any network phasor F and
rotor angle delta, f_q = Re(F e^{-j delta}) and f_d = -Im(F e^{-j delta}).
Stator currents i_d, i_q are measured flowing INTO the machine, and the
d-axis transient emf e'_d is defined with the sign that makes the emf
equations below self-consistent:

    T'd0 de'q/dt = efd - e'q + (xd - x'd) id
    T'q0 de'd/dt =     - e'd + (xq - x'q) iq
    T''d0 de''q/dt = e'q - e''q + (x'd - x''d) id
    T''q0 de''d/dt = -e'd - e''d - (x'q - x''q) iq

Per-unit quantities are on whatever base the parameter set carries; the
scenario loader converts machine-base data to the system base once, so all
runtime math is single-base.
"""

import cmath
import math
from dataclasses import dataclass, replace

TWO_PI = 2.0 * math.pi


class MachineModelError(Exception):
    """Degenerate or inconsistent machine parameters / misuse of a mode."""


@dataclass(frozen=True)
class MachineParams:
    rated_mva: float
    h: float                 # inertia constant, s, on rated_mva
    d: float = 0.0           # damping torque coefficient, pu/pu speed
    ra: float = 0.0
    xd: float = 1.80
    xq: float = 1.70
    xd_p: float = 0.30
    xq_p: float = 0.55
    xd_pp: float = 0.22
    xq_pp: float = 0.22
    xl: float = 0.15
    td0_p: float = 8.0
    tq0_p: float = 0.40
    td0_pp: float = 0.03
    tq0_pp: float = 0.05
    mode: str = "generator"  # generator | condenser

    def __post_init__(self):
        if self.mode not in ("generator", "condenser"):
            raise MachineModelError(f"unknown machine mode {self.mode!r}")
        if self.h <= 0 or self.rated_mva <= 0:
            raise MachineModelError("h and rated_mva must be positive")
        if not (self.xd >= self.xd_p >= self.xd_pp > self.xl >= 0):
            raise MachineModelError("need xd >= xd_p >= xd_pp > xl >= 0")
        if not (self.xq >= self.xq_p >= self.xq_pp > self.xl):
            raise MachineModelError("need xq >= xq_p >= xq_pp > xl")
        if self.xd_pp != self.xq_pp:
            # The network interface is a single subtransient admittance
            # 1/(ra + j xd_pp); subtransient saliency is not supported.
            raise MachineModelError("xd_pp and xq_pp must be equal")
        if min(self.td0_p, self.tq0_p, self.td0_pp, self.tq0_pp) <= 0:
            raise MachineModelError("time constants must be positive")

    def to_base(self, from_mva, to_mva):
        """Rescale impedances, inertia and damping to another MVA base."""
        zr = to_mva / from_mva
        return replace(
            self,
            ra=self.ra * zr,
            xd=self.xd * zr,
            xq=self.xq * zr,
            xd_p=self.xd_p * zr,
            xq_p=self.xq_p * zr,
            xd_pp=self.xd_pp * zr,
            xq_pp=self.xq_pp * zr,
            xl=self.xl * zr,
            h=self.h / zr,
            d=self.d / zr,
        )


@dataclass
class MachineState:
    delta: float = 0.0
    omega: float = 1.0
    eq_p: float = 0.0
    ed_p: float = 0.0
    eq_pp: float = 0.0
    ed_pp: float = 0.0


@dataclass
class ExciterST1A:
    tr: float = 0.02
    ka: float = 200.0
    efd_min: float = -8.0
    efd_max: float = 8.0
    vref: float = 1.0
    v_meas: float = 1.0
    efd: float = 0.0

    def output(self, v_meas=None):
        """Field voltage demanded at the measured voltage, within limits."""
        vm = self.v_meas if v_meas is None else v_meas
        raw = self.ka * (self.vref - vm)
        return min(self.efd_max, max(self.efd_min, raw))


@dataclass(frozen=True)
class FluxDecomposition:
    psi_pre: float
    psi_post: float
    psi_forced: float

    def reconstructed(self):
        return self.psi_forced + self.psi_post


def flux_decomposition(psi_pre, psi_post):
    """Split a pre-disturbance flux linkage into its post value plus the
    transiently forced component (constant-flux-linkage bookkeeping)."""
    if not (math.isfinite(psi_pre) and math.isfinite(psi_post)):
        raise MachineModelError("flux linkages must be finite")
    return FluxDecomposition(psi_pre, psi_post, psi_pre - psi_post)


def dq_project(phasor, delta):
    """(f_d, f_q) components of a network phasor in the rotor frame."""
    rot = phasor * cmath.exp(-1j * delta)
    return -rot.imag, rot.real


def internal_emf(state):
    """Subtransient emf phasor in the network frame."""
    return complex(state.eq_pp, -state.ed_pp) * cmath.exp(1j * state.delta)


def terminal_current_out(params, state, v_terminal):
    """Stator current flowing out of the machine into the network."""
    return (internal_emf(state) - v_terminal) / complex(params.ra, params.xd_pp)


def electrical_power(params, state, v_terminal):
    """(p_e, q_e) delivered by the subtransient emf source, generator sign.

    p_e is the air-gap power used by the swing equation; for ra = 0 it equals
    the terminal power.
    """
    i_out = terminal_current_out(params, state, v_terminal)
    s = internal_emf(state) * i_out.conjugate()
    return s.real, s.imag


def terminal_power(params, state, v_terminal):
    """(p, q) at the machine terminal, generator sign convention."""
    i_out = terminal_current_out(params, state, v_terminal)
    s = v_terminal * i_out.conjugate()
    return s.real, s.imag


def norton_equivalent(params, state):
    """(source current, shunt admittance) replacing the machine in the
    network solve. Combining them reproduces the stator interface exactly:
    I_out = I_src - Y*V."""
    y = 1.0 / complex(params.ra, params.xd_pp)
    return internal_emf(state) * y, y


def machine_derivs(params, state, efd, v_terminal, p_mech, omega_base):
    """Time derivatives of the six machine states.

    Returns (ddelta, domega, deq_p, ded_p, deq_pp, ded_pp). `efd` is the
    (already limited) field voltage, `p_mech` the shaft power input.
    """
    i_out = terminal_current_out(params, state, v_terminal)
    p_e = (internal_emf(state) * i_out.conjugate()).real
    i_d, i_q = dq_project(-i_out, state.delta)

    ddelta = omega_base * (state.omega - 1.0)
    domega = (
        p_mech - p_e - params.d * (state.omega - 1.0)
    ) / (2.0 * params.h)
    deq_p = (efd - state.eq_p + (params.xd - params.xd_p) * i_d) / params.td0_p
    ded_p = (-state.ed_p + (params.xq - params.xq_p) * i_q) / params.tq0_p
    deq_pp = (
        state.eq_p - state.eq_pp + (params.xd_p - params.xd_pp) * i_d
    ) / params.td0_pp
    ded_pp = (
        -state.ed_p - state.ed_pp - (params.xq_p - params.xq_pp) * i_q
    ) / params.tq0_pp
    return ddelta, domega, deq_p, ded_p, deq_pp, ded_pp


def condenser_derivs(params, state, efd, v_terminal, omega_base):
    """machine_derivs with zero shaft power; condensers only."""
    if params.mode != "condenser":
        raise MachineModelError("condenser_derivs requires mode='condenser'")
    return machine_derivs(params, state, efd, v_terminal, 0.0, omega_base)


def exciter_derivs(exciter, v_terminal_mag):
    """(dv_meas/dt, limited efd) for the measurement lag + static gain."""
    if v_terminal_mag < 0:
        raise MachineModelError("voltage magnitude must be nonnegative")
    dv_meas = (v_terminal_mag - exciter.v_meas) / exciter.tr
    return dv_meas, exciter.output()


def init_from_terminal(params, v_terminal, s_terminal, exciter=None):
    """Back-solve machine states from a terminal operating point.

    Given the complex terminal voltage and the complex power delivered to the
    network (generator sign; condensers have Re(s) ~ 0), returns
    (MachineState, efd, p_mech) at exact equilibrium: all derivatives vanish.
    If an exciter is given, its v_meas/vref/efd are set consistently.
    """
    if abs(v_terminal) < 1e-9:
        raise MachineModelError("cannot initialize at zero terminal voltage")
    i_out = (s_terminal / v_terminal).conjugate()
    e_loc = v_terminal + complex(params.ra, params.xq) * i_out
    delta = cmath.phase(e_loc)
    i_d, i_q = dq_project(-i_out, delta)
    v_d, v_q = dq_project(v_terminal, delta)

    efd = v_q - params.ra * i_q - params.xd * i_d
    eq_p = efd + (params.xd - params.xd_p) * i_d
    ed_p = (params.xq - params.xq_p) * i_q
    eq_pp = eq_p + (params.xd_p - params.xd_pp) * i_d
    ed_pp = -ed_p - (params.xq_p - params.xq_pp) * i_q

    state = MachineState(
        delta=delta, omega=1.0,
        eq_p=eq_p, ed_p=ed_p, eq_pp=eq_pp, ed_pp=ed_pp,
    )
    p_e, _ = electrical_power(params, state, v_terminal)
    p_mech = 0.0 if params.mode == "condenser" else p_e

    if exciter is not None:
        exciter.v_meas = abs(v_terminal)
        exciter.vref = exciter.v_meas + efd / exciter.ka
        exciter.efd = efd
        if not (exciter.efd_min <= efd <= exciter.efd_max):
            raise MachineModelError(
                f"equilibrium field voltage {efd:.3f} pu outside exciter limits"
            )
    return state, efd, p_mech


def analytic_freq_dev(m, delta_pe, t, f_base=60.0):
    """Frequency deviation in Hz of a free rotor under a constant power
    imbalance: delta_f(t) = delta_pe * t / (2 pi m)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return delta_pe * t / (TWO_PI * m)


def analytic_angle(m, delta_pe, t, delta0=0.0):
    """Electrical angle in rad under a constant power imbalance.

    Double integration of the acceleration delta_pe / m gives
    delta(t) = delta0 + delta_pe * t^2 / (2 m).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    return delta0 + delta_pe * t * t / (2.0 * m)


def angular_momentum(h, omega_base):
    """Momentum M (pu power * s^2/rad) equivalent to inertia constant h:
    the per-unit swing law domega/dt = delta_pe/(2h) rewritten in angle
    units gives M = 2 h / omega_base."""
    return 2.0 * h / omega_base


def initial_fault_current(params, v_prefault, i_prefault):
    """Subtransient current magnitude for a bolted terminal fault.

    The internal emf is back-computed from the prefault terminal condition,
    then |I''| = |E''| / xd_pp.
    """
    e_pp = v_prefault + complex(params.ra, params.xd_pp) * i_prefault
    return abs(e_pp) / params.xd_pp
