"""Grid-following inverter: SRF phase-locked loop, active/reactive droop,
limited current-source injection and latching trip logic.

The PLL angle state is kept in the synchronously rotating network frame (it
houses the PLL's electrical angle relative to the nominal-frequency frame),
so a locked PLL tracking a constant phasor has a constant angle state and
unity per-unit frequency. The instantaneous electrical angle advances at
omega_base * omega_pll.

Droop set points, gains and current limits are in per unit on the device
rating; the engine rescales injected current to the system base.
"""

import cmath
import math
from dataclasses import dataclass

# PLL gains for a 5 Hz closed-loop bandwidth at zeta = 0.7 and 1 pu voltage:
# the linearized loop is s^2 + kp*V*s + ki*V, so ki = wn^2, kp = 2*zeta*wn.
# Plant-level tracking bandwidth; faster loops spin the injection angle hard
# enough after switching events to destabilize the algebraic network.
_WN_PLL = 2.0 * math.pi * 5.0
DEFAULT_KI_PLL = _WN_PLL * _WN_PLL
DEFAULT_KP_PLL = 2.0 * 0.7 * _WN_PLL

# Reactive current takes priority over active below this terminal voltage.
REACTIVE_PRIORITY_BELOW = 0.9
# Voltage magnitude floor applied in the current-command division.
V_COMMAND_FLOOR = 0.1
# Below this terminal voltage the PLL freezes (flywheel on its last state)
# and the current command is issued in the frozen PLL frame: ride-through
# behavior during voltage dips, when the measured angle carries little
# usable grid information. Matches the voltage-dip entry threshold of
# standard ride-through logic.
V_PLL_FREEZE = 0.5


class GflModelError(Exception):
    """Invalid inverter parameters."""


@dataclass(frozen=True)
class GflParams:
    rated_mva: float
    p_set: float = 0.0
    q_set: float = 0.0
    m_p: float = 20.0
    m_q: float = 5.0
    omega_n: float = 1.0
    v_n: float = 1.0
    kp_pll: float = DEFAULT_KP_PLL
    ki_pll: float = DEFAULT_KI_PLL
    i_max: float = 1.2
    t_i: float = 0.010
    k_rt: float = 2.0
    iq_withdraw_rate: float = 3.0
    v_dip: float = V_PLL_FREEZE
    t_fmeas: float = 0.010
    f_trip_lo: float = 57.0
    f_trip_hi: float = 63.0
    v_trip_lo: float = 0.1
    v_trip_hi: float = 1.0e9
    t_trip: float = 0.15

    def __post_init__(self):
        if self.i_max < 1.0:
            raise GflModelError("i_max must be at least 1 pu")
        if self.m_p < 0 or self.m_q < 0:
            raise GflModelError("droop gains must be nonnegative")
        if self.ki_pll <= 0:
            raise GflModelError("ki_pll must be positive")
        if not (self.f_trip_lo < 60.0 < self.f_trip_hi):
            raise GflModelError("trip band must bracket 60 Hz")
        if self.t_i <= 0 or self.t_trip <= 0:
            raise GflModelError("t_i and t_trip must be positive")


@dataclass
class GflState:
    theta_pll: float = 0.0
    pll_integ: float = 0.0
    omega_pll: float = 1.0
    freq_meas: float = 1.0
    id_filt: float = 0.0
    iq_filt: float = 0.0
    online: bool = True
    trip_timer: float = 0.0


def voltage_in_pll_frame(state, v_terminal):
    return v_terminal * cmath.exp(-1j * state.theta_pll)


def pll_frequency(params, state, v_terminal, omega_base):
    """Instantaneous per-unit frequency estimate of the PLL; rides on the
    integrator alone while the PLL is frozen by a deep voltage dip."""
    if abs(v_terminal) < params.v_dip:
        return 1.0 + state.pll_integ / omega_base
    v_q = voltage_in_pll_frame(state, v_terminal).imag
    return 1.0 + (params.kp_pll * v_q + state.pll_integ) / omega_base


def pll_derivs(params, state, v_terminal, omega_base):
    """(dtheta_pll/dt, dpll_integ/dt) for the SRF-PLL.

    v_q is the terminal-voltage component orthogonal to the PLL frame. In a
    deep dip (|v| below V_PLL_FREEZE, bolted faults included) the loop holds
    its state and free-wheels on the integrator.
    """
    if abs(v_terminal) < params.v_dip:
        return state.pll_integ, 0.0
    v_q = voltage_in_pll_frame(state, v_terminal).imag
    omega_pll = 1.0 + (params.kp_pll * v_q + state.pll_integ) / omega_base
    dtheta = omega_base * (omega_pll - 1.0)
    dinteg = params.ki_pll * v_q
    return dtheta, dinteg


def droop_targets(params, omega_pll, v_mag):
    """Active/reactive power targets from the frequency and voltage droop."""
    p_star = params.p_set + (params.omega_n - omega_pll) * params.m_p
    q_star = params.q_set + (params.v_n - v_mag) * params.m_q
    return p_star, q_star


def current_command(params, p_star, q_star, v_pll):
    """Complex current command in the PLL frame, magnitude-limited.

    The command is conj((p* + j q*)/v) with the voltage magnitude floored at
    V_COMMAND_FLOOR; above REACTIVE_PRIORITY_BELOW the active component is
    preserved under the limit, below it the reactive component is. During a
    deep dip the command is issued on the (frozen) PLL d-axis instead of the
    measured voltage direction.
    """
    vm = abs(v_pll)
    vm_eff = max(vm, V_COMMAND_FLOOR)
    v_unit = v_pll / vm if vm >= V_PLL_FREEZE else 1.0 + 0.0j
    i_active = p_star / vm_eff
    i_reactive = q_star / vm_eff

    if math.hypot(i_active, i_reactive) > params.i_max:
        if vm < REACTIVE_PRIORITY_BELOW:
            i_reactive = _clip(i_reactive, params.i_max)
            room = math.sqrt(max(params.i_max**2 - i_reactive**2, 0.0))
            i_active = _clip(i_active, room)
        else:
            i_active = _clip(i_active, params.i_max)
            room = math.sqrt(max(params.i_max**2 - i_active**2, 0.0))
            i_reactive = _clip(i_reactive, room)

    return complex(i_active, -i_reactive) * v_unit


def _clip(value, limit):
    return max(-limit, min(limit, value))


def ride_through_command(params, v_mag):
    """Current command during a voltage dip, on the frozen PLL d-axis.

    Grid-code style ride-through: reactive current proportional to the dip
    depth below the dip threshold (gain k_rt) on top of the dispatch set
    point; active current backs off linearly with depth and is fully
    suppressed at the command floor (power tracking is suspended and active
    output curtailed in deep dips). Both components stay within the
    magnitude limit with reactive priority.
    """
    i_reactive = params.q_set / params.v_n + params.k_rt * (params.v_dip - v_mag)
    depth = (v_mag - V_COMMAND_FLOOR) / max(params.v_dip - V_COMMAND_FLOOR, 1e-9)
    depth = min(max(depth, 0.0), 1.0)
    i_active = (params.p_set / params.v_n) * depth**3
    if math.hypot(i_active, i_reactive) > params.i_max:
        i_reactive = _clip(i_reactive, params.i_max)
        room = math.sqrt(max(params.i_max**2 - i_reactive**2, 0.0))
        i_active = _clip(i_active, room)
    return complex(i_active, -i_reactive)


def command_lag_derivs(params, state, i_cmd):
    """First-order lag of the filtered current states toward the command.

    The reactive component is rate-limited in the withdrawal direction
    (toward less capacitive injection): support comes on at the full loop
    speed but is taken away no faster than iq_withdraw_rate, so the grid is
    not deprived of vars in a step change.
    """
    did = (i_cmd.real - state.id_filt) / params.t_i
    diq = (i_cmd.imag - state.iq_filt) / params.t_i
    if diq > params.iq_withdraw_rate:
        diq = params.iq_withdraw_rate
    return did, diq


def injected_current(state):
    """Device-base complex current injected into the network frame; exactly
    zero once the device has tripped."""
    if not state.online:
        return 0.0 + 0.0j
    return complex(state.id_filt, state.iq_filt) * cmath.exp(1j * state.theta_pll)


# Phase error beyond which the loop reacquires by snapping to the measured
# angle instead of slewing (the RMS idealization of a hardware PLL's
# sub-cycle reacquisition after a lost lock / cycle slip).
RESYNC_ANGLE = 0.35


def ride_through_update(params, state, v_bus, dt):
    """Reacquisition check across one step boundary.

    Outside a dip, a phase error larger than RESYNC_ANGLE snaps the PLL
    angle onto the measured bus angle; the integrator (frequency memory) is
    kept. Returns True when the snap changed the injection angle
    discontinuously. Inside a dip the PLL stays frozen (see pll_derivs).
    """
    if not state.online:
        return False
    vm = abs(v_bus)
    if vm < params.v_dip or vm < 1e-6:
        return False
    err = cmath.phase(v_bus * cmath.exp(-1j * state.theta_pll))
    if abs(err) > RESYNC_ANGLE:
        state.theta_pll = cmath.phase(v_bus)
        return True
    return False


def measured_frequency_update(params, state, dt):
    """One-pole measurement filter on the PLL frequency estimate: what a
    frequency relay or recorder reports (a step in the raw estimate takes
    milliseconds to register)."""
    if dt > 0.0:
        a = dt / (params.t_fmeas + dt)
        state.freq_meas += (state.omega_pll - state.freq_meas) * a
    return state.freq_meas


def trip_check(params, state, v_mag, dt):
    """Advance the trip timer and latch the device offline if the measured
    frequency or terminal voltage has been out of bounds for t_trip."""
    if not state.online:
        return False
    f_hz = state.freq_meas * 60.0
    healthy = (params.f_trip_lo <= f_hz <= params.f_trip_hi) and (
        params.v_trip_lo <= v_mag <= params.v_trip_hi
    )
    if healthy:
        state.trip_timer = 0.0
    else:
        state.trip_timer += dt
        if state.trip_timer >= params.t_trip:
            state.online = False
            state.id_filt = 0.0
            state.iq_filt = 0.0
            return True
    return state.online


def init_locked(params, v_terminal, p_inj, q_inj):
    """State locked on `v_terminal` and injecting exactly (p_inj, q_inj) on
    the device base: the angle tracks the bus, the integrator is at rest and
    the filtered current equals the unlimited command."""
    theta = cmath.phase(v_terminal)
    state = GflState(theta_pll=theta, pll_integ=0.0, omega_pll=1.0)
    v_pll = voltage_in_pll_frame(state, v_terminal)
    i_cmd = current_command(params, p_inj, q_inj, v_pll)
    state.id_filt = i_cmd.real
    state.iq_filt = i_cmd.imag
    return state
