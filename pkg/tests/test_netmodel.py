"""Network model tests: admittance assembly, fault bookkeeping, power flow
against independent oracles, and the dynamic network solve."""

import cmath

import numpy as np
import pytest

from syncosim.netmodel import (
    Branch,
    Bus,
    NetworkDivergence,
    NetworkError,
    NetworkModel,
    PowerFlowError,
    apply_fault,
    build_ybus,
    load_scale,
    network_solve_dynamic,
    solve_power_flow,
)
from syncosim.scenarios import wscc9_network


def two_bus():
    return (
        [Bus(0, "A", 230.0), Bus(1, "B", 230.0)],
        [Branch(0, 1, 0.0, 0.1, 0.0)],
    )


def ybus_oracle(buses, branches):
    """Brute-force element-by-element assembly, written independently of
    build_ybus: loop every branch, stamp the standard pi model."""
    n = len(buses)
    y = np.zeros((n, n), dtype=complex)
    for br in branches:
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_shunt
        t = br.tap
        f, to = br.from_bus, br.to_bus
        y[f, f] += (ys + bc) / t**2
        y[to, to] += ys + bc
        y[f, to] -= ys / t
        y[to, f] -= ys / t
    return y


class TestBuildYbus:
    def test_two_bus_hand_values(self):
        buses, branches = two_bus()
        y = build_ybus(buses, branches).to_dense()
        expected = np.array([[-10j, 10j], [10j, -10j]])
        assert np.allclose(y, expected, atol=1e-14)

    def test_single_bus_no_branches(self):
        y = build_ybus([Bus(0, "A", 230.0)], [])
        assert y.to_dense().shape == (1, 1)
        assert y.to_dense()[0, 0] == 0.0

    def test_nine_bus_matches_oracle(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches).to_dense()
        assert np.max(np.abs(y - ybus_oracle(net.buses, net.branches))) < 1e-12

    def test_symmetric_for_unit_taps(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches).to_dense()
        assert np.max(np.abs(y - y.T)) < 1e-14

    def test_disconnected_network_lists_islands(self):
        buses = [Bus(i, f"B{i}", 230.0) for i in range(4)]
        branches = [Branch(0, 1, 0.0, 0.1), Branch(2, 3, 0.0, 0.1)]
        with pytest.raises(NetworkError, match=r"islands.*\[0, 1\].*\[2, 3\]"):
            build_ybus(buses, branches)


class TestApplyFault:
    def test_zero_admittance_is_identity(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches)
        yf = apply_fault(y, 5, 0.0 + 0.0j)
        assert np.array_equal(yf.to_dense(), y.to_dense())

    def test_near_bolted_increments_diagonal(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches)
        yf = apply_fault(y, 6, 1e6 + 0.0j)
        d = yf.to_dense() - y.to_dense()
        assert d[6, 6] == 1e6
        d[6, 6] = 0.0
        assert np.count_nonzero(d) == 0

    def test_clearing_restores_bit_exactly(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches)
        y0 = y.to_dense()
        yf = apply_fault(y, 5, 1e6 + 0.0j)
        yc = apply_fault(yf, 5, -(1e6 + 0.0j))
        yr = yc.to_dense()
        assert all(
            yr[i, j] == y0[i, j] for i in range(9) for j in range(9)
        )

    def test_bad_bus_rejected(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches)
        with pytest.raises(NetworkError):
            apply_fault(y, 99, 1.0 + 0.0j)


def gauss_seidel_oracle(net, dispatch, tol=1e-10, max_iter=20000):
    """Independent Gauss-Seidel power flow used only as a reference."""
    n = net.n_bus
    y = build_ybus(net.buses, net.branches).to_dense()
    roles = [b.init_role for b in net.buses]
    s_load = net.load_vector()
    p_inj = np.zeros(n)
    q_inj = np.zeros(n)
    vm_t = np.ones(n)
    for i, spec in dispatch.items():
        p_inj[i] += spec.get("p", 0.0)
        q_inj[i] += spec.get("q", 0.0)
        if "v" in spec:
            vm_t[i] = spec["v"]
    s_sched = (p_inj - s_load.real) + 1j * (q_inj - s_load.imag)
    v = np.array([vm_t[i] if roles[i] != "pq" else 1.0 + 0j for i in range(n)])
    for _ in range(max_iter):
        v_old = v.copy()
        for i in range(n):
            if roles[i] == "slack":
                continue
            if roles[i] == "pv":
                q_i = (v[i] * np.conj(y[i] @ v)).imag
                s_i = s_sched[i].real + 1j * q_i
            else:
                s_i = s_sched[i]
            tot = y[i] @ v - y[i, i] * v[i]
            v_new = (np.conj(s_i / v[i]) - tot) / y[i, i]
            if roles[i] == "pv":
                v_new = vm_t[i] * v_new / abs(v_new)
            v[i] = v_new
        if np.max(np.abs(v - v_old)) < tol:
            break
    return v


def wscc9_dispatch():
    return {
        0: {"v": 1.04},
        1: {"p": 1.63, "v": 1.025},
        2: {"p": 0.85, "v": 1.025},
    }


class TestSolvePowerFlow:
    def test_unloaded_network_is_flat(self):
        # no loads and no line charging: every bus at 1.0 angle 0, no flows
        buses = [
            Bus(0, "A", 230.0, init_role="slack"),
            Bus(1, "B", 230.0, init_role="pv"),
            Bus(2, "C", 230.0, init_role="pq"),
        ]
        branches = [Branch(0, 1, 0.01, 0.1), Branch(1, 2, 0.02, 0.15)]
        net = NetworkModel(buses=buses, branches=branches)
        pf = solve_power_flow(
            net, {0: {"v": 1.0}, 1: {"p": 0.0, "v": 1.0}}
        )
        assert pf.converged
        assert np.max(np.abs(pf.v_mag - 1.0)) < 1e-9
        assert np.max(np.abs(pf.v_ang)) < 1e-9
        assert abs(pf.gen_p[0]) < 1e-9

    def test_nine_bus_matches_gauss_seidel(self):
        net = wscc9_network()
        net.buses[0].init_role = "slack"
        net.buses[1].init_role = "pv"
        net.buses[2].init_role = "pv"
        dispatch = wscc9_dispatch()
        pf = solve_power_flow(net, dispatch, tol=1e-10)
        v_ref = gauss_seidel_oracle(net, dispatch)
        v_nr = pf.complex_voltage()
        assert np.max(np.abs(v_nr - v_ref)) < 1e-6

    def test_two_bus_analytic(self):
        # slack 1.0 feeding a 0.5 pu load over x = 0.1: with Q = 0 the
        # receiving voltage satisfies V^4 - V^2 + (P x)^2 = 0.
        buses = [
            Bus(0, "S", 230.0, init_role="slack"),
            Bus(1, "L", 230.0, load_p=0.5, init_role="pq"),
        ]
        branches = [Branch(0, 1, 0.0, 0.1)]
        net = NetworkModel(buses=buses, branches=branches)
        pf = solve_power_flow(net, {0: {"v": 1.0}}, tol=1e-12)
        v_exact = np.sqrt((1.0 + np.sqrt(1.0 - 4.0 * (0.5 * 0.1) ** 2)) / 2.0)
        assert abs(pf.v_mag[1] - v_exact) < 1e-10

    def test_mismatch_below_tolerance_at_solution(self):
        net = wscc9_network()
        net.buses[0].init_role = "slack"
        net.buses[1].init_role = "pv"
        net.buses[2].init_role = "pv"
        pf = solve_power_flow(net, wscc9_dispatch(), tol=1e-10)
        y = build_ybus(net.buses, net.branches).to_dense()
        v = pf.complex_voltage()
        s_calc = v * np.conj(y @ v)
        s_spec = np.zeros(9, dtype=complex)
        for i, gp in pf.gen_p.items():
            s_spec[i] += gp + 1j * pf.gen_q[i]
        s_spec -= net.load_vector()
        assert np.max(np.abs(s_calc - s_spec)) < 1e-9

    def test_infeasible_dispatch_raises(self):
        net = wscc9_network(load_scale=10.0)
        net.buses[0].init_role = "slack"
        net.buses[1].init_role = "pv"
        net.buses[2].init_role = "pv"
        with pytest.raises(PowerFlowError, match="mismatch"):
            solve_power_flow(net, wscc9_dispatch())

    def test_two_slacks_rejected(self):
        net = wscc9_network()
        net.buses[0].init_role = "slack"
        net.buses[1].init_role = "slack"
        with pytest.raises(PowerFlowError, match="slack"):
            solve_power_flow(net, wscc9_dispatch())


class TestNetworkSolveDynamic:
    def test_no_loads_matches_dense_inversion(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches).with_diagonal(
            {0: 2.0 - 9.0j, 1: 1.0 - 11.0j}
        )
        i = np.zeros(9, dtype=complex)
        i[0] = 2.0 - 9.0j
        i[1] = 1.1 - 10.0j
        v = network_solve_dynamic(y, i, [])
        v_ref = np.linalg.solve(y.to_dense(), i)
        assert np.max(np.abs(v - v_ref)) < 1e-10

    def test_zero_sources_zero_voltage(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches)
        v = network_solve_dynamic(y, np.zeros(9, dtype=complex), [])
        assert np.max(np.abs(v)) < 1e-12

    def test_converged_solution_balances_power(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches).with_diagonal({1: -9.0j})
        loads = [(4, 1.0 + 0.35j), (5, 0.8 + 0.25j)]
        i = np.zeros(9, dtype=complex)
        i[1] = (1.02 + 0.05j) * -9.0j
        v = network_solve_dynamic(y, i, loads, tol=1e-10)
        s_inj = np.sum(v * np.conj(i - y.to_dense() @ v + y.to_dense() @ v))
        # complex power balance: injection - loads - network absorption
        s_net = np.sum(v * np.conj(y.to_dense() @ v))
        s_load = sum(s * load_scale(abs(v[b])) for b, s in loads)
        s_dev = np.sum(v * np.conj(i))
        assert abs(s_dev - s_load - s_net) < 1e-6

    def test_divergence_carries_last_residual(self):
        net = wscc9_network()
        y = build_ybus(net.buses, net.branches).with_diagonal({1: -2.0j})
        loads = [(4, 60.0 + 20.0j), (5, 40.0 + 10.0j)]
        i = np.zeros(9, dtype=complex)
        i[1] = 0.1 * -2.0j
        # a far-off warm start with no iteration budget cannot converge
        with pytest.raises(NetworkDivergence) as exc:
            network_solve_dynamic(
                y, i, loads, v_guess=np.full(9, 3.0 + 0j), tol=1e-10, max_iter=2
            )
        assert np.isfinite(exc.value.residual)
        assert exc.value.residual > 1e-10


class TestLoadScale:
    def test_constant_power_above_threshold(self):
        assert load_scale(1.0) == 1.0
        assert load_scale(0.95) == 1.0

    def test_impedance_below_lower_threshold(self):
        from syncosim.netmodel import V_BLEND_HI, V_BLEND_LO

        v =  0.5 * V_BLEND_LO
        assert load_scale(v) == pytest.approx((v / V_BLEND_HI) ** 2)

    def test_continuous_at_thresholds(self):
        from syncosim.netmodel import V_BLEND_HI, V_BLEND_LO

        eps = 1e-9
        assert load_scale(V_BLEND_HI - eps) == pytest.approx(
            load_scale(V_BLEND_HI + eps), abs=1e-6
        )
        assert load_scale(V_BLEND_LO - eps) == pytest.approx(
            load_scale(V_BLEND_LO + eps), abs=1e-6
        )


class TestDataValidation:
    def test_noncontiguous_bus_ids_rejected(self):
        with pytest.raises(NetworkError, match="contiguous"):
            NetworkModel(
                buses=[Bus(0, "A", 230.0), Bus(2, "B", 230.0)], branches=[]
            )

    def test_self_loop_branch_rejected(self):
        with pytest.raises(NetworkError):
            Branch(1, 1, 0.0, 0.1)

    def test_zero_impedance_branch_rejected(self):
        with pytest.raises(NetworkError):
            Branch(0, 1, 0.0, 0.0)
