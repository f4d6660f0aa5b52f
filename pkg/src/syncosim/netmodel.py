"""Static network model: buses, branches, admittance matrix, power flow and
the algebraic network solve used at every integration stage.

All quantities are in per unit on a common system base (100 MVA unless stated
otherwise). Bus ids are contiguous integers starting at 0.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

# Constant-power load restoration is singular as V -> 0 and loses its
# operating point below the transfer-limit nose, so below V_BLEND_HI the load
# power fades linearly into a constant-impedance characteristic anchored at
# V_BLEND_HI; below V_BLEND_LO the load is pure impedance. The upper
# threshold follows the load-conversion convention of production dynamic
# simulators (constant-MVA relief around 0.7 pu).
V_BLEND_HI = 0.93
V_BLEND_LO = 0.60


class NetworkError(Exception):
    """Invalid network data (bad ids, disconnected islands, ...)."""


class PowerFlowError(Exception):
    """Power flow failed to converge."""


class NetworkDivergence(Exception):
    """The dynamic network solve diverged (voltage collapse)."""

    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"network solve diverged after {iterations} iterations "
            f"(last residual {residual:.3e} pu)"
        )


@dataclass
class Bus:
    id: int
    name: str
    base_kv: float
    load_p: float = 0.0
    load_q: float = 0.0
    init_role: str = "pq"  # slack | pv | pq

    def __post_init__(self):
        if self.init_role not in ("slack", "pv", "pq"):
            raise NetworkError(f"bus {self.name}: unknown role {self.init_role!r}")
        if not (np.isfinite(self.load_p) and np.isfinite(self.load_q)):
            raise NetworkError(f"bus {self.name}: load must be finite")


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError("branch endpoints must differ")
        if self.r == 0.0 and self.x == 0.0:
            raise NetworkError("branch needs nonzero series impedance")


@dataclass
class NetworkModel:
    buses: list
    branches: list

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if ids != list(range(len(self.buses))):
            raise NetworkError("bus ids must be contiguous from 0")
        n = len(self.buses)
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise NetworkError(
                    f"branch {br.from_bus}-{br.to_bus} references unknown bus"
                )

    @property
    def n_bus(self):
        return len(self.buses)

    def load_vector(self):
        """Complex constant-power load per bus (pu on system base)."""
        return np.array([b.load_p + 1j * b.load_q for b in self.buses])


class AdmittanceMatrix:
    """Sparse bus admittance matrix with exact fault bookkeeping.

    Entries live in an insertion-ordered dict keyed by (row, col). Fault
    shunts are kept separately from the pristine base entries so that applying
    a fault and later adding its exact negation restores the original matrix
    bit for bit (the modification sums to 0.0 and drops out).
    """

    def __init__(self, n, entries, fault_mods=None):
        self.n = n
        self._base = entries  # dict[(i, j)] -> complex, insertion-ordered
        self._fault_mods = dict(fault_mods) if fault_mods else {}

    def entry(self, i, j):
        v = self._base.get((i, j), 0.0 + 0.0j)
        if i == j and i in self._fault_mods:
            v = v + self._fault_mods[i]
        return v

    def items(self):
        for (i, j), v in self._base.items():
            if i == j and i in self._fault_mods:
                v = v + self._fault_mods[i]
            yield (i, j), v

    def to_dense(self):
        y = np.zeros((self.n, self.n), dtype=complex)
        for (i, j), v in self.items():
            y[i, j] = v
        return y

    def with_fault(self, bus, admittance):
        """Copy with `admittance` added to the diagonal entry of `bus`."""
        if not (0 <= bus < self.n):
            raise NetworkError(f"fault bus {bus} out of range")
        if not np.isfinite(admittance):
            raise NetworkError("fault admittance must be finite")
        mods = dict(self._fault_mods)
        mods[bus] = mods.get(bus, 0.0 + 0.0j) + admittance
        if mods[bus] == 0.0:
            del mods[bus]
        return AdmittanceMatrix(self.n, self._base, mods)

    def with_diagonal(self, shunts):
        """Copy with complex `shunts[bus]` added on the listed diagonals.

        Used to augment the matrix with device Norton admittances; the result
        carries the additions in its base entries.
        """
        base = dict(self._base)
        for bus, y in shunts.items():
            base[(bus, bus)] = base.get((bus, bus), 0.0 + 0.0j) + y
        return AdmittanceMatrix(self.n, base, self._fault_mods)

    def __eq__(self, other):
        if not isinstance(other, AdmittanceMatrix) or self.n != other.n:
            return NotImplemented
        return dict(self.items()) == dict(other.items())


def build_ybus(buses, branches):
    """Assemble the bus admittance matrix from branch data.

    Standard pi-model with off-nominal taps on the from side. Triplets are
    accumulated in sorted (row, col) order so entry values and iteration
    order are deterministic. Raises NetworkError listing the islands if the
    network is disconnected.
    """
    n = len(buses)
    _check_connected(n, branches)

    triplets = {}

    def add(i, j, y):
        triplets[(i, j)] = triplets.get((i, j), 0.0 + 0.0j) + y

    for br in branches:
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_shunt
        t = br.tap
        f, to = br.from_bus, br.to_bus
        add(f, f, (ys + ysh) / (t * t))
        add(to, to, ys + ysh)
        add(f, to, -ys / t)
        add(to, f, -ys / t)

    entries = {k: triplets[k] for k in sorted(triplets)}
    return AdmittanceMatrix(n, entries)


def apply_fault(y, bus, fault_admittance):
    """Return a copy of `y` with `fault_admittance` added at diagonal `bus`."""
    return y.with_fault(bus, fault_admittance)


def _check_connected(n, branches):
    if n <= 1:
        return
    adj = [[] for _ in range(n)]
    for br in branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = [False] * n
    islands = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in adj[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        islands.append(sorted(comp))
    if len(islands) > 1:
        raise NetworkError(f"network is disconnected; islands: {islands}")


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_p: dict
    gen_q: dict
    converged: bool
    iterations: int

    def complex_voltage(self):
        return self.v_mag * np.exp(1j * self.v_ang)


def solve_power_flow(network, dispatch, tol=1e-11, max_iter=40):
    """Newton-Raphson power flow from a flat start.

    `dispatch` maps bus id -> {"p": pu injection, "v": target pu magnitude}.
    Buses with init_role 'pv' take (p, v) from the dispatch, the single slack
    takes only v. PQ buses may carry a fixed injection via dispatch entries
    with {"p": ..., "q": ...} (used for inverter plants). Raises
    PowerFlowError with the final mismatch if it does not converge.
    """
    n = network.n_bus
    roles = [b.init_role for b in network.buses]
    slack = [i for i in range(n) if roles[i] == "slack"]
    if len(slack) != 1:
        raise PowerFlowError(f"need exactly one slack bus, found {len(slack)}")
    slack = slack[0]
    pv = [i for i in range(n) if roles[i] == "pv"]
    pq = [i for i in range(n) if roles[i] == "pq"]

    y = build_ybus(network.buses, network.branches).to_dense()
    s_load = network.load_vector()

    p_inj = np.zeros(n)
    q_inj = np.zeros(n)
    vm = np.ones(n)
    for i, spec in dispatch.items():
        if "p" in spec:
            p_inj[i] += spec["p"]
        if "q" in spec:
            q_inj[i] += spec["q"]
        if "v" in spec:
            vm[i] = spec["v"]
    p_sched = p_inj - s_load.real
    q_sched = q_inj - s_load.imag

    va = np.zeros(n)
    v = vm * np.exp(1j * va)

    pvpq = pv + pq
    for it in range(1, max_iter + 1):
        s_calc = v * np.conj(y @ v)
        dp = p_sched - s_calc.real
        dq = q_sched - s_calc.imag
        mism = np.concatenate([dp[pvpq], dq[pq]])
        if np.max(np.abs(mism)) < tol:
            gen_p, gen_q = {}, {}
            for i in pv + [slack]:
                gen_p[i] = s_calc.real[i] + s_load.real[i]
                gen_q[i] = s_calc.imag[i] + s_load.imag[i]
            return PowerFlowSolution(
                v_mag=np.abs(v),
                v_ang=np.angle(v),
                gen_p=gen_p,
                gen_q=gen_q,
                converged=True,
                iterations=it - 1,
            )
        j = _pf_jacobian(y, v, pvpq, pq)
        dx = np.linalg.solve(j, mism)
        na = len(pvpq)
        va[pvpq] += dx[:na]
        vm[pq] += dx[na:]
        v = vm * np.exp(1j * va)

    raise PowerFlowError(
        f"power flow not converged after {max_iter} iterations "
        f"(max mismatch {np.max(np.abs(mism)):.3e} pu)"
    )


def _pf_jacobian(y, v, pvpq, pq):
    n = len(v)
    ibus = y @ v
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_vn = np.diag(v / np.abs(v))
    ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
    ds_dvm = diag_v @ np.conj(y @ diag_vn) + np.conj(diag_i) @ diag_vn
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def load_scale(v_mag):
    """Voltage-dependent scaling of constant-power load demand.

    1.0 above V_BLEND_HI; a quadratic (constant-impedance) characteristic
    anchored at V_BLEND_HI below V_BLEND_LO; linear blend in between.
    """
    if v_mag >= V_BLEND_HI:
        return 1.0
    z_part = (v_mag / V_BLEND_HI) ** 2
    if v_mag <= V_BLEND_LO:
        return z_part
    w = (v_mag - V_BLEND_LO) / (V_BLEND_HI - V_BLEND_LO)
    return w + (1.0 - w) * z_part


def _load_scale_deriv(v_mag):
    """d(load_scale)/d|V|."""
    if v_mag >= V_BLEND_HI:
        return 0.0
    if v_mag <= V_BLEND_LO:
        return 2.0 * v_mag / (V_BLEND_HI * V_BLEND_HI)
    w_slope = 1.0 / (V_BLEND_HI - V_BLEND_LO)
    w = (v_mag - V_BLEND_LO) * w_slope
    z = (v_mag / V_BLEND_HI) ** 2
    dz = 2.0 * v_mag / (V_BLEND_HI * V_BLEND_HI)
    return w_slope - w_slope * z + (1.0 - w) * dz


def load_currents(loads, v):
    """Current drawn by each constant-power load at voltages `v`.

    `loads` is a list of (bus, complex power). Returns the total load current
    vector (positive = current out of the bus into the load).
    """
    i_load = np.zeros(len(v), dtype=complex)
    for bus, s in loads:
        vb = v[bus]
        vm = abs(vb)
        if vm < 1e-12:
            continue
        s_eff = s * load_scale(vm)
        i_load[bus] += np.conj(s_eff / vb)
    return i_load


class NetworkSolveCache:
    """Per-topology factorizations reused across solves of one matrix.

    Besides the plain matrix, holds a factorization with every load folded
    in as its nominal-voltage admittance. The linear solve of that system is
    the branch-selection seed for the nonlinear constant-power solve: it is
    unique, tracks the actual device injections, and lies near the physical
    operating branch in both healthy and faulted topologies.
    """

    def __init__(self, y_aug, loads=()):
        self.dense = y_aug.to_dense()
        n = y_aug.n
        g, b = self.dense.real, self.dense.imag
        jb = np.empty((2 * n, 2 * n))
        jb[:n, :n] = g
        jb[:n, n:] = -b
        jb[n:, :n] = b
        jb[n:, n:] = g
        self.j_base = jb
        self.lu = lu_factor(self.dense)
        y_z = self.dense.copy()
        for bus, s in loads:
            y_z[bus, bus] += s.conjugate()
        self.lu_zload = lu_factor(y_z)

    def seed_voltage(self, i_dev):
        return lu_solve(self.lu_zload, i_dev)


def _blended_load_currents(loads, v, lam):
    """Load currents with the constant-power law blended against the
    nominal-admittance law: lam = 1 is the true model, lam = 0 is linear."""
    if lam >= 1.0:
        return load_currents(loads, v)
    i_load = np.zeros(len(v), dtype=complex)
    for bus, s in loads:
        vb = v[bus]
        i_load[bus] += (1.0 - lam) * s.conjugate() * vb
        vm = abs(vb)
        if vm >= 1e-12:
            i_load[bus] += lam * np.conj(s * load_scale(vm) / vb)
    return i_load


def _newton_network(y_aug, i_dev, loads, v, tol, max_iter, cache, lam=1.0):
    n = y_aug.n
    y = cache.dense

    def residual(vv):
        return y @ vv - i_dev + _blended_load_currents(loads, vv, lam)

    f_c = residual(v)
    res = np.max(np.abs(f_c))
    for it in range(max_iter):
        if res < tol:
            return v

        j = cache.j_base.copy()
        for bus, s in loads:
            vb = v[bus]
            vm = abs(vb)
            p, q = s.real, s.imag
            if lam < 1.0:
                w = 1.0 - lam
                j[bus, bus] += w * p
                j[bus, n + bus] += w * q
                j[n + bus, bus] += -w * q
                j[n + bus, n + bus] += w * p
            if vm < 1e-12:
                continue
            a, b_ = vb.real, vb.imag
            g = load_scale(vm)
            h = lam * g / (vm * vm)
            dh = lam * (
                _load_scale_deriv(vm) / (vm * vm) - 2.0 * g / (vm**3)
            )
            cr = p * a + q * b_
            ci = p * b_ - q * a
            j[bus, bus] += h * p + cr * dh * a / vm
            j[bus, n + bus] += h * q + cr * dh * b_ / vm
            j[n + bus, bus] += -h * q + ci * dh * a / vm
            j[n + bus, n + bus] += h * p + ci * dh * b_ / vm
        rhs = np.concatenate([f_c.real, f_c.imag])
        try:
            dx = np.linalg.solve(j, rhs)
        except np.linalg.LinAlgError as exc:
            raise NetworkDivergence(res, it) from exc
        dv = dx[:n] + 1j * dx[n:]

        # backtracking line search on the residual norm
        alpha = 1.0
        while True:
            v_try = v - alpha * dv
            f_try = residual(v_try)
            res_try = np.max(np.abs(f_try))
            if res_try < res:
                v, f_c, res = v_try, f_try, res_try
                break
            alpha *= 0.5
            if alpha < 1e-4:
                raise NetworkDivergence(res, it)
    raise NetworkDivergence(res, max_iter)


def network_solve_dynamic(
    y_aug, norton_currents, loads, v_guess=None, tol=1e-8, max_iter=40, cache=None
):
    """Solve I = Y*V with constant-power loads as voltage-dependent currents.

    `y_aug` must already include device Norton admittances on its diagonal;
    `norton_currents` is the complex device injection vector. Solved by
    Newton iteration on the rectangular network equations, warm-started from
    `v_guess`. Without a warm start the solution is continued from the
    impedance-load linearization (load-model homotopy), which selects the
    physical branch when several load-flow branches coexist. Raises
    NetworkDivergence carrying the last residual if the iteration fails (the
    signature of voltage collapse). A NetworkSolveCache may be passed to
    amortize repeated solves of one topology.
    """
    if cache is None:
        cache = NetworkSolveCache(y_aug, loads)
    i_dev = np.asarray(norton_currents, dtype=complex)

    if not loads:
        return lu_solve(cache.lu, i_dev)

    if v_guess is not None:
        v = np.asarray(v_guess, dtype=complex).copy()
        return _newton_network(y_aug, i_dev, loads, v, tol, max_iter, cache)

    v = cache.seed_voltage(i_dev)
    for lam in (0.3, 0.6, 0.85, 1.0):
        stage_tol = tol if lam >= 1.0 else max(tol, 1e-6)
        v = _newton_network(
            y_aug, i_dev, loads, v, stage_tol, max_iter, cache, lam=lam
        )
    return v
