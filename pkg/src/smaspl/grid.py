"""Distribution network model and rectangular-coordinate AC power flow.

The network couples a host feeder with the internal networks of several
microgrids into one nodal model.  Loads follow the consumption-positive
convention: at every bus the net load (p, q) draws the current

    I_load^Re = (p*V^Re + q*V^Im) / |V|^2
    I_load^Im = (p*V^Im - q*V^Re) / |V|^2

and the nodal balance is Y*V + I_load(V) = 0, so the slack bus supplies
the system.  All electrical quantities are per-unit; kW/kvar appear only
at the API boundary.

Everything here is a pure function of immutable inputs and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

__all__ = [
    "Bus",
    "Branch",
    "GridModel",
    "PowerFlowSolution",
    "GridError",
    "build_admittance",
    "solve_power_flow",
    "branch_current_magnitudes",
    "power_mismatch",
    "load_current_voltage_jacobian",
    "power_flow_system_matrix",
    "load_grid_file",
    "grid_from_dict",
]


class GridError(ValueError):
    """Invalid network description (topology, parameters, or file contents)."""


@dataclass(frozen=True)
class Bus:
    """One network node.

    kind is "slack" (voltage reference, exactly one per network) or "load".
    mg_owner tags buses that belong to a microgrid's internal network.
    """

    id: int
    kind: str = "load"
    v_min: float = 0.95
    v_max: float = 1.05
    mg_owner: int | None = None

    def __post_init__(self):
        if self.kind not in ("slack", "load"):
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not (0.0 < self.v_min < self.v_max):
            raise GridError(
                f"bus {self.id}: voltage band must satisfy 0 < v_min < v_max, "
                f"got [{self.v_min}, {self.v_max}]"
            )


@dataclass(frozen=True)
class Branch:
    """Series element between two buses with admittance y = y_re + j*y_im (p.u.)."""

    from_bus: int
    to_bus: int
    y_re: float
    y_im: float
    i_max: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: self-loop")
        if not (np.isfinite(self.y_re) and np.isfinite(self.y_im)):
            raise GridError(
                f"branch {self.from_bus}-{self.to_bus}: non-finite admittance"
            )
        if self.i_max <= 0:
            raise GridError(
                f"branch {self.from_bus}-{self.to_bus}: i_max must be > 0"
            )

    @property
    def y(self) -> complex:
        return complex(self.y_re, self.y_im)

    @classmethod
    def from_impedance(cls, from_bus, to_bus, r, x, i_max):
        z = complex(r, x)
        if z == 0:
            raise GridError(f"branch {from_bus}-{to_bus}: zero impedance")
        y = 1.0 / z
        return cls(from_bus, to_bus, y.real, y.imag, i_max)


def _connected_components(n_bus: int, branches) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n_bus)]
    for br in branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = [False] * n_bus
    comps = []
    for start in range(n_bus):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def build_admittance(branches, n_bus: int) -> tuple[np.ndarray, np.ndarray]:
    """Assemble dense nodal admittance matrices (real, imag) from branches.

    Diagonal entries are the sum of incident branch admittances, the
    (i, j) off-diagonal is -y_ij.  Rejects out-of-range endpoints and
    disconnected topologies (naming the stranded component).
    """
    y_re = np.zeros((n_bus, n_bus))
    y_im = np.zeros((n_bus, n_bus))
    for br in branches:
        for b in (br.from_bus, br.to_bus):
            if not (0 <= b < n_bus):
                raise GridError(
                    f"branch {br.from_bus}-{br.to_bus}: bus {b} outside 0..{n_bus - 1}"
                )
        i, j = br.from_bus, br.to_bus
        y_re[i, i] += br.y_re
        y_re[j, j] += br.y_re
        y_re[i, j] -= br.y_re
        y_re[j, i] -= br.y_re
        y_im[i, i] += br.y_im
        y_im[j, j] += br.y_im
        y_im[i, j] -= br.y_im
        y_im[j, i] -= br.y_im
    comps = _connected_components(n_bus, branches)
    if len(comps) > 1:
        stranded = [c for c in comps if 0 not in c]
        raise GridError(
            f"network is disconnected: isolated component(s) {stranded}"
        )
    return y_re, y_im


@dataclass(frozen=True)
class GridModel:
    """Immutable network: buses, branches, admittance, and per-unit bases.

    base_kv holds the voltage base of each bus's zone; base_power_kva is
    the common power base.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    y_re: np.ndarray
    y_im: np.ndarray
    base_power_kva: float
    base_kv: np.ndarray

    def __post_init__(self):
        n = len(self.buses)
        slack = [b.id for b in self.buses if b.kind == "slack"]
        if len(slack) != 1:
            raise GridError(f"need exactly one slack bus, found {slack}")
        if sorted(b.id for b in self.buses) != list(range(n)):
            raise GridError("bus ids must be 0..n-1 without gaps")
        if self.base_power_kva <= 0:
            raise GridError("base_power_kva must be positive")
        if len(self.base_kv) != n:
            raise GridError("base_kv must have one entry per bus")
        y_re, y_im = build_admittance(self.branches, n)
        if (np.max(np.abs(y_re - self.y_re), initial=0.0) > 1e-12
                or np.max(np.abs(y_im - self.y_im), initial=0.0) > 1e-12):
            raise GridError("stored admittance inconsistent with branch list")
        if (np.max(np.abs(self.y_re - self.y_re.T), initial=0.0) > 1e-12
                or np.max(np.abs(self.y_im - self.y_im.T), initial=0.0) > 1e-12):
            raise GridError("admittance matrix must be symmetric")

    @classmethod
    def from_branches(cls, buses, branches, base_power_kva=100.0, base_kv=None):
        buses = tuple(buses)
        branches = tuple(branches)
        y_re, y_im = build_admittance(branches, len(buses))
        if base_kv is None:
            base_kv = np.ones(len(buses))
        return cls(buses, branches, y_re, y_im, float(base_power_kva),
                   np.asarray(base_kv, dtype=float))

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == "slack")

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / self.base_power_kva

    def with_branches(self, branches) -> "GridModel":
        branches = tuple(branches)
        y_re, y_im = build_admittance(branches, self.n_bus)
        return replace(self, branches=branches, y_re=y_re, y_im=y_im)


@dataclass
class PowerFlowSolution:
    """Rectangular power-flow result in p.u.

    i_inj is the nodal current Y*V (equals minus the load current at
    convergence); i_br follows i_br = y_ij*(v_from - v_to).  failure is
    None, "max_iterations", "singular_jacobian" or "voltage_collapse".
    """

    v_re: np.ndarray
    v_im: np.ndarray
    i_inj_re: np.ndarray
    i_inj_im: np.ndarray
    i_br_re: np.ndarray
    i_br_im: np.ndarray
    converged: bool
    iterations: int
    residual_history: list[float] = field(default_factory=list)
    failure: str | None = None
    p_load_pu: np.ndarray | None = None
    q_load_pu: np.ndarray | None = None

    @property
    def v_mag(self) -> np.ndarray:
        return np.hypot(self.v_re, self.v_im)


def load_current_voltage_jacobian(p, q, v_re, v_im):
    """Derivatives of the load current w.r.t. rectangular voltage, per bus.

    Returns the four diagonal vectors (d I_re/d V_re, d I_re/d V_im,
    d I_im/d V_re, d I_im/d V_im) of the consumption-convention current.
    """
    v2 = v_re ** 2 + v_im ** 2
    v4 = v2 ** 2
    num_re = p * v_re + q * v_im
    num_im = p * v_im - q * v_re
    d_rere = p / v2 - 2.0 * v_re * num_re / v4
    d_reim = q / v2 - 2.0 * v_im * num_re / v4
    d_imre = -q / v2 - 2.0 * v_re * num_im / v4
    d_imim = p / v2 - 2.0 * v_im * num_im / v4
    return d_rere, d_reim, d_imre, d_imim


def power_flow_system_matrix(grid: GridModel, p, q, v_re, v_im,
                             pin_slack: bool = True) -> np.ndarray:
    """2n x 2n linearization of Y*V + I_load(V) around (v_re, v_im).

    The same matrix serves as the Newton Jacobian and, factorized at the
    solution, as the system matrix for all voltage sensitivities.  With
    p = q = 0 it reduces to [[Y_re, -Y_im], [Y_im, Y_re]].  Slack rows
    and columns are replaced by identity when pin_slack is set.
    """
    n = grid.n_bus
    d_rere, d_reim, d_imre, d_imim = load_current_voltage_jacobian(p, q, v_re, v_im)
    top = np.hstack([grid.y_re + np.diag(d_rere), -grid.y_im + np.diag(d_reim)])
    bot = np.hstack([grid.y_im + np.diag(d_imre), grid.y_re + np.diag(d_imim)])
    J = np.vstack([top, bot])
    if pin_slack:
        s = grid.slack
        for k in (s, n + s):
            J[k, :] = 0.0
            J[:, k] = 0.0
            J[k, k] = 1.0
    return J


def _branch_currents(grid: GridModel, v):
    i_br = np.empty(grid.n_branch, dtype=complex)
    for k, br in enumerate(grid.branches):
        i_br[k] = br.y * (v[br.from_bus] - v[br.to_bus])
    return i_br


def power_mismatch(grid: GridModel, sol: PowerFlowSolution) -> np.ndarray:
    """Per-bus complex power-balance residual V*conj(Y V) + (p + jq)."""
    v = sol.v_re + 1j * sol.v_im
    yv = (grid.y_re + 1j * grid.y_im) @ v
    return v * np.conj(yv) + (sol.p_load_pu + 1j * sol.q_load_pu)


def solve_power_flow(grid: GridModel, p_net_kw, q_net_kvar, *,
                     tol: float = 1e-8, max_iter: int = 50) -> PowerFlowSolution:
    """Newton solve in rectangular coordinates from a flat start.

    p_net_kw/q_net_kvar are per-bus net loads (consumption minus
    generation, in kW/kvar); slack entries are ignored.  Converged means
    the power-balance infinity norm over non-slack buses is <= tol (p.u.).
    Non-convergence is reported through the returned solution's failure
    field together with the residual history, never by raising.
    """
    n = grid.n_bus
    s = grid.slack
    p = grid.kw_to_pu(p_net_kw).copy()
    q = grid.kw_to_pu(q_net_kvar).copy()
    if p.shape != (n,) or q.shape != (n,):
        raise GridError(f"injection arrays must have shape ({n},)")
    p[s] = 0.0
    q[s] = 0.0

    v_re = np.ones(n)
    v_im = np.zeros(n)
    history: list[float] = []
    converged = False
    failure: str | None = None
    iterations = 0

    nonslack = np.array([i for i in range(n) if i != s])
    for it in range(max_iter + 1):
        v2 = v_re ** 2 + v_im ** 2
        if np.min(v2) < 0.04:
            failure = "voltage_collapse"
            break
        v = v_re + 1j * v_im
        yv = (grid.y_re + 1j * grid.y_im) @ v
        s_miss = v * np.conj(yv) + (p + 1j * q)
        resid = float(np.max(np.abs(s_miss[nonslack]))) if n > 1 else 0.0
        history.append(resid)
        if resid <= tol:
            converged = True
            break
        if it == max_iter:
            failure = "max_iterations"
            break
        i_load_re = (p * v_re + q * v_im) / v2
        i_load_im = (p * v_im - q * v_re) / v2
        f_re = grid.y_re @ v_re - grid.y_im @ v_im + i_load_re
        f_im = grid.y_im @ v_re + grid.y_re @ v_im + i_load_im
        F = np.concatenate([f_re, f_im])
        F[s] = 0.0
        F[n + s] = 0.0
        J = power_flow_system_matrix(grid, p, q, v_re, v_im)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            failure = "singular_jacobian"
            break
        v_re = v_re + dx[:n]
        v_im = v_im + dx[n:]
        iterations = it + 1

    v = v_re + 1j * v_im
    i_inj = (grid.y_re + 1j * grid.y_im) @ v
    i_br = _branch_currents(grid, v)
    return PowerFlowSolution(
        v_re=v_re, v_im=v_im,
        i_inj_re=i_inj.real, i_inj_im=i_inj.imag,
        i_br_re=i_br.real, i_br_im=i_br.imag,
        converged=converged, iterations=iterations,
        residual_history=history, failure=failure,
        p_load_pu=p, q_load_pu=q,
    )


def branch_current_magnitudes(sol: PowerFlowSolution) -> np.ndarray:
    """|I_ij| per branch from a converged solution."""
    return np.hypot(sol.i_br_re, sol.i_br_im)


# ---------------------------------------------------------------------------
# Grid description file
# ---------------------------------------------------------------------------

def grid_from_dict(data: dict) -> GridModel:
    """Build a GridModel from the parsed key-value tree of a grid file."""
    try:
        base_kva = float(data["base_power_kva"])
        bus_rows = data["buses"]
        branch_rows = data["branches"]
    except KeyError as exc:
        raise GridError(f"grid file missing section {exc}") from exc

    buses = []
    base_kv = np.zeros(len(bus_rows))
    for row in bus_rows:
        try:
            b = Bus(
                id=int(row["id"]),
                kind=str(row.get("kind", "load")),
                v_min=float(row.get("v_min", 0.95)),
                v_max=float(row.get("v_max", 1.05)),
                mg_owner=(None if row.get("mg_owner") is None
                          else int(row["mg_owner"])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise GridError(f"bad bus entry {row!r}: {exc}") from exc
        buses.append(b)
        if not (0 <= b.id < len(bus_rows)):
            raise GridError(f"bus id {b.id} outside 0..{len(bus_rows) - 1}")
        base_kv[b.id] = float(row.get("base_kv", 1.0))

    branches = []
    for row in branch_rows:
        try:
            i, j = int(row["from"]), int(row["to"])
            units = str(row.get("units", "pu"))
            r, x = float(row["r"]), float(row["x"])
            i_max = float(row.get("i_max", 1e9))
        except (KeyError, TypeError, ValueError) as exc:
            raise GridError(f"bad branch entry {row!r}: {exc}") from exc
        if units == "ohm":
            kv = base_kv[j]
            z_base = kv ** 2 * 1000.0 / base_kva
            r, x = r / z_base, x / z_base
        elif units != "pu":
            raise GridError(f"branch {i}-{j}: units must be 'ohm' or 'pu'")
        branches.append(Branch.from_impedance(i, j, r, x, i_max))

    return GridModel.from_branches(buses, branches, base_kva, base_kv)


def load_grid_file(path) -> GridModel:
    """Load and validate a YAML grid description, converting to p.u."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise GridError(f"{path}: grid file must be a mapping")
    return grid_from_dict(data)
