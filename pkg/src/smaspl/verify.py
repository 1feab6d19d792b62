"""Finite-difference audits of every analytic derivative family.

Each family compares closed-form derivatives against an independent
numerical oracle: full power-flow re-solves for the network
sensitivities, central differences for the density and network
Jacobians, and direct return re-evaluation for the local constraint
rows.  A deliberately faulted variant of the injection table is
available to prove the audit actually catches sign errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .grid import Branch, Bus, GridModel, solve_power_flow
from .gradients import (
    compute_step_sensitivities,
    injection_current_jacobian,
    local_constraint_gradients,
)
from .microgrid import (
    BusMap,
    DGSpec,
    ESSSpec,
    MicrogridSpec,
    PCCSpec,
    PVSpec,
    actions_to_injections,
    build_constraint_table,
    constraint_returns,
    network_observables,
    pcc_flow,
)
from .policy import (
    FeedforwardNet,
    gaussian_pdf,
    gaussian_pdf_grad_cov,
    gaussian_pdf_grad_mean,
    gaussian_pdf_grad_point,
)

__all__ = ["AuditResult", "run_all_audits", "FAULTS"]

FD_H_KW = 0.01          # 1e-4 p.u. at the 100 kVA base
PF_TOL = 1e-12          # oracle re-solves run tighter than production

FAULTS = ("table3-qdg-sign",)


@dataclass
class AuditResult:
    family: str
    tolerance: float
    trials: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _record(dump, family, index, analytic, fd, scale):
    if dump is not None:
        dump.append((family, index, float(analytic), float(fd),
                     abs(analytic - fd) / scale))


# ---------------------------------------------------------------------------
# Random desk-scale cases
# ---------------------------------------------------------------------------

def _random_case(rng: np.random.Generator):
    """Chain network of 3..5 buses with one microgrid behind bus 1."""
    n = int(rng.integers(3, 6))
    buses = [Bus(0, "slack", 0.8, 1.2)]
    buses += [Bus(i, "load", 0.8, 1.2, mg_owner=0) for i in range(1, n)]
    branches = []
    for i in range(n - 1):
        r = float(rng.uniform(0.004, 0.03))
        x = float(rng.uniform(0.004, 0.03))
        branches.append(Branch.from_impedance(i, i + 1, r, x, 10.0))
    grid = GridModel.from_branches(buses, branches)
    pick = lambda: int(rng.integers(1, n))
    spec = MicrogridSpec(
        mg_id=0,
        dg=DGSpec(p_max_kw=40.0, q_max_kvar=20.0, ramp_kw=20.0,
                  fuel_price=0.57, a_f=0.0001773, b_f=0.1709, c_f=14.67),
        ess=ESSSpec(e_cap_kwh=20.0, p_ch_max_kw=4.0, p_dis_max_kw=4.0,
                    eta_ch=0.95, eta_dis=0.90, soc_min=0.1, soc_max=0.9,
                    q_max_kvar=3.0),
        pv=PVSpec(p_rated_kw=15.0, q_max_kvar=8.0),
        pcc=PCCSpec(p_max_kw=80.0, q_max_kvar=40.0, price_per_kwh=0.046),
        bus_map=BusMap(dg=pick(), ess=pick(), pv=pick(), load=pick(),
                       pcc_mg=1, pcc_host=0),
    )
    load = rng.uniform(2.0, 20.0, (1, 1))
    irr = rng.uniform(0.0, 1.0, (1, 1))
    actions = np.array([[
        rng.uniform(0.0, 35.0),    # p_dg
        rng.uniform(0.0, 4.0),     # p_ch
        rng.uniform(0.0, 4.0),     # p_dis
        rng.uniform(0.0, 15.0),    # q_dg
        rng.uniform(-8.0, 8.0),    # q_pv
        rng.uniform(-3.0, 3.0),    # q_ess
    ]])
    return grid, spec, actions, load, irr


def _solve_case(grid, spec, actions, load, irr):
    p, q = actions_to_injections(actions, load, irr, [spec], grid.n_bus)
    sol = solve_power_flow(grid, p[0], q[0], tol=PF_TOL)
    return sol if sol.converged else None


# ---------------------------------------------------------------------------
# Family 1: injection-current partials at fixed voltage
# ---------------------------------------------------------------------------

def _load_current(p_kw, q_kvar, v_re, v_im, base):
    p = p_kw / base
    q = q_kvar / base
    v2 = v_re ** 2 + v_im ** 2
    return ((p * v_re + q * v_im) / v2, (p * v_im - q * v_re) / v2)

# how each control enters the net load (sign of dp, sign of dq)
_CONTROL_LOAD_SIGN = {
    "p_dg": (-1.0, 0.0), "p_ch": (+1.0, 0.0), "p_dis": (-1.0, 0.0),
    "q_dg": (0.0, +1.0), "q_pv": (0.0, +1.0), "q_ess": (0.0, -1.0),
}


def audit_injection_jacobian(rng, trials=50, tol=1e-8, fault=None,
                             dump=None) -> AuditResult:
    worst = 0.0
    base = 100.0
    for _ in range(trials):
        v_re = rng.uniform(0.9, 1.1, 3)
        v_im = rng.uniform(-0.1, 0.1, 3)
        p_kw = rng.uniform(-30.0, 30.0, 3)
        q_kvar = rng.uniform(-20.0, 20.0, 3)
        sol = SimpleNamespace(v_re=v_re, v_im=v_im)
        entries = injection_current_jacobian(sol)
        if fault == "table3-qdg-sign":
            dire, diim = entries["q_dg"]
            entries["q_dg"] = (-dire, -diim)
        h = FD_H_KW
        for control, (dire, diim) in entries.items():
            sp, sq = _CONTROL_LOAD_SIGN[control]
            up = _load_current(p_kw + sp * h, q_kvar + sq * h, v_re, v_im, base)
            dn = _load_current(p_kw - sp * h, q_kvar - sq * h, v_re, v_im, base)
            fd_re = (up[0] - dn[0]) / (2 * h) * base
            fd_im = (up[1] - dn[1]) / (2 * h) * base
            scale = max(np.abs(fd_re).max(), np.abs(fd_im).max(), 1e-9)
            err = max(np.abs(dire - fd_re).max(),
                      np.abs(diim - fd_im).max()) / scale
            worst = max(worst, err)
            _record(dump, "injection-jacobian", control,
                    dire[0], fd_re[0], scale)
    return AuditResult("injection-jacobian", tol, trials, worst)


# ---------------------------------------------------------------------------
# Families 2-5: network sensitivities vs full re-solves
# ---------------------------------------------------------------------------

def audit_network_sensitivities(rng, trials=50, tol=1e-4,
                                dump=None) -> list[AuditResult]:
    worst = {"voltage-sensitivity": 0.0, "voltage-magnitude": 0.0,
             "branch-current-magnitude": 0.0, "pcc-power": 0.0}
    done = 0
    while done < trials:
        grid, spec, actions, load, irr = _random_case(rng)
        sol = _solve_case(grid, spec, actions, load, irr)
        if sol is None:
            continue
        done += 1
        sens = compute_step_sensitivities(grid, sol, [spec])
        h = FD_H_KW
        fd_vre = np.empty_like(sens.dv_re)
        fd_vmag = np.empty_like(sens.dv_mag)
        fd_imag = np.empty_like(sens.di_mag)
        fd_pcc = np.empty_like(sens.dpcc_p)
        ok = True
        for c in range(6):
            up_a = actions.copy()
            up_a[0, c] += h
            dn_a = actions.copy()
            dn_a[0, c] -= h
            s_up = _solve_case(grid, spec, up_a, load, irr)
            s_dn = _solve_case(grid, spec, dn_a, load, irr)
            if s_up is None or s_dn is None:
                ok = False
                break
            fd_vre[:, c] = (s_up.v_re - s_dn.v_re) / (2 * h)
            fd_vmag[:, c] = (s_up.v_mag - s_dn.v_mag) / (2 * h)
            up_imag = np.hypot(s_up.i_br_re, s_up.i_br_im)
            dn_imag = np.hypot(s_dn.i_br_re, s_dn.i_br_im)
            fd_imag[:, c] = (up_imag - dn_imag) / (2 * h)
            fd_pcc[0, c] = (pcc_flow(grid, s_up, spec)[0]
                            - pcc_flow(grid, s_dn, spec)[0]) / (2 * h)
        if not ok:
            done -= 1
            continue
        checks = [
            ("voltage-sensitivity", sens.dv_re, fd_vre),
            ("voltage-magnitude", sens.dv_mag, fd_vmag),
            ("branch-current-magnitude", sens.di_mag, fd_imag),
            ("pcc-power", sens.dpcc_p, fd_pcc),
        ]
        for family, analytic, fd in checks:
            scale = max(float(np.abs(fd).max()), 1e-9)
            err = float(np.abs(analytic - fd).max()) / scale
            worst[family] = max(worst[family], err)
            flat = np.argmax(np.abs(analytic - fd))
            _record(dump, family, int(flat), analytic.ravel()[flat],
                    fd.ravel()[flat], scale)
    return [AuditResult(f, tol, trials, w) for f, w in worst.items()]


# ---------------------------------------------------------------------------
# Family 6: Gaussian density gradients
# ---------------------------------------------------------------------------

def audit_pdf_gradients(rng, trials=100, tol=1e-5, dump=None) -> AuditResult:
    worst = 0.0
    h = 1e-5
    for _ in range(trials):
        d = int(rng.integers(1, 4))
        mu = rng.normal(size=d)
        var = rng.uniform(0.3, 2.0, d)
        a = mu + rng.normal(size=d) * np.sqrt(var)
        g_mu = gaussian_pdf_grad_mean(a, mu, var)
        g_a = gaussian_pdf_grad_point(a, mu, var)
        g_cov = np.diag(gaussian_pdf_grad_cov(a, mu, var))
        fd_mu = np.empty(d)
        fd_a = np.empty(d)
        fd_cov = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fd_mu[i] = (gaussian_pdf(a, mu + e, var)
                        - gaussian_pdf(a, mu - e, var)) / (2 * h)
            fd_a[i] = (gaussian_pdf(a + e, mu, var)
                       - gaussian_pdf(a - e, mu, var)) / (2 * h)
            fd_cov[i] = (gaussian_pdf(a, mu, var + e)
                         - gaussian_pdf(a, mu, var - e)) / (2 * h)
        for name, an, fd in (("mean", g_mu, fd_mu), ("point", g_a, fd_a),
                             ("cov", g_cov, fd_cov)):
            scale = max(float(np.abs(fd).max()), 1e-9)
            err = float(np.abs(an - fd).max()) / scale
            worst = max(worst, err)
            _record(dump, "gaussian-pdf-gradients", name, an[0], fd[0], scale)
    return AuditResult("gaussian-pdf-gradients", tol, trials, worst)


# ---------------------------------------------------------------------------
# Family 7: network-output Jacobians
# ---------------------------------------------------------------------------

def audit_dnn_jacobian(rng, trials=100, tol=1e-5, dump=None) -> AuditResult:
    worst = 0.0
    h = 1e-6
    for _ in range(trials):
        sizes = [int(rng.integers(2, 5)), int(rng.integers(3, 8)),
                 int(rng.integers(2, 5))]
        net = FeedforwardNet.init_uniform(sizes, -0.8, 0.8, rng)
        x = rng.normal(size=sizes[0])
        J = net.jacobian(x)
        theta = net.flatten()
        fd = np.empty_like(J)
        for i in range(theta.size):
            t = theta.copy()
            t[i] += h
            net.unflatten(t)
            up = net.forward(x)
            t[i] -= 2 * h
            net.unflatten(t)
            dn = net.forward(x)
            fd[:, i] = (up - dn) / (2 * h)
        net.unflatten(theta)
        scale = max(float(np.abs(fd).max()), 1e-9)
        err = float(np.abs(J - fd).max()) / scale
        worst = max(worst, err)
        flat = int(np.argmax(np.abs(J - fd)))
        _record(dump, "dnn-jacobian", flat, J.ravel()[flat],
                fd.ravel()[flat], scale)
    return AuditResult("dnn-jacobian", tol, trials, worst)


# ---------------------------------------------------------------------------
# Family 8: local constraint rows vs return re-evaluation
# ---------------------------------------------------------------------------

def audit_local_constraint_gradients(rng, trials=25, tol=1e-6,
                                     dump=None) -> AuditResult:
    worst = 0.0
    horizon = 4
    gamma = 0.99
    h = 1e-4
    done = 0
    while done < trials:
        grid, spec, _, load1, irr1 = _random_case(rng)
        load = np.repeat(load1, horizon, axis=0)
        irr = np.repeat(irr1, horizon, axis=0)
        actions = rng.uniform(-2.0, 8.0, (1, 6 * horizon))
        p, q = actions_to_injections(actions, load, irr, [spec], grid.n_bus)
        sols = [solve_power_flow(grid, p[t], q[t], tol=PF_TOL)
                for t in range(horizon)]
        if not all(s.converged for s in sols):
            continue
        done += 1
        obs = network_observables(grid, sols, [spec])
        table = [r for r in build_constraint_table(grid, [spec])
                 if r.scope == "local"
                 and r.kind not in ("pcc-p", "pcc-q")]
        grads = local_constraint_gradients(table, actions, [spec], gamma,
                                           horizon, prev_dg=[0.0])
        base_vals = constraint_returns(actions, obs, [spec], table, gamma,
                                       prev_dg=[0.0])
        for i in range(6 * horizon):
            up = actions.copy()
            up[0, i] += h
            dn = actions.copy()
            dn[0, i] -= h
            # network observables are irrelevant for action-driven rows
            v_up = constraint_returns(up, obs, [spec], table, gamma,
                                      prev_dg=[0.0])
            v_dn = constraint_returns(dn, obs, [spec], table, gamma,
                                      prev_dg=[0.0])
            for row in table:
                fd = (v_up[row.id] - v_dn[row.id]) / (2 * h)
                an = grads[row.id][0, i]
                scale = max(abs(fd), abs(base_vals[row.id]), 1.0)
                err = abs(an - fd) / scale
                worst = max(worst, err)
        _record(dump, "local-constraint-gradients", done, 0.0, 0.0, 1.0)
    return AuditResult("local-constraint-gradients", tol, trials, worst)


# ---------------------------------------------------------------------------

def run_all_audits(seed: int = 0, *, trials_network: int = 50,
                   fault: str | None = None,
                   dump: list | None = None) -> list[AuditResult]:
    """All derivative families; returns one result row per family."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; available: {FAULTS}")
    rng = np.random.default_rng(seed)
    results = [audit_injection_jacobian(rng, trials=trials_network,
                                        fault=fault, dump=dump)]
    results += audit_network_sensitivities(rng, trials=trials_network,
                                           dump=dump)
    results.append(audit_pdf_gradients(rng, dump=dump))
    results.append(audit_dnn_jacobian(rng, dump=dump))
    results.append(audit_local_constraint_gradients(rng, dump=dump))
    return results
