"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (collected in the terminal summary)
before asserting.  The experiment-scale criteria (5, 6, 7) take minutes and are
marked ``slow``; deselect them with ``-m "not slow"``.

Set ``FEMDA_CYLINDER_ARCHIVE`` to an existing ``cylinder dns`` output directory
to reuse its archive in criterion 7 instead of regenerating it.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import ACCEPTANCE
from femda import experiments
from femda.archive import StateArchive
from femda.fem import assemble_operator, basis_at_points, build_fe_space, g_norm
from femda.mesh import TriMesh, build_coarse_cover, build_uniform_tri_mesh
from femda.nse import (NseConfig, NseOperators, NseState, assemble_nse_system, build_taylor_hood,
                       channel_inflow, step_nse)
from femda.nudge import build_nudging_matrix, build_nudging_rhs, sample_observations
from femda.quadrature import triangle_rule
from femda.transport import TransportConfig, assemble_transport_system, initial_state, step_transport

CHANNEL_TAGS = {"left": "inflow", "right": "outflow", "bottom": "wall", "top": "wall"}
TABLE1 = [9.1235e-05, 1.1249e-05, 1.4136e-06]


def report(number, title, passed, detail, started):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {title} ({detail}; {time.perf_counter() - started:.1f} s)"
    ACCEPTANCE.append(line)
    print(line)
    assert passed, line


def test_criterion1_table1(tmp_path):
    t0 = time.perf_counter()
    summary, _ = experiments.conv_rate(experiments.resolve("conv-rate", {}), tmp_path)
    errors = [r["error"] for r in summary["rows"]]
    rates = [r["rate"] for r in summary["rows"][1:]]
    rates_ok = all(2.85 <= r <= 3.15 for r in rates)
    errors_ok = all(0.5 <= e / ref <= 2.0 for e, ref in zip(errors, TABLE1))
    detail = "errors " + ", ".join(f"{e:.3e}" for e in errors) + "; rates " + ", ".join(f"{r:.3f}" for r in rates)
    report(1, "conv-rate rates in [2.85, 3.15], errors within 2x of the reference table", rates_ok and errors_ok,
           detail, t0)


def test_criterion2_interpolation_rates(tmp_path):
    t0 = time.perf_counter()
    params = experiments.resolve("interp-check", {"probes": ["sin(2*pi*x)", "sin(2*pi*y)", "x**2 + y**2",
                                                            "exp(x - y)", "3"]})
    summary, _ = experiments.interp_check(params, tmp_path)
    rates = {r["probe"]: r for r in summary["rates"]}
    smooth = [rates[p] for p in params["probes"][:4]]
    ok_id = all(r["rate_identity"] >= 0.9 for r in smooth)
    ok_l2 = all(r["rate_l2proj"] >= 1.9 for r in smooth)
    ok_const = rates["3"]["max_err"] == 0.0 and rates["3"]["max_err_l2proj"] == 0.0
    detail = ("identity rates " + ", ".join(f"{r['rate_identity']:.2f}" for r in smooth)
              + "; L2-projection rates " + ", ".join(f"{r['rate_l2proj']:.2f}" for r in smooth)
              + f"; constant probe error {rates['3']['max_err']:g}")
    report(2, "interpolation rates >= 0.9 and >= 1.9, constants exact", ok_id and ok_l2 and ok_const, detail, t0)


def _jittered(n, rng):
    m = build_uniform_tri_mesh(n, n)
    v = np.array(m.vertices)
    interior = (v[:, 0] > 0) & (v[:, 0] < 1) & (v[:, 1] > 0) & (v[:, 1] < 1)
    v[interior] += rng.uniform(-0.25, 0.25, (interior.sum(), 2)) / n
    return TriMesh(v, m.triangles, m.boundary_edges, m.boundary_tags).validate()


def test_criterion3_diagonal_operator_oracle():
    t0 = time.perf_counter()
    worst_D = worst_rhs = 0.0
    rng = np.random.default_rng(2024)
    for ncell in (2, 4):
        mesh = _jittered(12, rng)
        space = build_fe_space(mesh, 2)
        origin = tuple(rng.uniform(-0.2, 0.0, 2))
        cover = build_coarse_cover(mesh, (1 - origin[0]) / ncell + 1e-9, origin, space=space,
                                   Hy=(1 - origin[1]) / ncell + 1e-9)
        assert len(cover) == ncell**2
        D = build_nudging_matrix(cover, space)
        # brute-force Gram matrix: quadrature over fine triangles of products of cellwise constants
        Phi = basis_at_points(space, space.node_coords[cover.paired_nodes]).toarray()
        tri_area = 2 * mesh.signed_areas * triangle_rule(2).weights.sum()
        cell_area = np.bincount(cover.cell_of_triangle, weights=tri_area, minlength=len(cover))
        G = Phi.T @ (cell_area[:, None] * Phi)
        worst_D = max(worst_D, np.max(np.abs(D.toarray() - G)))
        mu = 3.0
        u = lambda x, y: np.sin(2 * x) * np.exp(y)
        obs = sample_observations(lambda x, y, t: u(x, y), cover, space, 0.0)
        Pu = u(*space.node_coords[cover.paired_nodes].T)[cover.cell_of_triangle]
        oracle = mu * (tri_area * Pu) @ Phi[cover.cell_of_triangle]
        worst_rhs = max(worst_rhs, np.max(np.abs(build_nudging_rhs(D, obs, mu) - oracle)))
    ok = worst_D <= 1e-12 and worst_rhs <= 1e-12
    report(3, "nudging matrix and right-hand side equal brute-force oracles to 1e-12", ok,
           f"max |D - Gram| {worst_D:.1e}, max rhs difference {worst_rhs:.1e}", t0)


def test_criterion4_g_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    R = rng.standard_normal((50, 50))
    M = sp.csr_matrix(R.T @ R / 50 + np.eye(50))
    worst = 0.0
    for _ in range(100):
        a, b, c = rng.standard_normal((3, 50))
        lhs = 0.5 * (3 * c - 4 * b + a) @ (M @ c)
        d = c - 2 * b + a
        rhs = 0.5 * (g_norm((b, c), M) ** 2 - g_norm((a, b), M) ** 2) + 0.25 * d @ (M @ d)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    report(4, "BDF2 G-norm identity for 100 random triples, 50 dofs", worst <= 1e-12,
           f"max relative defect {worst:.1e}", t0)


@pytest.mark.slow
def test_criterion5_mu_h_sweep(tmp_path):
    t0 = time.perf_counter()
    summary, _ = experiments.mu_sweep(experiments.resolve("mu-sweep", {}), tmp_path)
    runs = summary["runs"]
    Hf = min(r["H"] for r in runs)
    fine = {r["mu"]: r for r in runs if r["H"] == Hf}
    faster = fine[1000.0]["plateau_time"] < 0.5 * fine[1.0]["plateau_time"]
    others = [r for mu, r in fine.items() if mu > 0]
    slowest = (all(fine[0.0]["error_at_window"] > r["error_at_window"] for r in others)
               and all(fine[0.0]["plateau_time"] >= r["plateau_time"] for r in others))
    bounded = all(r["bounded"] and math.isfinite(r["final_error"]) for r in runs)
    detail = (f"H={Hf:g}: plateau time mu=1000 {fine[1000.0]['plateau_time']:.2f} vs mu=1 "
              f"{fine[1.0]['plateau_time']:.2f}; mu=0 error at window {fine[0.0]['error_at_window']:.2e} "
              f"(largest: {slowest}); all bounded over 2x window: {bounded}")
    report(5, "mu/H sweep ordering and boundedness", faster and slowest and bounded, detail, t0)


@pytest.mark.slow
def test_criterion6_contaminant_demo(tmp_path):
    t0 = time.perf_counter()
    params = experiments.resolve("transport-demo", {})
    experiments.transport_demo(params, tmp_path)
    curves = {}
    for mu in params["mu"]:
        t, rel = np.loadtxt(tmp_path / f"error_mu{experiments._tag(mu)}.csv", delimiter=",", skiprows=1,
                            usecols=(0, 2), unpack=True)
        curves[float(mu)] = rel
    pinned = np.max(np.abs(curves[0.0] - 1.0))
    late = t >= 0.25 * params["T"] - 1e-9
    group = [1.0, 10.0, 100.0, 1000.0]
    spread = max(np.max(np.abs(curves[a][late] - curves[b][late]) / np.minimum(curves[a][late], curves[b][late]))
                 for a in group for b in group if a < b)
    slow_small = curves[0.01][-1] > curves[1.0][-1]
    ok = pinned <= 1e-10 and spread <= 0.2 and slow_small
    detail = (f"mu=0 max |rel - 1| {pinned:.1e}; worst pairwise spread for mu in 1..1000 after t={0.25 * params['T']:g}: "
              f"{spread:.2f}; final rel mu=1 {curves[1.0][-1]:.3f}, mu=1000 {curves[1000.0][-1]:.3f}; "
              f"mu=0.01 final {curves[0.01][-1]:.3f} > mu=1: {slow_small}")
    report(6, "contaminant demo: mu=0 pinned at 1, mu>=1 curves within 20%, mu=0.01 slower", ok, detail, t0)


def _read_ld(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


@pytest.mark.slow
def test_criterion7_cylinder_self_convergence(tmp_path):
    t0 = time.perf_counter()
    params = experiments.resolve("cylinder-dns", {})
    reuse = os.environ.get("FEMDA_CYLINDER_ARCHIVE")
    if reuse:
        dns_dir = Path(reuse)
    else:
        dns_dir = tmp_path / "dns"
        dns_dir.mkdir()
        experiments.cylinder_dns(params, dns_dir)
    archive = StateArchive.load(dns_dir / "archive")
    da_params = experiments.resolve("cylinder-da", {"archive": str(dns_dir / "archive")})
    (tmp_path / "da").mkdir()
    summary, _ = experiments.cylinder_da(da_params, tmp_path / "da", archive=archive)
    runs = sorted(summary["runs"], key=lambda r: r["H"])
    finest, coarsest = runs[0], runs[-1]
    T1 = float(da_params["T1"])

    dns_ld = _read_ld(dns_dir / "dns_lift_drag.csv")
    after = dns_ld[:, 0] > 1.0
    shedding = np.ptp(dns_ld[after, 2]) > 0
    stem = f"mu{experiments._tag(finest['mu'])}_H{experiments._tag(finest['H'])}"
    da_ld = _read_ld(tmp_path / "da" / f"lift_drag_{stem}.csv")
    t_conv = finest["time_below_1e-2"]
    ld_ok, cd_dev, cl_dev, settle = False, float("nan"), float("nan"), float("inf")
    if math.isfinite(t_conv):
        m = da_ld[:, 0] >= t_conv - 1e-9
        ref_cd = np.interp(da_ld[m, 0] + T1, dns_ld[:, 0], dns_ld[:, 1])
        ref_cl = np.interp(da_ld[m, 0] + T1, dns_ld[:, 0], dns_ld[:, 2])
        cd_dev = np.max(np.abs(da_ld[m, 1] - ref_cd)) / np.max(np.abs(ref_cd))
        cl_dev = np.max(np.abs(da_ld[m, 2] - ref_cl)) / np.max(np.abs(ref_cl))
        ld_ok = cd_dev <= 0.05 and cl_dev <= 0.05
        # informational: first DA time from which both coefficients stay within 5%
        dev = np.maximum(np.abs(da_ld[m, 1] - ref_cd) / np.max(np.abs(ref_cd)),
                         np.abs(da_ld[m, 2] - ref_cl) / np.max(np.abs(ref_cl)))
        bad = np.nonzero(dev > 0.05)[0]
        settle = da_ld[m, 0][bad[-1] + 1] if bad.size and bad[-1] + 1 < dev.size else (t_conv if not bad.size else float("inf"))
    div = max(r["max_divergence"] for r in runs)
    interior_ok = finest["n_cells"] >= 16
    ok = (math.isfinite(t_conv) and ld_ok and not math.isfinite(coarsest["time_below_1e-2"])
          and div <= 1e-8 and interior_ok and shedding)
    by_h = ", ".join(f"{r['H']:g}: {r['final_relative_error']:.1e}" for r in runs)
    detail = (f"finest H={finest['H']:g} ({finest['n_cells']} cells) below 1e-2 at t={t_conv:.3f}; "
              f"lift/drag deviation after convergence cd {cd_dev:.2%} cl {cl_dev:.2%} "
              f"(both within 5% from t={settle:.3f}); coarsest H={coarsest['H']:g} ({coarsest['n_cells']} cells) "
              f"reaches 1e-2: {math.isfinite(coarsest['time_below_1e-2'])}; final errors by H {by_h}; "
              f"max divergence {div:.1e}; DNS lift oscillates: {shedding}")
    report(7, "cylinder DA self-convergence, lift/drag overlay, H ordering, divergence", ok, detail, t0)


def test_criterion8_exactness():
    t0 = time.perf_counter()
    # Poiseuille flow through the NSE stepper
    m = build_uniform_tri_mesh(11, 4, ((0, 0), (2.2, 0.41)), tags=CHANNEL_TAGS)
    ms = build_taylor_hood(m, ("inflow", "outflow", "wall"))
    g = channel_inflow()
    cfg = NseConfig(nu=0.001, mu=0.0, dt=0.01, T_end=1.0, velocity_bc=lambda x, y, t: g(x, y))
    v0 = ms.velocity.interpolate(g)
    state = NseState(v0, v0.copy(), np.zeros(ms.npres), cfg.dt, 1)
    ops = NseOperators(ms, None, cfg)
    for _ in range(10):
        state = step_nse(state, assemble_nse_system(ms, None, cfg, state, ops))
    pois = np.max(np.abs(state.v_curr - v0))

    # polynomial steady state of the nudged transport scheme
    mesh = build_uniform_tri_mesh(8, 8)
    space = build_fe_space(mesh, 2, 1, ("Gamma1",))
    cover = build_coarse_cover(mesh, 0.25, space=space)
    c = lambda x, y, t=0.0: x**2 + x * y - y**2 + 1
    f = lambda x, y, t: (2 * x + y) + 0.5 * (x - 2 * y)
    U = lambda x, y: (np.ones_like(x), np.full_like(x, 0.5))
    tcfg = TransportConfig(0.1, 3.0, 0.1, 1.0, U=U, f=f, bc=c)
    system = assemble_transport_system(space, cover, tcfg)
    c0 = space.interpolate(c)
    st = initial_state(space, tcfg, c0, c0)
    for _ in range(5):
        st = step_transport(st, system, sample_observations(lambda x, y, t: c(x, y), cover, space, st.t + tcfg.dt))
    transport = np.max(np.abs(st.c_curr - c0))

    # skew-symmetric trilinear form: (N(w) v, v) = 0
    rng = np.random.default_rng(3)
    N = assemble_operator(space, "convection", velocity=lambda x, y: (np.sin(3 * y) + x, np.cos(x * y)), skew=True)
    skew = max(abs(x @ N @ x) for x in rng.standard_normal((100, space.ndofs)))
    ok = pois <= 1e-9 and transport <= 1e-10 and skew <= 1e-12
    report(8, "Poiseuille to 1e-9, polynomial transport steady state, skew cancellation <= 1e-12", ok,
           f"Poiseuille {pois:.1e}, transport {transport:.1e}, skew {skew:.1e}", t0)
