"""Experiment drivers behind the command-line verbs.

Each driver takes a resolved parameter dict and an output directory, writes
deterministic CSV files there and returns ``(summary, files)``.  Parameter
defaults live in :data:`DEFAULTS`; user configs are deep-merged over them.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from pathlib import Path

import numpy as np
import sympy

from .archive import StateArchive
from .errors import FemdaError
from .fem import FeFunction, build_fe_space, evaluate_at_points
from .mesh import (build_coarse_cover, build_uniform_tri_mesh, cylinder_channel_mesh, read_mesh,
                   sinusoidal_channel_mesh)
from .nse import NseConfig, build_taylor_hood, cylinder_channel_bc, run_dns, run_nse_da, solve_stokes
from .nudge import Probe, fitted_rate, interp_error_report
from .transport import TransportConfig, n_steps, run_transport_da, run_transport_dns

logger = logging.getLogger(__name__)

DEFAULTS = {
    "interp-check": {
        "mesh": {"generator": "unit_square", "n": 64},
        "degree": 2,
        "H": [0.25, 0.125, 0.0625],
        "probes": ["sin(2*pi*x)", "sin(2*pi*y)", "x**2 + y**2", "exp(x - y)", "3"],
    },
    "conv-rate": {
        "h": [0.125, 0.0625, 0.03125],
        "H_over_h": 4,
        "dt_constant": 0.9051,
        "dt_divides_T": True,
        "mu": 1.0,
        "epsilon": 1.0,
        "U": [1.0, 0.0],
        "T": 5.0,
        "degree": 2,
        "diagonal": "sw-ne",
        "exact": "sin(x + y + t)",
    },
    "mu-sweep": {
        "n": 32,
        "dt": 0.01,
        "epsilon": 0.01,
        "U": [1.0, 0.0],
        "window": 10.0,
        "window_factor": 2.0,
        "mu": [0.0, 1.0, 10.0, 100.0, 1000.0],
        "H": [0.25, 0.125, 0.03125],
        "degree": 2,
        "exact": "sin(x + y + t)",
        "plateau_factor": 2.0,
    },
    "transport-demo": {
        "mesh": {"generator": "sinusoidal_channel", "nx": 128, "ny": 12},
        "stokes": {"nu": 0.01, "inflow": 3.0},
        "velocity_file": None,
        "epsilon": 0.01,
        "dt": 0.02,
        "T": 4.0,
        "mu": [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        "H": 0.5,
        "grid_origin": [0.0, -1.0],
        "blobs": [{"center": [1.0, 1.5], "radius": 0.1, "value": 3.0},
                  {"center": [5.0, -0.5], "radius": 0.1, "value": 3.0}],
        "snapshot_mu": 100.0,
        "snapshot_times": [0.0, 0.5, 1.0, 2.5, 4.0],
        "raster": [256, 48],
    },
    "cylinder-dns": {
        "mesh": {"generator": "cylinder_channel"},
        "nu": 0.001,
        "dt": 0.005,
        "T1": 5.0,
        "window": 5.0,
    },
    "cylinder-da": {
        "archive": None,
        "mesh": {"generator": "cylinder_channel"},
        "nu": 0.001,
        "dt": 0.005,
        "T1": 5.0,
        "window": 5.0,
        "mu": [10.0],
        "H": [0.55, 0.275, 0.1375, 0.06875, 0.034375],
        "grid_origin": [0.0, 0.0],
    },
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(name, params=None):
    if name not in DEFAULTS:
        raise FemdaError(f"unknown experiment {name!r}")
    return deep_merge(DEFAULTS[name], params)


# ----------------------------------------------------------------------------
# small helpers


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    path = Path(path)
    path.write_text(_csv_text(header, rows))
    return path


def _tag(x):
    """Stable file-name fragment for a number (``0.125`` -> ``0.125``, ``10.0`` -> ``10``)."""
    return f"{float(x):g}"


_SYMS = sympy.symbols("x y t")


def parse_expression(text, variables=("x", "y")):
    """Parse a probe / exact-solution expression into a sympy expression.

    Only the named variables are allowed as free symbols; anything else is an
    invalid expression.
    """
    allowed = {s.name: s for s in _SYMS if s.name in variables}
    try:
        expr = sympy.sympify(text, locals={**allowed, "pi": sympy.pi, "e": sympy.E})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise FemdaError(f"invalid expression {text!r}: {exc}") from None
    extra = {s.name for s in expr.free_symbols} - set(variables)
    if extra:
        raise FemdaError(f"invalid expression {text!r}: unknown symbols {sorted(extra)}")
    return expr


def _lambdify(expr, variables):
    syms = [s for s in _SYMS if s.name in variables]
    f = sympy.lambdify(syms, expr, "numpy")

    def fn(*args):
        shape = np.broadcast(*[np.asarray(a) for a in args[:2]]).shape
        return np.broadcast_to(np.asarray(f(*args), dtype=float), shape)

    return fn


def probe_from_text(text):
    expr = parse_expression(text, ("x", "y"))
    x, y = _SYMS[0], _SYMS[1]
    fx, fy = _lambdify(sympy.diff(expr, x), "xy"), _lambdify(sympy.diff(expr, y), "xy")
    return Probe(text, _lambdify(expr, "xy"), lambda X, Y: (fx(X, Y), fy(X, Y)))


def manufactured_transport(text, epsilon, U):
    """Exact solution, forcing ``c_t + U.grad c - eps lap c`` and both as ``(x, y, t)`` callables."""
    expr = parse_expression(text, ("x", "y", "t"))
    x, y, t = _SYMS
    f = (sympy.diff(expr, t) + U[0] * sympy.diff(expr, x) + U[1] * sympy.diff(expr, y)
         - epsilon * (sympy.diff(expr, x, 2) + sympy.diff(expr, y, 2)))
    return _lambdify(expr, "xyt"), _lambdify(sympy.simplify(f), "xyt")


def load_mesh(spec):
    """Mesh from ``{"file": path}`` or ``{"generator": name, ...params}``."""
    spec = dict(spec)
    if spec.get("file"):
        path = Path(spec["file"])
        if not path.exists():
            raise FemdaError(f"mesh file {path} does not exist")
        return read_mesh(path)
    gen = spec.pop("generator", None)
    if gen == "unit_square":
        n = int(spec.get("n", 16))
        return build_uniform_tri_mesh(n, n, diagonal=spec.get("diagonal", "sw-ne"))
    if gen == "sinusoidal_channel":
        return sinusoidal_channel_mesh(**spec)
    if gen == "cylinder_channel":
        return cylinder_channel_mesh(**spec)
    raise FemdaError(f"unknown mesh generator {gen!r}")


def raster_snapshot(space, coeffs, bbox, shape):
    """Uniform ``nx`` by ``ny`` raster samples ``(x, y, value)``; NaN outside the domain."""
    (x0, y0), (x1, y1) = bbox
    nx, ny = shape
    X, Y = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    pts = np.column_stack([X.ravel(), Y.ravel()])
    vals = evaluate_at_points(space, coeffs, pts)
    if vals.ndim == 2:
        vals = np.hypot(vals[0], vals[1])
    return np.column_stack([pts, vals])


def _write_raster(path, data):
    return write_csv(path, ["x", "y", "value"], data.tolist())


# ----------------------------------------------------------------------------
# interpolation constants


def interp_check(params, out):
    out = Path(out)
    mesh = load_mesh(params["mesh"])
    space = build_fe_space(mesh, params["degree"])
    probes = [probe_from_text(p) for p in params["probes"]]
    (x0, y0) = mesh.vertices.min(axis=0)
    rows, per_probe = [], {p.name: [] for p in probes}
    for H in params["H"]:
        cover = build_coarse_cover(mesh, H, (x0, y0), space=space)
        for r in interp_error_report(cover, space, probes):
            r = dict(r, H_grid=float(H))
            rows.append(r)
            per_probe[r["probe"]].append(r)
    keys = ["probe", "H_grid", "H", "err", "grad", "ratio", "err_l2proj", "interp_norm", "stability_bound"]
    files = [write_csv(out / "interp_errors.csv", keys, [[r[k] for k in keys] for r in rows])]
    rates = []
    for name, rs in per_probe.items():
        Hs = [r["H_grid"] for r in rs]
        e1 = [r["err"] for r in rs]
        e2 = [r["err_l2proj"] for r in rs]
        const = max(e1) == 0.0
        rates.append({
            "probe": name,
            "rate_identity": float("nan") if const else fitted_rate(Hs, e1),
            "rate_l2proj": float("nan") if max(e2) == 0.0 else fitted_rate(Hs, e2),
            "max_err": max(e1),
            "max_err_l2proj": max(e2),
            "max_ratio": max(r["ratio"] for r in rs),
            "stable": all(r["interp_norm"] <= r["stability_bound"] * (1 + 1e-12) for r in rs),
        })
    rkeys = list(rates[0])
    files.append(write_csv(out / "interp_rates.csv", rkeys, [[r[k] for k in rkeys] for r in rates]))
    return {"rows": rows, "rates": rates}, files


# ----------------------------------------------------------------------------
# transport: convergence rates and the mu/H sweep


def table1_dt(h, C=0.9051, T=5.0, divides=True):
    """``C h^{3/2}``, optionally shrunk to the nearest step that divides ``T`` exactly."""
    dt = C * h**1.5
    if divides:
        dt = T / math.ceil(T / dt - 1e-9)
    return dt


def _unit_square_transport(n, degree, diagonal="sw-ne"):
    mesh = build_uniform_tri_mesh(n, n, diagonal=diagonal)
    return mesh, build_fe_space(mesh, degree, 1, ("Gamma1",))


def conv_rate(params, out):
    out = Path(out)
    U = tuple(params["U"])
    exact, f = manufactured_transport(params["exact"], params["epsilon"], U)
    rows = []
    for h in params["h"]:
        n = int(round(1.0 / h))
        mesh, space = _unit_square_transport(n, params["degree"], params["diagonal"])
        H = params["H_over_h"] * h
        cover = build_coarse_cover(mesh, H, (0.0, 0.0), space=space)
        dt = table1_dt(h, params["dt_constant"], params["T"], params["dt_divides_T"])
        cfg = TransportConfig(epsilon=params["epsilon"], mu=params["mu"], dt=dt, T_end=params["T"],
                              U=lambda x, y: (np.full_like(x, U[0]), np.full_like(x, U[1])),
                              f=lambda x, y, t: f(x, y, t), bc=exact)
        series, state = run_transport_da(space, cover, cfg, exact)
        err = series.l2_error[-1]
        rate = math.log2(rows[-1]["error"] / err) if rows else float("nan")
        rows.append({"h": h, "H": H, "dt": dt, "steps": n_steps(cfg) + 1, "t_final": series.t[-1],
                     "error": err, "rate": rate})
        logger.info("conv-rate h=%g dt=%g error=%.4e", h, dt, err)
    keys = ["h", "H", "dt", "steps", "t_final", "error", "rate"]
    return {"rows": rows}, [write_csv(out / "conv_rate.csv", keys, [[r[k] for k in keys] for r in rows])]


def plateau_time(t, err, factor=2.0, floor=None):
    """First time the error is within ``factor`` of ``floor`` (default: its final value)."""
    t, err = np.asarray(t), np.asarray(err)
    floor = err[-1] if floor is None else floor
    hit = np.nonzero(err <= factor * floor)[0]
    return float(t[hit[0]]) if hit.size else float("inf")


def decay_rate(t, err, t_max=None):
    """Least-squares slope of ``-log(err)`` against ``t`` up to ``t_max`` (the pre-plateau phase)."""
    t, err = np.asarray(t), np.asarray(err)
    m = err > 0
    if t_max is not None:
        m &= t <= t_max
    if m.sum() < 2:
        return float("nan")
    return float(-np.polyfit(t[m], np.log(err[m]), 1)[0])


def mu_sweep(params, out):
    out = Path(out)
    U = tuple(params["U"])
    exact, f = manufactured_transport(params["exact"], params["epsilon"], U)
    mesh, space = _unit_square_transport(int(params["n"]), params["degree"])
    W = float(params["window"])
    T = W * float(params["window_factor"])
    files, runs = [], []
    for H in params["H"]:
        cover = build_coarse_cover(mesh, H, (0.0, 0.0), space=space)
        for mu in params["mu"]:
            cfg = TransportConfig(epsilon=params["epsilon"], mu=float(mu), dt=params["dt"], T_end=T,
                                  U=lambda x, y: (np.full_like(x, U[0]), np.full_like(x, U[1])),
                                  f=lambda x, y, t: f(x, y, t), bc=exact)
            series, state = run_transport_da(space, cover, cfg, exact)
            path = out / f"error_mu{_tag(mu)}_H{_tag(H)}.csv"
            series.to_csv(path)
            files.append(path)
            t, e, _ = series.arrays()
            inw = t <= W + 1e-9
            tp = plateau_time(t[inw], e[inw], params["plateau_factor"], floor=e[-1])
            runs.append({
                "mu": float(mu), "H": float(H), "error_at_window": float(e[inw][-1]),
                "final_error": float(e[-1]), "max_error": float(np.max(e)),
                "plateau_time": tp,
                "decay_rate": decay_rate(t, e, t_max=min(tp, W)),
                "bounded": bool(np.all(np.isfinite(e)) and np.max(e[~inw]) <= np.max(e[inw])),
            })
            logger.info("mu-sweep mu=%g H=%g final=%.3e", mu, H, e[-1])
    keys = list(runs[0])
    files.append(write_csv(out / "sweep_summary.csv", keys, [[r[k] for k in keys] for r in runs]))
    return {"runs": runs, "window": W}, files


# ----------------------------------------------------------------------------
# contaminant transport in a sinusoidal channel


def _channel_inflow_plug(value, tol=1e-12):
    def g(x, y):
        inflow = (x <= tol) & (y > tol) & (y < 1.0 - tol)
        return np.where(inflow, value, 0.0), np.zeros_like(x)

    return g


def stokes_velocity(mesh, nu, inflow):
    """Discrete Stokes velocity: no-slip walls, plug inflow, do-nothing outflow."""
    ms = build_taylor_hood(mesh, ("inflow", "wall"))
    v, p = solve_stokes(ms, nu, _channel_inflow_plug(inflow))
    return ms, v, p


def blob_field(blobs):
    def c(x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for b in blobs:
            (cx, cy), r = b["center"], b["radius"]
            out = np.where((x - cx) ** 2 + (y - cy) ** 2 <= r**2, b["value"], out)
        return out

    return c


def transport_demo(params, out):
    out = Path(out)
    mesh = load_mesh(params["mesh"])
    files = []
    if params.get("velocity_file"):
        vpath = Path(params["velocity_file"])
        if not vpath.exists():
            raise FemdaError(f"velocity file {vpath} does not exist")
        vel_space = build_fe_space(mesh, 2, 2)
        v = np.loadtxt(vpath)
        if v.shape != (vel_space.ndofs,):
            raise FemdaError(f"velocity file has {v.size} values, expected {vel_space.ndofs}")
    else:
        ms, v, p = stokes_velocity(mesh, params["stokes"]["nu"], params["stokes"]["inflow"])
        vel_space = ms.velocity
        np.savetxt(out / "stokes_velocity.txt", v, fmt="%.17g")
        files.append(out / "stokes_velocity.txt")
    U = FeFunction(vel_space, v)
    space = build_fe_space(mesh, 2, 1, ("inflow",))
    c0 = space.interpolate(blob_field(params["blobs"]))
    base = TransportConfig(epsilon=params["epsilon"], mu=0.0, dt=params["dt"], T_end=params["T"], U=U,
                           bc=lambda x, y, t: np.zeros_like(x), dirichlet_tags=("inflow",))
    archive, _ = run_transport_dns(space, base, c0, c0)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    ox, oy = params["grid_origin"]
    cover = build_coarse_cover(mesh, params["H"], (ox, oy), space=space)
    cover.write(out / "cover.txt")
    files.append(out / "cover.txt")
    bbox = (tuple(lo), tuple(hi))
    snaps = [float(s) for s in params["snapshot_times"]]

    def snapshot(tag, coeffs, t):
        path = out / f"snapshot_{tag}_t{_tag(t)}.csv"
        _write_raster(path, raster_snapshot(space, coeffs, bbox, params["raster"]))
        files.append(path)

    for t in snaps:
        snapshot("dns", archive.lookup(t), t)
    runs = []
    for mu in params["mu"]:
        cfg = TransportConfig(epsilon=params["epsilon"], mu=float(mu), dt=params["dt"], T_end=params["T"],
                              U=U, bc=base.bc, dirichlet_tags=("inflow",))
        monitor = None
        if float(mu) == float(params["snapshot_mu"]):
            def monitor(state, system, tag=f"da_mu{_tag(mu)}"):
                levels = [(state.t, state.c_curr)]
                if state.n == 1:
                    levels.insert(0, (system.config.t0, state.c_prev))
                for t_level, c in levels:
                    for t in snaps:
                        if abs(t_level - t) < 1e-9:
                            snapshot(tag, c, t)
        series, state = run_transport_da(space, cover, cfg, archive, monitor=monitor)
        path = out / f"error_mu{_tag(mu)}.csv"
        series.to_csv(path)
        files.append(path)
        t, e, rel = series.arrays()
        runs.append({"mu": float(mu), "final_relative_error": float(rel[-1]),
                     "min_relative_error": float(np.min(rel)), "max_relative_error": float(np.max(rel))})
        logger.info("transport-demo mu=%g final relative error %.3e", mu, rel[-1])
    keys = list(runs[0])
    files.append(write_csv(out / "demo_summary.csv", keys, [[r[k] for k in keys] for r in runs]))
    return {"runs": runs, "n_cells": len(cover), "ndofs": space.ndofs}, files


# ----------------------------------------------------------------------------
# flow past a cylinder


CYLINDER_BC = ("inflow", "outflow", "wall", "cylinder")


def _cylinder_config(params, mu, T_end):
    bc = cylinder_channel_bc()
    return NseConfig(nu=params["nu"], mu=mu, dt=params["dt"], T_end=T_end,
                     velocity_bc=lambda x, y, t: bc(x, y), outflow="dirichlet")


def cylinder_dns(params, out):
    """DNS from rest on ``[0, T1 + window]``; stores the archive from ``T1`` on."""
    out = Path(out)
    mesh = load_mesh(params["mesh"])
    ms = build_taylor_hood(mesh, CYLINDER_BC)
    T1, W = float(params["T1"]), float(params["window"])
    cfg = _cylinder_config(params, 0.0, T1 + W)
    archive, run = run_dns(ms, cfg, store_from=T1)
    archive.manifest.update({"T1": T1, "window": W, "mesh_spec": params["mesh"]})
    files = archive.save(out / "archive")
    files.append(out / "dns_lift_drag.csv")
    run.lift_drag.to_csv(files[-1])
    t = np.array(run.lift_drag.t)
    rows = [[ti, d, e] for ti, d, e in zip(t, run.divergence, run.energy)]
    files.append(write_csv(out / "dns_diagnostics.csv", ["t", "divergence", "kinetic_energy"], rows))
    _, cd, cl = run.lift_drag.arrays()
    late = t >= T1
    summary = {
        "ndofs": ms.size, "velocity_dofs": ms.nv, "steps": len(t),
        "max_divergence": float(max(run.divergence)),
        "cd_mean_window": float(np.mean(cd[late])), "cl_amplitude_window": float(np.ptp(cl[late]) / 2),
        "max_energy": float(max(run.energy)),
    }
    return summary, files


def cylinder_da(params, out, archive=None):
    out = Path(out)
    mesh = load_mesh(params["mesh"])
    ms = build_taylor_hood(mesh, CYLINDER_BC)
    if archive is None:
        if not params.get("archive"):
            raise FemdaError("cylinder da needs an 'archive' directory produced by 'cylinder dns'")
        archive = StateArchive.load(params["archive"])
    T1, W = float(params["T1"]), float(params["window"])
    files, runs = [], []
    dns_ld = None
    for H in params["H"]:
        cover = build_coarse_cover(mesh, H, tuple(params["grid_origin"]), space=ms.velocity)
        for mu in params["mu"]:
            cfg = _cylinder_config(params, float(mu), W)
            run = run_nse_da(ms, cover, cfg, archive, start_time=T1)
            stem = f"mu{_tag(mu)}_H{_tag(H)}"
            p1, p2 = out / f"error_{stem}.csv", out / f"lift_drag_{stem}.csv"
            run.errors.to_csv(p1)
            run.lift_drag.to_csv(p2)
            files += [p1, p2]
            t, e, rel = run.errors.arrays()
            below = np.nonzero(rel < 1e-2)[0]
            q = t >= 0.75 * W
            runs.append({
                "mu": float(mu), "H": float(H), "n_cells": len(cover),
                "final_relative_error": float(rel[-1]),
                "mean_relative_error_last_quarter": float(np.mean(rel[q])),
                "time_below_1e-2": float(t[below[0]]) if below.size else float("inf"),
                "max_divergence": float(max(run.divergence)),
            })
            logger.info("cylinder da mu=%g H=%g final relative error %.3e", mu, H, rel[-1])
    keys = list(runs[0])
    files.append(write_csv(out / "da_summary.csv", keys, [[r[k] for k in keys] for r in runs]))
    return {"runs": runs}, files
