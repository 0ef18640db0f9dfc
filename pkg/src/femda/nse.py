"""IMEX-BDF2 Taylor-Hood assimilation for incompressible Navier-Stokes.

The convecting field is the extrapolation ``w = 2 v^n - v^{n-1}``, so every
step is a linear saddle-point solve

    [ 1.5/dt M + N(w) + nu S + mu D   -B^T ] [v]   [ M (2 v^n - v^{n-1}/2) / dt + f + mu D u_obs ]
    [ -B                               0   ] [p] = [ 0 ]

bordered by a scalar multiplier for the zero-mean pressure constraint when
every velocity boundary is Dirichlet.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .archive import StateArchive
from .errors import ArchiveError
from .fem import (DirectSolver, assemble_load, assemble_mixed_divergence, boundary_edge_quadrature,
                  build_fe_space, convection_local, dirichlet_values, mass_local, mass_norm,
                  pressure_mean_vector, replace_rows, shape_bary_derivatives, shape_values,
                  stiffness_local)
from .nudge import NudgeScaling, build_nudging_matrix, build_nudging_rhs, sample_observations
from .transport import ErrorSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MixedSpace:
    velocity: object
    pressure: object
    zero_mean: bool

    @property
    def nv(self):
        return self.velocity.ndofs

    @property
    def npres(self):
        return self.pressure.ndofs

    @property
    def size(self):
        return self.nv + self.npres + (1 if self.zero_mean else 0)

    def split(self, x):
        return x[:self.nv], x[self.nv:self.nv + self.npres]

    @cached_property
    def B(self):
        return assemble_mixed_divergence(self.velocity, self.pressure)

    @cached_property
    def pressure_mean(self):
        return pressure_mean_vector(self.pressure)


def build_taylor_hood(mesh, dirichlet_tags, zero_mean=None):
    """P2 vector velocity with Dirichlet rows on ``dirichlet_tags`` and P1 pressure.

    ``zero_mean`` defaults to True exactly when all boundary edges are Dirichlet.
    """
    vel = build_fe_space(mesh, 2, 2, tuple(dirichlet_tags))
    pres = build_fe_space(mesh, 1, 1)
    if zero_mean is None:
        zero_mean = set(mesh.boundary_tags) <= set(dirichlet_tags)
    return MixedSpace(vel, pres, bool(zero_mean))


@dataclass(frozen=True)
class NseConfig:
    nu: float
    mu: float
    dt: float
    T_end: float
    velocity_bc: Optional[Callable] = None   # (x, y, t) -> (u, v) on Dirichlet dofs
    outflow: str = "dirichlet"               # or "do_nothing"
    f: Optional[Callable] = None             # (x, y, t) -> (fx, fy)
    scaling: NudgeScaling = field(default_factory=NudgeScaling)
    convection: Optional[str] = None         # skew | plain | none; default follows outflow
    t0: float = 0.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.outflow not in ("dirichlet", "do_nothing"):
            raise ValueError(f"unknown outflow mode {self.outflow!r}")
        if self.convection not in (None, "skew", "plain", "none"):
            raise ValueError(f"unknown convection form {self.convection!r}")

    @property
    def convection_form(self):
        if self.convection is not None:
            return self.convection
        return "skew" if self.outflow == "dirichlet" else "plain"


def channel_inflow(height=0.41, umax=1.5):
    """Parabolic profile ``4 umax y (H - y) / H^2``; with umax = 1.5 this is ``6 y (0.41 - y) / 0.41^2``."""

    def g(x, y, t=0.0):
        return 4.0 * umax * y * (height - y) / height**2, np.zeros_like(y)

    return g


def cylinder_channel_bc(center=(0.2, 0.2), radius=0.05, inflow=None):
    """Dirichlet data for the channel-with-cylinder benchmark.

    The parabolic profile on the outer boundary (it vanishes on the walls) and
    no-slip on the obstacle.  Points within ``2 * radius`` of the center count
    as obstacle points, which covers edge midpoints of the polygonal boundary.
    """
    inflow = inflow or channel_inflow()

    def g(x, y, t=0.0):
        u, v = inflow(x, y)
        on_obstacle = np.hypot(np.asarray(x) - center[0], np.asarray(y) - center[1]) < 2.0 * radius
        return np.where(on_obstacle, 0.0, u), np.where(on_obstacle, 0.0, v)

    return g


@dataclass(frozen=True)
class NseState:
    v_prev: np.ndarray
    v_curr: np.ndarray
    p_curr: np.ndarray
    t: float
    n: int


class NseOperators:
    """Time-independent pieces of the discrete system on a mixed space."""

    def __init__(self, ms, cover, config):
        self.ms = ms
        self.cover = cover
        self.config = config
        vel = ms.velocity
        self.scalar_pattern = vel.pattern
        self.M_loc = mass_local(vel)
        self.S_loc = stiffness_local(vel)
        self.M = sp.kron(sp.identity(2), vel.pattern.matrix(self.M_loc), format="csr")
        if cover is not None and config.mu > 0:
            self.D = build_nudging_matrix(cover, vel, config.scaling)
        else:
            self.D = sp.csr_matrix((ms.nv, ms.nv))
        self.B = ms.B
        self.dirichlet = vel.dirichlet_dofs

    def velocity_block(self, w_coeffs, time_coeff=None):
        """``c M + N(w) + nu S + mu D`` for the two velocity components."""
        cfg = self.config
        c = 1.5 / cfg.dt if time_coeff is None else time_coeff
        local = c * self.M_loc + cfg.nu * self.S_loc
        form = cfg.convection_form
        if form != "none" and w_coeffs is not None and np.any(w_coeffs):
            local = local + convection_local(self.ms.velocity, _as_fe(self.ms.velocity, w_coeffs),
                                             skew=(form == "skew"))
        K = self.scalar_pattern.matrix(local)
        A = sp.block_diag([K, K], format="csr")
        if cfg.mu > 0:
            A = A + cfg.mu * self.D
        return A

    def saddle(self, A_vel):
        ms = self.ms
        blocks = [[A_vel, -self.B.T], [-self.B, None]]
        if ms.zero_mean:
            m = sp.csr_matrix(ms.pressure_mean[:, None])
            blocks = [[A_vel, -self.B.T, None], [-self.B, None, m], [None, m.T, None]]
        K = sp.bmat(blocks, format="csr")
        return replace_rows(K, self.dirichlet)


def _as_fe(space, coeffs):
    from .fem import FeFunction

    return FeFunction(space, coeffs)


@dataclass
class NseStepSystem:
    ops: NseOperators
    A: sp.csr_matrix
    state: NseState

    def rhs(self, obs=None):
        ops, cfg, st = self.ops, self.ops.config, self.state
        ms = ops.ms
        t_new = st.t + cfg.dt
        b = np.zeros(ms.size)
        bv = ops.M @ (2.0 * st.v_curr - 0.5 * st.v_prev) / cfg.dt
        if cfg.f is not None:
            bv += assemble_load(ms.velocity, lambda x, y: cfg.f(x, y, t_new))
        if cfg.mu > 0 and obs is not None:
            bv += build_nudging_rhs(ops.D, obs, cfg.mu)
        b[:ms.nv] = bv
        if ops.dirichlet.size:
            g = (lambda x, y: cfg.velocity_bc(x, y, t_new)) if cfg.velocity_bc is not None else 0.0
            b[ops.dirichlet] = dirichlet_values(ms.velocity, g, ops.dirichlet)[ops.dirichlet]
        return b


def assemble_nse_system(ms, cover, config, state, ops=None):
    ops = ops or NseOperators(ms, cover, config)
    w = 2.0 * state.v_curr - state.v_prev
    return NseStepSystem(ops, ops.saddle(ops.velocity_block(w)), state)


def zero_state(ms, config):
    z = np.zeros(ms.nv)
    return NseState(z, z.copy(), np.zeros(ms.npres), config.t0 + config.dt, 1)


def step_nse(state, system, obs=None, solver=None):
    solver = solver or DirectSolver(saddle=True)
    x = solver.factorize(system.A).solve(system.rhs(obs))
    v, p = system.ops.ms.split(x)
    return NseState(state.v_curr, v.copy(), p.copy(), state.t + system.ops.config.dt, state.n + 1)


def divergence_residual(ms, v):
    return float(np.max(np.abs(ms.B @ v))) if ms.npres else 0.0


def kinetic_energy(M, v):
    return 0.5 * float(v @ (M @ v))


def solve_stokes(ms, nu, velocity_bc, f=None):
    """Steady Stokes solve ``nu (grad u, grad v) - (p, div v) = (f, v)``, ``div u = 0``."""
    cfg = NseConfig(nu=nu, mu=0.0, dt=1.0, T_end=1.0, velocity_bc=lambda x, y, t: velocity_bc(x, y),
                    outflow="dirichlet" if ms.zero_mean else "do_nothing", convection="none")
    ops = NseOperators(ms, None, cfg)
    A = ops.saddle(ops.velocity_block(None, time_coeff=0.0))
    b = np.zeros(ms.size)
    if f is not None:
        b[:ms.nv] = assemble_load(ms.velocity, f)
    d = ops.dirichlet
    b[d] = dirichlet_values(ms.velocity, velocity_bc, d)[d]
    x = DirectSolver(saddle=True).factorize(A).solve(b)
    v, p = ms.split(x)
    return v.copy(), p.copy()


# ----------------------------------------------------------------------------
# lift and drag


class LiftDrag:
    """Drag and lift coefficients from direct boundary integrals on the obstacle.

    ``c_d = scale * int_S (nu d(u_t)/dn n_y - p n_x) dS`` and
    ``c_l = -scale * int_S (nu d(u_t)/dn n_x + p n_y) dS`` with ``n`` the unit
    normal pointing from the obstacle into the fluid and ``t = (n_y, -n_x)``.
    ``scale = 2 / (U_mean^2 D) = 20`` for the channel benchmark.
    """

    def __init__(self, ms, tag="cylinder", scale=20.0, n_points=4):
        self.ms = ms
        self.scale = scale
        vel, pres = ms.velocity, ms.pressure
        tri, bary, w, n_out = boundary_edge_quadrature(vel, tag, n_points)
        self.w = w
        self.n = -n_out
        self.t = np.column_stack([self.n[:, 1], -self.n[:, 0]])
        dl = shape_bary_derivatives(2, bary)  # (np, 6, 3)
        G = vel.bary_gradients[tri]           # (np, 3, 2)
        self.dphi = np.einsum("pai,pid->pad", dl, G)
        self.vel_nodes = vel.elem_nodes[tri]
        self.p_phi = shape_values(1, bary)
        self.p_nodes = pres.elem_nodes[tri]

    def __call__(self, v, p, nu):
        vel = self.ms.velocity
        comps = vel.split(v)
        # grad[p, c, d] = d u_c / d x_d at each boundary point
        grad = np.stack([np.einsum("pa,pad->pd", comps[c][self.vel_nodes], self.dphi) for c in range(2)], axis=1)
        dudn = np.einsum("pcd,pd->pc", grad, self.n)
        dut_dn = np.sum(dudn * self.t, axis=1)
        pv = np.sum(p[self.p_nodes] * self.p_phi, axis=1)
        nx, ny = self.n[:, 0], self.n[:, 1]
        cd = self.scale * np.sum(self.w * (nu * dut_dn * ny - pv * nx))
        cl = -self.scale * np.sum(self.w * (nu * dut_dn * nx + pv * ny))
        return float(cd), float(cl)


def lift_drag(state, ms, tag, nu, scale=20.0):
    return LiftDrag(ms, tag, scale)(state.v_curr, state.p_curr, nu)


@dataclass
class LiftDragSeries:
    t: list = field(default_factory=list)
    cd: list = field(default_factory=list)
    cl: list = field(default_factory=list)

    def append(self, t, cd, cl):
        self.t.append(float(t))
        self.cd.append(float(cd))
        self.cl.append(float(cl))

    def arrays(self):
        return np.array(self.t), np.array(self.cd), np.array(self.cl)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "cd", "cl"])
        for row in zip(self.t, self.cd, self.cl):
            w.writerow([repr(v) for v in row])
        if path is not None:
            with open(path, "w") as fh:
                fh.write(buf.getvalue())
        return buf.getvalue()


# ----------------------------------------------------------------------------
# drivers


@dataclass
class NseRun:
    errors: ErrorSeries
    lift_drag: LiftDragSeries
    divergence: list
    energy: list
    state: NseState


def _march(ms, cover, config, state, n_steps, provider=None, obs_offset=0.0, on_step=None,
           lift_tag=None):
    ops = NseOperators(ms, cover, config)
    solver = DirectSolver(saddle=True)
    ld = LiftDrag(ms, lift_tag) if lift_tag else None
    lds, div, energy = LiftDragSeries(), [], []
    for _ in range(n_steps):
        t_new = state.t + config.dt
        obs = None
        if config.mu > 0 and provider is not None:
            obs = sample_observations(provider, cover, ms.velocity, t_new + obs_offset)
        system = assemble_nse_system(ms, cover, config, state, ops)
        state = step_nse(state, system, obs, solver)
        div.append(divergence_residual(ms, state.v_curr))
        energy.append(kinetic_energy(ops.M, state.v_curr))
        if ld is not None:
            lds.append(state.t, *ld(state.v_curr, state.p_curr, config.nu))
        if on_step is not None:
            on_step(state, ops)
    return state, ops, lds, div, energy


def run_dns(ms, config, store_from=None, state=None, lift_tag="cylinder", mesh_hash=None):
    """Unassimilated run from rest; stores every velocity with ``t >= store_from``.

    Returns ``(archive, NseRun)``; the run's error series is empty.
    """
    config = replace(config, mu=0.0)
    state = state or zero_state(ms, config)
    store_from = config.t0 if store_from is None else store_from
    manifest = {
        "mesh_hash": mesh_hash or ms.velocity.mesh.fingerprint(), "dt": config.dt, "nu": config.nu,
        "outflow": config.outflow, "ndofs": ms.nv, "store_from": store_from,
    }
    archive = StateArchive(manifest)
    tol = 1e-9 * max(1.0, abs(store_from))
    for t, v, n in ((config.t0, state.v_prev, 0), (state.t, state.v_curr, 1)):
        if t >= store_from - tol:
            archive.append(n, t, v)

    def keep(st, ops):
        if st.t >= store_from - tol:
            archive.append(st.n, st.t, st.v_curr)

    n_steps = int(round((config.T_end - config.t0) / config.dt)) - 1
    state, ops, lds, div, energy = _march(ms, None, config, state, n_steps, on_step=keep, lift_tag=lift_tag)
    return archive, NseRun(ErrorSeries(), lds, div, energy, state)


def run_nse_da(ms, cover, config, archive, start_time, lift_tag="cylinder"):
    """Assimilate from zero initial data against archived truth.

    DA time ``t`` corresponds to archive time ``start_time + t``; both
    observations and the reference come from the archive at that time.
    """
    archive.check_compatible(dt=float(config.dt), nu=float(config.nu), ndofs=ms.nv)
    if "mesh_hash" in archive.manifest and archive.manifest["mesh_hash"] != ms.velocity.mesh.fingerprint():
        raise ArchiveError("archive was produced on a different mesh")
    state = zero_state(ms, config)
    series = ErrorSeries()
    for t, v in ((config.t0, state.v_prev), (state.t, state.v_curr)):
        ref = archive.lookup(start_time + t)
        series.append(t, mass_norm(_mass(ms), v - ref), mass_norm(_mass(ms), ref))

    def record(st, ops):
        ref = archive.lookup(start_time + st.t)
        series.append(st.t, mass_norm(ops.M, st.v_curr - ref), mass_norm(ops.M, ref))

    n_steps = int(round((config.T_end - config.t0) / config.dt)) - 1
    state, ops, lds, div, energy = _march(ms, cover, config, state, n_steps, provider=archive,
                                          obs_offset=start_time, on_step=record, lift_tag=lift_tag)
    return NseRun(series, lds, div, energy, state)


def _mass(ms):
    vel = ms.velocity
    return sp.kron(sp.identity(2), vel.pattern.matrix(mass_local(vel)), format="csr")
