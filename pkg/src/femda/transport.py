"""BDF2 finite-element data assimilation for advection-diffusion transport.

Each step solves

    (1.5/dt M + N + eps S + mu D) c^{n+1} = M (2 c^n - c^{n-1} / 2) / dt + f^{n+1} + mu D c_obs^{n+1}

with nodal Dirichlet rows on the tagged part of the boundary and natural
(zero-flux) conditions elsewhere.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fem import (DirectSolver, FeFunction, apply_dirichlet, assemble_load, assemble_operator,
                  dirichlet_values, l2_norm_error, mass_norm, replace_rows)
from .mesh import GAMMA1
from .nudge import NudgeScaling, build_nudging_matrix, build_nudging_rhs, sample_observations


@dataclass(frozen=True)
class TransportConfig:
    epsilon: float
    mu: float
    dt: float
    T_end: float
    U: object = None
    f: Optional[Callable] = None
    bc: Optional[Callable] = None
    dirichlet_tags: tuple = (GAMMA1,)
    scaling: NudgeScaling = field(default_factory=NudgeScaling)
    t0: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


@dataclass(frozen=True)
class TransportState:
    c_prev: np.ndarray
    c_curr: np.ndarray
    t: float
    n: int


@dataclass
class ErrorSeries:
    t: list = field(default_factory=list)
    l2_error: list = field(default_factory=list)
    relative_l2_error: list = field(default_factory=list)

    def append(self, t, err, ref_norm):
        if self.t and t <= self.t[-1]:
            raise ValueError("error series times must increase")
        self.t.append(float(t))
        self.l2_error.append(float(err))
        self.relative_l2_error.append(float(err / ref_norm) if ref_norm > 0 else float("nan"))

    def __len__(self):
        return len(self.t)

    def arrays(self):
        return np.array(self.t), np.array(self.l2_error), np.array(self.relative_l2_error)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "l2_error", "relative_l2_error"])
        for row in zip(self.t, self.l2_error, self.relative_l2_error):
            w.writerow([repr(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                out.t.append(float(row["t"]))
                out.l2_error.append(float(row["l2_error"]))
                out.relative_l2_error.append(float(row["relative_l2_error"]))
        return out


class TransportSystem:
    """Cached operators and the factorized BDF2 matrix for a steady velocity."""

    def __init__(self, space, cover, config):
        if space.components != 1:
            raise ValueError("transport needs a scalar space")
        self.space = space
        self.cover = cover
        self.config = config
        self.M = assemble_operator(space, "mass")
        self.S = assemble_operator(space, "stiffness")
        if config.U is None:
            self.N = sp.csr_matrix(self.M.shape)
        else:
            self.N = assemble_operator(space, "convection", velocity=config.U, skew=False)
        self.D = build_nudging_matrix(cover, space, config.scaling) if cover is not None else sp.csr_matrix(self.M.shape)
        self.A_free = (1.5 / config.dt) * self.M + self.N + config.epsilon * self.S + config.mu * self.D
        self.A = replace_rows(self.A_free, space.dirichlet_dofs)
        self.A.eliminate_zeros()
        self.solver = DirectSolver().factorize(self.A)

    def rhs(self, state, obs):
        cfg = self.config
        t_new = state.t + cfg.dt
        b = self.M @ (2.0 * state.c_curr - 0.5 * state.c_prev) / cfg.dt
        if cfg.f is not None:
            b += assemble_load(self.space, lambda x, y: cfg.f(x, y, t_new))
        if cfg.mu > 0 and obs is not None:
            b += build_nudging_rhs(self.D, obs, cfg.mu)
        dofs = self.space.dirichlet_dofs
        if dofs.size:
            g = (lambda x, y: cfg.bc(x, y, t_new)) if cfg.bc is not None else 0.0
            b[dofs] = dirichlet_values(self.space, g, dofs)[dofs]
        return b


def assemble_transport_system(space, cover, config):
    return TransportSystem(space, cover, config)


def initial_state(space, config, c0=None, c1=None):
    z = np.zeros(space.ndofs)
    c0 = z if c0 is None else np.asarray(c0, dtype=float)
    c1 = z if c1 is None else np.asarray(c1, dtype=float)
    return TransportState(c0.copy(), c1.copy(), config.t0 + config.dt, 1)


def step_transport(state, system, obs=None):
    b = system.rhs(state, obs)
    c_new = system.solver.solve(b)
    return TransportState(state.c_curr, c_new, state.t + system.config.dt, state.n + 1)


def n_steps(config):
    """Steps needed to go from ``t0 + dt`` (the second initial level) to ``T_end``."""
    return int(round((config.T_end - config.t0) / config.dt)) - 1


def _error(system, c, reference, t):
    """Absolute error and reference norm for an analytic or archived reference."""
    if reference is None:
        return float("nan"), float("nan")
    if hasattr(reference, "lookup"):
        ref = reference.lookup(t)
        return mass_norm(system.M, c - ref), mass_norm(system.M, ref)
    fn = lambda x, y: reference(x, y, t)
    return l2_norm_error(system.space, c, fn), l2_norm_error(system.space, np.zeros_like(c), fn)


def run_transport_da(space, cover, config, provider, reference=None, c0=None, c1=None,
                     monitor=None, system=None):
    """Run the assimilation loop and record the error against ``reference`` every step.

    ``provider`` supplies observations (callable ``(x, y, t)`` or an archive);
    ``reference`` defaults to the provider.  ``monitor(state, system)`` is
    called after each level, including both initial levels.
    """
    reference = provider if reference is None else reference
    system = system or assemble_transport_system(space, cover, config)
    state = initial_state(space, config, c0, c1)
    series = ErrorSeries()
    for t, c in ((config.t0, state.c_prev), (state.t, state.c_curr)):
        series.append(t, *_error(system, c, reference, t))
    if monitor is not None:
        monitor(state, system)
    for _ in range(n_steps(config)):
        t_new = state.t + config.dt
        obs = sample_observations(provider, cover, space, t_new) if (config.mu > 0 and provider is not None) else None
        state = step_transport(state, system, obs)
        series.append(state.t, *_error(system, state.c_curr, reference, state.t))
        if monitor is not None:
            monitor(state, system)
    return series, state


def run_transport_dns(space, config, c0=None, c1=None, archive=None):
    """Unassimilated run storing every level in ``archive`` (created if omitted)."""
    from .archive import StateArchive

    config = replace(config, mu=0.0)
    archive = archive if archive is not None else StateArchive()
    system = assemble_transport_system(space, None, config)
    state = initial_state(space, config, c0, c1)
    archive.append(0, config.t0, state.c_prev)
    archive.append(1, state.t, state.c_curr)
    for _ in range(n_steps(config)):
        state = step_transport(state, system, None)
        archive.append(state.n, state.t, state.c_curr)
    return archive, state
