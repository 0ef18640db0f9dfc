"""Nodal-sampling interpolant onto coarse piecewise constants and the diagonal nudging matrix.

For a cover with cells ``E_j`` and paired fine nodes ``k_j`` the interpolant
maps ``w`` to the piecewise constant taking the value ``w(x_{k_j})`` on
``E_j``.  Applied to both arguments of the nudging inner product it collapses
to a diagonal matrix with ``area(E_j)`` at ``(k_j, k_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ArchiveError, DimensionMismatchError
from .quadrature import triangle_rule

PROBE_QUAD_DEGREE = 8


@dataclass(frozen=True)
class NudgeScaling:
    mode: str = "area"
    mu_tilde: float = 1.0

    def __post_init__(self):
        if self.mode not in ("area", "constant"):
            raise ValueError(f"unknown nudging scaling {self.mode!r}")
        if self.mode == "constant" and not self.mu_tilde > 0:
            raise ValueError("constant scaling needs mu_tilde > 0")

    @classmethod
    def area(cls):
        return cls("area")

    @classmethod
    def constant(cls, mu_tilde):
        return cls("constant", float(mu_tilde))


@dataclass(frozen=True)
class PwConstField:
    cover: object
    values: np.ndarray

    def on_triangles(self):
        return self.values[self.cover.cell_of_triangle]

    def l2_norm(self):
        return float(np.sqrt(np.sum(self.cover.cell_areas * self.values**2)))


def _eval_nodes(w, coords, t=None):
    args = (coords[:, 0], coords[:, 1]) if t is None else (coords[:, 0], coords[:, 1], t)
    return np.broadcast_to(np.asarray(w(*args), dtype=float), (len(coords),)).copy()


def paired_coords(cover, space):
    return np.asarray(space.node_coords)[cover.paired_nodes]


def interp_tilde(cover, w, space):
    """Cell values ``w(x_{k_j})``; ``w`` is a callable or a scalar nodal vector on ``space``."""
    if callable(w):
        return PwConstField(cover, _eval_nodes(w, paired_coords(cover, space)))
    w = np.asarray(w, dtype=float)
    if w.shape[0] != space.n_nodes:
        raise DimensionMismatchError("nodal vector length does not match the space")
    return PwConstField(cover, w[cover.paired_nodes].copy())


def _triangle_integrals(mesh, w, degree=PROBE_QUAD_DEGREE):
    rule = triangle_rule(degree)
    pts = np.einsum("qi,eid->eqd", rule.bary, mesh.vertices[mesh.triangles])
    vals = w(pts[..., 0], pts[..., 1])
    return 2.0 * mesh.signed_areas * (np.broadcast_to(vals, pts.shape[:2]) @ rule.weights)


def project_l2_pwconst(cover, w, space=None, degree=PROBE_QUAD_DEGREE):
    """Cell averages of ``w`` (callable, or nodal vector on ``space``) by per-triangle quadrature."""
    mesh = cover.mesh
    if callable(w):
        tri_int = _triangle_integrals(mesh, w, degree)
    else:
        q = space.quad()
        tri_int = np.sum(q.weights * space.at_quadrature(w), axis=1)
    sums = np.bincount(cover.cell_of_triangle, weights=tri_int, minlength=len(cover))
    return PwConstField(cover, sums / cover.cell_areas)


def pwconst_distance(field, w, degree=PROBE_QUAD_DEGREE):
    """``||field - w||_{L2}`` for a callable ``w``, integrated on the fine triangles."""
    mesh = field.cover.mesh
    tv = field.on_triangles()
    return float(np.sqrt(np.sum(_triangle_integrals(mesh, lambda x, y: (w(x, y) - tv[:, None]) ** 2, degree))))


def function_norm(mesh, w, degree=PROBE_QUAD_DEGREE):
    return float(np.sqrt(np.sum(_triangle_integrals(mesh, lambda x, y: w(x, y) ** 2, degree))))


def nudging_dofs(cover, space):
    """Global dof indices carrying observations (one per cell and component)."""
    k = cover.paired_nodes
    return np.concatenate([c * space.n_nodes + k for c in range(space.components)])


def build_nudging_matrix(cover, space, scaling=NudgeScaling()):
    k = cover.paired_nodes
    if len(np.unique(k)) != len(k):
        raise ValueError("paired nodes of the cover are not distinct")
    if k.min() < 0 or k.max() >= space.n_nodes:
        raise ValueError("paired node outside the space")
    vals = cover.cell_areas if scaling.mode == "area" else np.full(len(k), scaling.mu_tilde)
    dofs = nudging_dofs(cover, space)
    data = np.tile(vals, space.components)
    return sp.csr_matrix((data, (dofs, dofs)), shape=(space.ndofs, space.ndofs))


def build_nudging_rhs(D, obs, mu):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[0] != D.shape[1]:
        raise DimensionMismatchError(f"observation length {obs.shape[0]} != {D.shape[1]}")
    return mu * (D @ obs)


def sample_observations(provider, cover, space, t):
    """Observation vector: true values at paired dofs, zero elsewhere.

    ``provider`` is either a callable ``(x, y, t)`` (returning a pair for vector
    spaces) or an archive exposing ``lookup(t)`` that returns full nodal states.
    """
    obs = np.zeros(space.ndofs)
    dofs = nudging_dofs(cover, space)
    if hasattr(provider, "lookup"):
        state = provider.lookup(t)
        if state.shape[0] != space.ndofs:
            raise ArchiveError(f"archived state has {state.shape[0]} dofs, space has {space.ndofs}")
        obs[dofs] = state[dofs]
        return obs
    xy = paired_coords(cover, space)
    vals = provider(xy[:, 0], xy[:, 1], t)
    if space.components == 1:
        obs[dofs] = np.broadcast_to(vals, (len(xy),))
    else:
        obs[dofs] = np.concatenate([np.broadcast_to(v, (len(xy),)) for v in vals])
    return obs


# ----------------------------------------------------------------------------
# measured interpolation constants


@dataclass(frozen=True)
class Probe:
    name: str
    fn: Callable
    grad: Callable  # (x, y) -> (wx, wy)


def _grad_norm(mesh, probe):
    def sq(x, y):
        gx, gy = probe.grad(x, y)
        return np.broadcast_to(gx, np.shape(x)) ** 2 + np.broadcast_to(gy, np.shape(x)) ** 2

    return float(np.sqrt(np.sum(_triangle_integrals(mesh, sq))))


def interp_error_report(cover, space, probes):
    """Measured errors of the interpolant against identity and the L2 projection.

    One row per probe with ``H``, ``err`` = ||P w - w||, ``grad`` = ||grad w||,
    ``ratio`` = err / (H ||grad w||), ``err_l2proj`` = ||P w - P_L2 w|| and the
    two sides of the stability bound ||P w|| <= ||w|| + ratio H ||grad w||.
    """
    mesh = cover.mesh
    rows = []
    for probe in probes:
        pt = interp_tilde(cover, probe.fn, space)
        pl = project_l2_pwconst(cover, probe.fn)
        err = pwconst_distance(pt, probe.fn)
        g = _grad_norm(mesh, probe)
        ratio = err / (cover.H * g) if g > 0 else 0.0
        diff = PwConstField(cover, pt.values - pl.values).l2_norm()
        wn = function_norm(mesh, probe.fn)
        rows.append({
            "probe": probe.name, "H": cover.H, "err": err, "grad": g, "ratio": ratio,
            "err_l2proj": diff, "interp_norm": pt.l2_norm(), "stability_bound": wn + ratio * cover.H * g,
        })
    return rows


def fitted_rate(Hs, errs):
    """Least-squares slope of log(err) against log(H)."""
    Hs, errs = np.asarray(Hs, dtype=float), np.asarray(errs, dtype=float)
    return float(np.polyfit(np.log(Hs), np.log(errs), 1)[0])
