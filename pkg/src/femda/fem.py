"""Lagrange P1/P2 spaces, sparse assembly, Dirichlet rows, direct solves and norms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import DimensionMismatchError, SingularMatrixError
from .mesh import TriMesh
from .quadrature import line_rule, triangle_rule

logger = logging.getLogger(__name__)

# Local edge i joins the two vertices other than i.
_EDGE_VERTS = np.array([[1, 2], [2, 0], [0, 1]])

G_MATRIX = np.array([[0.5, -1.0], [-1.0, 2.5]])


def shape_values(degree, bary):
    """Nodal basis values at barycentric points, shape ``(npts, nloc)``."""
    L = np.asarray(bary, dtype=float)
    if degree == 1:
        return L.copy()
    if degree == 2:
        l0, l1, l2 = L[:, 0], L[:, 1], L[:, 2]
        return np.column_stack([
            l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
        ])
    raise ValueError(f"unsupported polynomial degree {degree}")


def shape_bary_derivatives(degree, bary):
    """Derivatives of each basis function with respect to the three barycentrics.

    Returns ``(npts, nloc, 3)``; physical gradients follow by contracting with
    the (constant) barycentric gradients of the element.
    """
    L = np.asarray(bary, dtype=float)
    n = len(L)
    if degree == 1:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if degree == 2:
        d = np.zeros((n, 6, 3))
        for i in range(3):
            d[:, i, i] = 4 * L[:, i] - 1
        for e, (a, b) in enumerate(_EDGE_VERTS):
            d[:, 3 + e, a] = 4 * L[:, b]
            d[:, 3 + e, b] = 4 * L[:, a]
        return d
    raise ValueError(f"unsupported polynomial degree {degree}")


def _bary_gradients(mesh):
    p = mesh.vertices[mesh.triangles]
    area2 = 2.0 * mesh.signed_areas
    g = np.empty((mesh.n_triangles, 3, 2))
    for i, (a, b) in enumerate(_EDGE_VERTS):
        # gradient of lambda_i is the inward normal of the opposite edge over 2|T|
        g[:, i, 0] = (p[:, a, 1] - p[:, b, 1]) / area2
        g[:, i, 1] = (p[:, b, 0] - p[:, a, 0]) / area2
    return g


@dataclass
class _QuadData:
    points: np.ndarray   # (nt, nq, 2)
    weights: np.ndarray  # (nt, nq), physical
    phi: np.ndarray      # (nq, nloc)
    dphi: np.ndarray     # (nt, nq, nloc, 2)


@dataclass
class _Pattern:
    """CSR pattern of the element-to-node scatter plus the entry map into it."""

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    entry: np.ndarray  # flat local entry -> position in data

    def matrix(self, local):
        data = np.bincount(self.entry, weights=np.ravel(local), minlength=len(self.indices))
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def _pattern(rows, cols, shape):
    rows = np.ravel(rows).astype(np.int64)
    cols = np.ravel(cols).astype(np.int64)
    keys = rows * shape[1] + cols
    uniq, entry = np.unique(keys, return_inverse=True)
    r, c = np.divmod(uniq, shape[1])
    indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=shape[0]))])
    return _Pattern(shape, indptr, c, entry.ravel())


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Continuous Lagrange space of degree 1 or 2, scalar or 2-vector.

    Nodes are numbered vertices first, then edge midpoints in edge order.
    Vector dofs are blocked by component: dof ``c * n_nodes + node``.
    """

    mesh: TriMesh
    degree: int
    components: int
    node_coords: np.ndarray
    elem_nodes: np.ndarray
    dirichlet: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.node_coords)

    @property
    def ndofs(self):
        return self.n_nodes * self.components

    @property
    def nloc(self):
        return self.elem_nodes.shape[1]

    @property
    def dof_coords(self):
        return np.tile(self.node_coords, (self.components, 1))

    @cached_property
    def dirichlet_nodes(self):
        if not self.dirichlet:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(list(self.dirichlet.values())))

    @cached_property
    def dirichlet_dofs(self):
        nodes = self.dirichlet_nodes
        return np.concatenate([c * self.n_nodes + nodes for c in range(self.components)])

    def component_dofs(self, c):
        return np.arange(c * self.n_nodes, (c + 1) * self.n_nodes)

    @cached_property
    def bary_gradients(self):
        return _bary_gradients(self.mesh)

    @cached_property
    def _quad_cache(self):
        return {}

    def quad(self, degree=None):
        degree = 2 * self.degree + 2 if degree is None else degree
        if degree not in self._quad_cache:
            rule = triangle_rule(degree)
            m = self.mesh
            pts = np.einsum("qi,eid->eqd", rule.bary, m.vertices[m.triangles])
            w = 2.0 * m.signed_areas[:, None] * rule.weights[None, :]
            phi = shape_values(self.degree, rule.bary)
            dl = shape_bary_derivatives(self.degree, rule.bary)
            dphi = np.einsum("qai,eid->eqad", dl, self.bary_gradients)
            self._quad_cache[degree] = _QuadData(pts, w, phi, dphi)
        return self._quad_cache[degree]

    @cached_property
    def pattern(self):
        """Scalar node-by-node CSR pattern of the element connectivity."""
        en = self.elem_nodes
        rows = np.repeat(en[:, :, None], self.nloc, axis=2)
        cols = np.repeat(en[:, None, :], self.nloc, axis=1)
        return _pattern(rows, cols, (self.n_nodes, self.n_nodes))

    def interpolate(self, fn, *args):
        """Nodal interpolant of ``fn(x, y, *args)``; vector fns return a tuple."""
        x, y = self.node_coords[:, 0], self.node_coords[:, 1]
        vals = fn(x, y, *args)
        if self.components == 1:
            return np.broadcast_to(np.asarray(vals, dtype=float), (self.n_nodes,)).copy()
        return np.concatenate([np.broadcast_to(np.asarray(v, dtype=float), (self.n_nodes,)) for v in vals])

    def split(self, coeffs):
        return np.asarray(coeffs).reshape(self.components, self.n_nodes)

    def at_quadrature(self, coeffs, degree=None):
        """Values ``(nt, nq)`` (scalar) or ``(nt, nq, 2)`` (vector) at quadrature points."""
        q = self.quad(degree)
        comps = self.split(coeffs)
        vals = [comps[c][self.elem_nodes] @ q.phi.T for c in range(self.components)]
        return vals[0] if self.components == 1 else np.stack(vals, axis=-1)

    def gradient_at_quadrature(self, coeffs, degree=None):
        """Gradients ``(nt, nq, 2)`` (scalar) or ``(nt, nq, 2, 2)`` with ``[..., c, d] = d u_c / d x_d``."""
        q = self.quad(degree)
        comps = self.split(coeffs)
        g = [np.einsum("ea,eqad->eqd", comps[c][self.elem_nodes], q.dphi) for c in range(self.components)]
        return g[0] if self.components == 1 else np.stack(g, axis=2)


def build_fe_space(mesh, k=1, components=1, dirichlet_tags=()):
    if k not in (1, 2):
        raise ValueError(f"unsupported polynomial degree {k}; only 1 and 2 are available")
    if components not in (1, 2):
        raise ValueError("components must be 1 or 2")
    nv = mesh.n_vertices
    if k == 1:
        coords = np.array(mesh.vertices)
        elem = np.array(mesh.triangles)
    else:
        edges = mesh.edges
        mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        coords = np.vstack([mesh.vertices, mids])
        elem = np.hstack([mesh.triangles, nv + mesh.triangle_edges])
    if isinstance(dirichlet_tags, str):
        dirichlet_tags = (dirichlet_tags,)
    dirichlet = {}
    if k == 2:
        edge_id = {tuple(e): i for i, e in enumerate(mesh.edges)}
    for tag in dirichlet_tags:
        be = mesh.edges_with_tag(tag)
        nodes = [be.ravel()]
        if k == 2:
            nodes.append(nv + np.array([edge_id[(min(a, b), max(a, b))] for a, b in be], dtype=np.int64))
        dirichlet[tag] = np.unique(np.concatenate(nodes)).astype(np.int64)
    coords.flags.writeable = False
    elem.flags.writeable = False
    return FeSpace(mesh, k, components, coords, elem, dirichlet)


# ----------------------------------------------------------------------------
# assembly


def _expand(space, scalar):
    if space.components == 1:
        return scalar.tocsr()
    return sp.kron(sp.identity(space.components, format="csr"), scalar, format="csr")


def mass_local(space, degree=None):
    q = space.quad(degree)
    return np.einsum("eq,qa,qb->eab", q.weights, q.phi, q.phi)


def stiffness_local(space, coeff=1.0, degree=None):
    q = space.quad(degree)
    w = q.weights
    if callable(coeff):
        w = w * coeff(q.points[..., 0], q.points[..., 1])
    else:
        w = w * coeff
    return np.einsum("eq,eqad,eqbd->eab", w, q.dphi, q.dphi)


def velocity_at_quadrature(space, velocity, degree=None):
    """Normalize an advecting field to values ``(nt, nq, 2)`` at ``space``'s quadrature points."""
    q = space.quad(degree)
    if isinstance(velocity, FeFunction):
        vs = velocity.space
        if vs.components != 2 or vs.mesh is not space.mesh:
            raise DimensionMismatchError("advecting velocity must be a vector field on the same mesh")
        return vs.at_quadrature(velocity.coeffs, _shared_degree(space, vs, degree))
    if callable(velocity):
        ux, uy = velocity(q.points[..., 0], q.points[..., 1])
        out = np.empty(q.points.shape)
        out[..., 0] = ux
        out[..., 1] = uy
        return out
    velocity = np.asarray(velocity, dtype=float)
    if velocity.shape != q.points.shape:
        raise DimensionMismatchError(f"velocity values have shape {velocity.shape}, expected {q.points.shape}")
    return velocity


def _shared_degree(space, other, degree):
    d = 2 * space.degree + 2 if degree is None else degree
    # the velocity space must use the same rule; quad() is cached per degree
    other.quad(d)
    return d


def convection_local(space, velocity, skew=False, degree=None):
    """Element matrices of ``(w . grad phi_b, phi_a)``, or its skew-symmetric part."""
    q = space.quad(degree)
    w = velocity_at_quadrature(space, velocity, degree)
    wdphi = np.einsum("eqd,eqbd->eqb", w, q.dphi)
    K = np.einsum("eq,eqb,qa->eab", q.weights, wdphi, q.phi)
    if skew:
        K = 0.5 * (K - K.transpose(0, 2, 1))
    return K


@dataclass(frozen=True)
class FeFunction:
    space: FeSpace
    coeffs: np.ndarray


def assemble_operator(space, kind, coeff=1.0, velocity=None, skew=False):
    """Assemble ``mass``, ``stiffness`` or ``convection`` on ``space``.

    Vector spaces get the block-diagonal (componentwise) operator.  For
    convection, ``velocity`` is a callable ``(x, y) -> (ux, uy)``, an
    :class:`FeFunction` on a vector space over the same mesh, or raw values at
    quadrature points.
    """
    if kind == "mass":
        local = mass_local(space)
    elif kind == "stiffness":
        local = stiffness_local(space, coeff)
    elif kind == "convection":
        if velocity is None:
            raise ValueError("convection needs a velocity field")
        local = convection_local(space, velocity, skew)
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    A = _expand(space, space.pattern.matrix(local))
    A.eliminate_zeros()
    return A


def assemble_load(space, f, degree=None):
    """Load vector ``(f, phi_i)``; ``f(x, y)`` returns a scalar or, for vector spaces, a pair."""
    q = space.quad(degree)
    vals = f(q.points[..., 0], q.points[..., 1])
    comps = [vals] if space.components == 1 else list(vals)
    out = []
    for v in comps:
        v = np.broadcast_to(np.asarray(v, dtype=float), q.weights.shape)
        loc = np.einsum("eq,qa->ea", q.weights * v, q.phi)
        out.append(np.bincount(space.elem_nodes.ravel(), weights=loc.ravel(), minlength=space.n_nodes))
    return np.concatenate(out)


def assemble_mixed_divergence(vel, pres):
    """``B[q, v] = (div psi_v, phi_q)`` for the Taylor-Hood pair (vector P2, scalar P1)."""
    if vel.components != 2 or pres.components != 1:
        raise ValueError("divergence needs a vector velocity space and a scalar pressure space")
    if not (vel.degree == 2 and pres.degree == 1) or vel.mesh is not pres.mesh:
        raise ValueError("only the Taylor-Hood pairing (P2 velocity, P1 pressure, same mesh) is supported")
    q = vel.quad()
    rule = triangle_rule(2 * vel.degree + 2)
    psi = shape_values(1, rule.bary)  # (nq, 3)
    blocks = []
    for c in range(2):
        loc = np.einsum("eq,qa,eqb->eab", q.weights, psi, q.dphi[..., c])
        rows = np.repeat(pres.elem_nodes[:, :, None], vel.nloc, axis=2)
        cols = np.repeat(vel.elem_nodes[:, None, :], pres.nloc, axis=1)
        pat = _pattern(rows, cols, (pres.n_nodes, vel.n_nodes))
        blocks.append(pat.matrix(loc))
    B = sp.hstack(blocks, format="csr")
    B.eliminate_zeros()
    return B


def pressure_mean_vector(pres):
    """``(phi_q, 1)`` for each pressure basis function."""
    return assemble_load(pres, lambda x, y: np.ones_like(x))


# ----------------------------------------------------------------------------
# boundary conditions and solves


def dirichlet_values(space, g, dofs=None):
    """Values of ``g`` at the Dirichlet dofs of ``space`` (full-length vector, zero elsewhere)."""
    full = space.interpolate(g) if callable(g) else np.broadcast_to(np.asarray(g, dtype=float), (space.ndofs,))
    out = np.zeros(space.ndofs)
    dofs = space.dirichlet_dofs if dofs is None else dofs
    out[dofs] = full[dofs]
    return out


def replace_rows(A, rows):
    """Zero the given CSR rows and put 1 on their diagonal (in place on a copy)."""
    A = sp.csr_matrix(A, copy=True)
    n = A.shape[0]
    is_bd = np.zeros(n, dtype=bool)
    is_bd[rows] = True
    row_of = np.repeat(np.arange(n), np.diff(A.indptr))
    sel = is_bd[row_of]
    A.data[sel] = 0.0
    diag = sel & (A.indices == row_of)
    A.data[diag] = 1.0
    missing = np.setdiff1d(np.asarray(rows), row_of[diag])
    if missing.size:
        A = A + sp.csr_matrix((np.ones(missing.size), (missing, missing)), shape=A.shape)
    return A


def apply_dirichlet(A, b, space, g, symmetric=False, dofs=None):
    """Nodal Dirichlet enforcement by row replacement.

    Returns modified copies ``(A, b)``: each Dirichlet row becomes the identity
    row and ``b[i] = g(x_i)``.  With ``symmetric=True`` the Dirichlet columns
    are eliminated as well, moving their contribution to the right-hand side.
    ``dofs`` restricts enforcement to a subset (defaults to all Dirichlet dofs).
    """
    dofs = space.dirichlet_dofs if dofs is None else np.asarray(dofs)
    vals = dirichlet_values(space, g, dofs)
    b = np.array(b, dtype=float, copy=True)
    n = A.shape[0]
    if symmetric:
        gv = np.zeros(n)
        gv[dofs] = vals[dofs]
        b -= A @ gv
        keep = np.ones(n)
        keep[dofs] = 0.0
        A = sp.csr_matrix(A @ sp.diags(keep))
    A = replace_rows(A, dofs)
    A.eliminate_zeros()
    b[dofs] = vals[dofs]
    return A, b


class DirectSolver:
    """Sparse LU with factor reuse: refactor only when a different matrix is passed.

    ``saddle=True`` switches SuperLU to symmetric mode (minimum degree on
    ``A^T + A`` with a small diagonal pivot threshold), which keeps fill low
    for velocity-pressure systems; the residual check below guards it.
    """

    def __init__(self, tol=1e-10, refine_steps=2, saddle=False):
        self.saddle = saddle
        self.tol = tol
        self.refine_steps = refine_steps
        self._A = None
        self._lu = None
        self.n_factorizations = 0

    def factorize(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatchError(f"matrix must be square, got {A.shape}")
        _check_structure(A)
        try:
            if self.saddle:
                self._lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1e-3,
                                options={"SymmetricMode": True})
            else:
                self._lu = splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SingularMatrixError(f"sparse LU failed: {exc}") from exc
        self._A = A
        self.n_factorizations += 1
        return self

    def solve(self, b, A=None):
        if A is not None and A is not self._A:
            self.factorize(A)
        if self._lu is None:
            raise RuntimeError("solve() called before factorize()")
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self._A.shape[0]:
            raise DimensionMismatchError(f"rhs length {b.shape[0]} != matrix size {self._A.shape[0]}")
        x = self._lu.solve(b)
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("direct solve produced non-finite values; matrix is numerically singular")
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return x
        for _ in range(self.refine_steps):
            r = b - self._A @ x
            if np.linalg.norm(r) <= self.tol * nb:
                break
            x = x + self._lu.solve(r)
        else:
            rel = np.linalg.norm(b - self._A @ x) / nb
            if rel > self.tol:
                logger.warning("direct solve residual %.3e exceeds %.1e", rel, self.tol)
        return x


def _check_structure(A):
    A = sp.csc_matrix(A)
    empty_cols = np.flatnonzero(np.diff(A.indptr) == 0)
    if empty_cols.size:
        raise SingularMatrixError(f"structurally singular: column {empty_cols[0]} is empty", pivot=int(empty_cols[0]))
    row_counts = np.bincount(A.indices[A.data != 0], minlength=A.shape[0])
    empty_rows = np.flatnonzero(row_counts == 0)
    if empty_rows.size:
        raise SingularMatrixError(f"structurally singular: row {empty_rows[0]} is empty", pivot=int(empty_rows[0]))


def solve_sparse(A, b):
    return DirectSolver().factorize(A).solve(b)


def write_matrix_market(path, A, comment=""):
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)


# ----------------------------------------------------------------------------
# norms


def l2_norm_error(space, coeffs, exact, degree=None):
    """``||u_h - exact||_{L2}`` by element quadrature; ``exact(x, y)`` may be None for ``||u_h||``."""
    q = space.quad(degree)
    uh = space.at_quadrature(coeffs, degree)
    if exact is None:
        diff = uh
    else:
        ev = exact(q.points[..., 0], q.points[..., 1])
        if space.components == 1:
            diff = uh - ev
        else:
            diff = uh - np.stack([np.broadcast_to(e, q.weights.shape) for e in ev], axis=-1)
    sq = diff**2 if space.components == 1 else np.sum(diff**2, axis=-1)
    return float(np.sqrt(np.sum(q.weights * sq)))


def mass_norm(M, v):
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def g_norm(pair, M):
    """G-norm of ``[v^{n-1}, v^n]`` in the inner product induced by ``M``."""
    a, b = (np.asarray(v, dtype=float) for v in pair)
    if a.shape != b.shape or a.shape[0] != M.shape[0]:
        raise DimensionMismatchError("pair vectors and mass matrix dimensions disagree")
    Ma, Mb = M @ a, M @ b
    val = G_MATRIX[0, 0] * (a @ Ma) + 2 * G_MATRIX[0, 1] * (a @ Mb) + G_MATRIX[1, 1] * (b @ Mb)
    return float(np.sqrt(max(val, 0.0)))


# ----------------------------------------------------------------------------
# point evaluation (oracles, raster output)


def locate_points(mesh, points, chunk=2048, tol=1e-12):
    """Triangle index and barycentric coordinates of each point (-1 if outside)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p = mesh.vertices[mesh.triangles]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    tri = np.full(len(pts), -1, dtype=np.int64)
    bary = np.zeros((len(pts), 3))
    for s in range(0, len(pts), chunk):
        P = pts[s:s + chunk]
        dx = P[:, None, 0] - a[None, :, 0]
        dy = P[:, None, 1] - a[None, :, 1]
        l1 = (dx * (c[None, :, 1] - a[None, :, 1]) - dy * (c[None, :, 0] - a[None, :, 0])) / det
        l2 = (dy * (b[None, :, 0] - a[None, :, 0]) - dx * (b[None, :, 1] - a[None, :, 1])) / det
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol)
        hit = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        idx = np.arange(len(P))
        tri[s:s + chunk] = np.where(hit, first, -1)
        bary[s:s + chunk] = np.column_stack([l0[idx, first], l1[idx, first], l2[idx, first]])
    return tri, bary


def basis_at_points(space, points):
    """Sparse ``(npts, n_nodes)`` matrix of scalar basis values at arbitrary points."""
    tri, bary = locate_points(space.mesh, points)
    if np.any(tri < 0):
        raise ValueError("some points lie outside the mesh")
    vals = np.vstack([shape_values(space.degree, bary[i:i + 1]) for i in range(len(tri))])
    rows = np.repeat(np.arange(len(tri)), space.nloc)
    cols = space.elem_nodes[tri].ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(len(tri), space.n_nodes))


def evaluate_at_points(space, coeffs, points, fill=np.nan):
    """Evaluate an FE function (each component) at points; outside points get ``fill``."""
    tri, bary = locate_points(space.mesh, points)
    ok = tri >= 0
    phi = shape_values(space.degree, bary[ok])
    comps = space.split(coeffs)
    out = np.full((space.components, len(tri)), fill, dtype=float)
    for c in range(space.components):
        out[c, ok] = np.sum(comps[c][space.elem_nodes[tri[ok]]] * phi, axis=1)
    return out[0] if space.components == 1 else out


def boundary_edge_quadrature(space, tag, n_points=4):
    """Quadrature data on edges tagged ``tag``.

    Returns ``(tri, bary, weights, normals)``: owning triangle per point,
    barycentric coordinates of each point in that triangle, physical weights
    (edge length times Gauss weight), and the unit normal pointing out of the
    owning triangle.
    """
    mesh = space.mesh
    mask = np.array([t == tag for t in mesh.boundary_tags], dtype=bool)
    if not mask.any():
        raise KeyError(f"no boundary edges tagged {tag!r}")
    owner, slot = mesh.boundary_edge_triangles
    owner, slot = owner[mask], slot[mask]
    s, w = line_rule(n_points)
    tris = mesh.triangles[owner]
    a_loc = _EDGE_VERTS[slot, 0]
    b_loc = _EDGE_VERTS[slot, 1]
    pa = mesh.vertices[tris[np.arange(len(owner)), a_loc]]
    pb = mesh.vertices[tris[np.arange(len(owner)), b_loc]]
    opp = mesh.vertices[tris[np.arange(len(owner)), slot]]
    t = pb - pa
    length = np.hypot(t[:, 0], t[:, 1])
    n = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    flip = np.sum(n * (opp - pa), axis=1) > 0
    n[flip] *= -1.0
    ne, nq = len(owner), len(s)
    bary = np.zeros((ne, nq, 3))
    bary[np.arange(ne)[:, None], np.arange(nq)[None, :], a_loc[:, None]] = 1.0 - s[None, :]
    bary[np.arange(ne)[:, None], np.arange(nq)[None, :], b_loc[:, None]] = s[None, :]
    weights = length[:, None] * w[None, :]
    return np.repeat(owner, nq), bary.reshape(-1, 3), weights.ravel(), np.repeat(n, nq, axis=0)
