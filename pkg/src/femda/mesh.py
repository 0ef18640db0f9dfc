"""Triangulations, uniform refinement and coarse observation covers.

Meshes are plain numpy containers.  Coordinates live in ``vertices`` with
shape ``(nv, 2)``, counter-clockwise connectivity in ``triangles`` with shape
``(nt, 3)`` and tagged boundary segments in ``boundary_edges``/``boundary_tags``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .errors import InvalidDomainError, PairingError

logger = logging.getLogger(__name__)

GAMMA1 = "Gamma1"
GAMMA2 = "Gamma2"


class Point2(NamedTuple):
    x: float
    y: float


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: tuple

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(np.asarray(self.vertices, dtype=float).reshape(-1, 2)))
        object.__setattr__(self, "triangles", _readonly(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)))
        object.__setattr__(self, "boundary_edges", _readonly(np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "boundary_tags", tuple(str(t) for t in self.boundary_tags))
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise ValueError("one tag per boundary edge required")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self):
        return self.signed_areas

    @property
    def area(self):
        return float(np.sum(self.signed_areas))

    @cached_property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_table(self):
        local = np.array([[1, 2], [2, 0], [0, 1]])
        all_edges = np.sort(self.triangles[:, local].reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(all_edges, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self):
        """Unique edges as sorted vertex pairs, ordered lexicographically."""
        return self._edge_table[0]

    @property
    def triangle_edges(self):
        """Edge index of local edge i (opposite local vertex i) per triangle."""
        return self._edge_table[1]

    @property
    def tags(self):
        return sorted(set(self.boundary_tags))

    def edges_with_tag(self, tag):
        mask = np.array([t == tag for t in self.boundary_tags], dtype=bool)
        return self.boundary_edges[mask]

    @cached_property
    def boundary_edge_triangles(self):
        """Triangle index and local edge slot owning each boundary edge."""
        edges, tri_edges, _ = self._edge_table
        key = {tuple(e): i for i, e in enumerate(edges)}
        owner = np.full(len(edges), -1, dtype=np.int64)
        slot = np.full(len(edges), -1, dtype=np.int64)
        flat = tri_edges.ravel()
        owner[flat] = np.repeat(np.arange(self.n_triangles), 3)
        slot[flat] = np.tile(np.arange(3), self.n_triangles)
        idx = np.array([key[tuple(sorted(e))] for e in self.boundary_edges], dtype=np.int64)
        return owner[idx], slot[idx]

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        h.update(self.boundary_edges.tobytes())
        h.update("|".join(self.boundary_tags).encode())
        return h.hexdigest()[:16]

    def validate(self):
        """Check orientation, conformity and boundary consistency; raise on failure."""
        if np.any(self.signed_areas <= 0):
            raise InvalidDomainError("triangles with non-positive signed area")
        edges, _, counts = self._edge_table
        if np.any(counts > 2):
            raise InvalidDomainError("non-conforming mesh: edge shared by more than two triangles")
        boundary = {tuple(e) for e in edges[counts == 1]}
        tagged = [tuple(sorted(e)) for e in self.boundary_edges]
        if len(set(tagged)) != len(tagged) or set(tagged) != boundary:
            raise InvalidDomainError("boundary edges do not match single-owner edges")
        return self


def _rect_corners(rect):
    (x0, y0), (x1, y1) = rect
    if not (np.isfinite([x0, y0, x1, y1]).all()) or x1 <= x0 or y1 <= y0:
        raise InvalidDomainError(f"degenerate rectangle {rect}")
    return float(x0), float(y0), float(x1), float(y1)


def build_uniform_tri_mesh(nx, ny, rect=((0.0, 0.0), (1.0, 1.0)), tags=None, xs=None, ys=None,
                           diagonal="sw-ne"):
    """Structured triangulation of a rectangle, each cell cut along one diagonal.

    ``diagonal`` is ``"sw-ne"`` (default) or ``"nw-se"``.
    ``tags`` maps side names ``left/right/bottom/top`` to boundary tags; sides
    left out are tagged ``Gamma1``.  Optional ``xs``/``ys`` give explicit grid
    lines (used for graded meshes) and override ``nx``/``ny``.
    """
    x0, y0, x1, y1 = _rect_corners(rect)
    if xs is None:
        if nx < 1 or ny < 1:
            raise InvalidDomainError("nx and ny must be at least 1")
        xs = np.linspace(x0, x1, nx + 1)
    if ys is None:
        if ny < 1:
            raise InvalidDomainError("ny must be at least 1")
        ys = np.linspace(y0, y1, ny + 1)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    sw, se, nw, ne = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
    tris = np.empty((2 * nx * ny, 3), dtype=np.int64)
    if diagonal == "sw-ne":
        tris[0::2] = np.column_stack([sw, se, ne])
        tris[1::2] = np.column_stack([sw, ne, nw])
    elif diagonal == "nw-se":
        tris[0::2] = np.column_stack([sw, se, nw])
        tris[1::2] = np.column_stack([se, ne, nw])
    else:
        raise ValueError(f"unknown diagonal {diagonal!r}")

    tags = dict(tags or {})
    bedges, btags = [], []
    for k in range(nx):
        bedges.append((vid(k, 0), vid(k + 1, 0)))
        btags.append(tags.get("bottom", GAMMA1))
    for k in range(ny):
        bedges.append((vid(nx, k), vid(nx, k + 1)))
        btags.append(tags.get("right", GAMMA1))
    for k in range(nx, 0, -1):
        bedges.append((vid(k, ny), vid(k - 1, ny)))
        btags.append(tags.get("top", GAMMA1))
    for k in range(ny, 0, -1):
        bedges.append((vid(0, k), vid(0, k - 1)))
        btags.append(tags.get("left", GAMMA1))
    return TriMesh(verts, tris, np.array(bedges), btags)


def refine_uniform(mesh):
    """Split every triangle into four through its edge midpoints."""
    nv = mesh.n_vertices
    edges = mesh.edges
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    te = mesh.triangle_edges + nv
    t = mesh.triangles
    m12, m20, m01 = te[:, 0], te[:, 1], te[:, 2]
    tris = np.concatenate([
        np.column_stack([t[:, 0], m01, m20]),
        np.column_stack([t[:, 1], m12, m01]),
        np.column_stack([t[:, 2], m20, m12]),
        np.column_stack([m01, m12, m20]),
    ])
    key = {tuple(e): nv + i for i, e in enumerate(edges)}
    bedges, btags = [], []
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = key[(min(a, b), max(a, b))]
        bedges += [(a, m), (m, b)]
        btags += [tag, tag]
    return TriMesh(verts, tris, np.array(bedges).reshape(-1, 2), btags)


def map_mesh(mesh, fn):
    """Return ``mesh`` with vertex coordinates pushed through ``fn(x, y) -> (X, Y)``."""
    X, Y = fn(mesh.vertices[:, 0], mesh.vertices[:, 1])
    out = TriMesh(np.column_stack([X, Y]), mesh.triangles, mesh.boundary_edges, mesh.boundary_tags)
    return out.validate()


def sinusoidal_channel_mesh(nx=128, ny=12, length=4 * np.pi):
    """River-like channel between ``y = sin(x)`` and ``y = 1 + sin(x)``.

    Tags: ``inflow`` (x = 0), ``outflow`` (x = length), ``wall`` (top and bottom).
    """
    base = build_uniform_tri_mesh(
        nx, ny, ((0.0, 0.0), (length, 1.0)),
        tags={"left": "inflow", "right": "outflow", "bottom": "wall", "top": "wall"},
    )
    return map_mesh(base, lambda x, s: (x, np.sin(x) + s))


def _graded(n, ratio):
    """``n + 1`` points on [0, 1] whose spacing grows geometrically by ``ratio`` overall."""
    if n < 1:
        raise InvalidDomainError("need at least one interval")
    if abs(ratio - 1.0) < 1e-12:
        return np.linspace(0.0, 1.0, n + 1)
    q = ratio ** (1.0 / max(n - 1, 1))
    steps = q ** np.arange(n)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    return s / s[-1]


def cylinder_channel_mesh(n_side=14, n_radial=10, n_down=50, radial_ratio=4.0, down_ratio=2.5,
                          length=2.2, height=0.41, center=(0.2, 0.2), radius=0.05):
    """Structured O-grid mesh of the channel-with-cylinder benchmark geometry.

    A square block ``[0, height]^2`` around the cylinder is meshed by rays from
    the cylinder center to uniformly spaced points on the block boundary; the
    remainder of the channel is a tensor grid graded in x.  Tags: ``inflow``,
    ``outflow``, ``wall`` and ``cylinder``.
    """
    cx, cy = center
    L0 = height
    if not (radius < cx < L0 - radius and radius < cy < height - radius):
        raise InvalidDomainError("cylinder must fit inside the near-field block")
    n = n_side
    u = np.linspace(0.0, 1.0, n + 1)[:-1]
    # square perimeter, counter-clockwise from (0, 0)
    bottom = np.column_stack([u * L0, np.zeros(n)])
    right = np.column_stack([np.full(n, L0), u * height])
    top = np.column_stack([L0 - u * L0, np.full(n, height)])
    left = np.column_stack([np.zeros(n), height - u * height])
    outer = np.vstack([bottom, right, top, left])
    side = np.repeat(["wall", "interface", "wall", "inflow"], n)
    c = np.array(center)
    d = outer - c
    inner = c + radius * d / np.linalg.norm(d, axis=1)[:, None]
    s = _graded(n_radial, radial_ratio)
    npts = len(outer)
    ring = inner[None, :, :] + s[:, None, None] * (outer - inner)[None, :, :]
    verts = [ring.reshape(-1, 2)]

    def rid(layer, k):
        return layer * npts + (k % npts)

    tris = []
    for layer in range(n_radial):
        for k in range(npts):
            a, b = rid(layer, k), rid(layer, k + 1)
            cc, dd = rid(layer + 1, k + 1), rid(layer + 1, k)
            if (k // n) % 2 == 0:
                tris += [(a, b, cc), (a, cc, dd)]
            else:
                tris += [(a, b, dd), (b, cc, dd)]
    bedges, btags = [], []
    for k in range(npts):
        # cylinder is traversed clockwise so the fluid stays on the left
        bedges.append((rid(0, k + 1), rid(0, k)))
        btags.append("cylinder")
        if side[k] != "interface":
            bedges.append((rid(n_radial, k), rid(n_radial, k + 1)))
            btags.append(str(side[k]))

    # downstream block shares the block's right side nodes (uniform in y)
    ys = np.linspace(0.0, height, n + 1)
    xs = L0 + (length - L0) * _graded(n_down, down_ratio)
    offset = npts * (n_radial + 1)
    X, Y = np.meshgrid(xs[1:], ys)
    verts.append(np.column_stack([X.ravel(), Y.ravel()]))

    def did(i, j):
        if i == 0:
            # interface node: right side of block, index n + j along the perimeter
            return rid(n_radial, n + j)
        return offset + j * n_down + (i - 1)

    for i in range(n_down):
        for j in range(n):
            sw, se, nw, ne = did(i, j), did(i + 1, j), did(i, j + 1), did(i + 1, j + 1)
            tris += [(sw, se, ne), (sw, ne, nw)]
    for i in range(n_down):
        bedges.append((did(i, 0), did(i + 1, 0)))
        btags.append("wall")
        bedges.append((did(i + 1, n), did(i, n)))
        btags.append("wall")
    for j in range(n):
        bedges.append((did(n_down, j), did(n_down, j + 1)))
        btags.append("outflow")
    verts = np.vstack(verts)
    return TriMesh(verts, _orient(verts, np.array(tris)), np.array(bedges), btags).validate()


def _orient(verts, tris):
    p = verts[tris]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def write_mesh(mesh, path):
    lines = [str(mesh.n_vertices)]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(str(mesh.n_triangles))
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(str(len(mesh.boundary_edges)))
    lines += [f"{i} {j} {t}" for (i, j), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    tokens = path.read_text().split("\n")
    it = iter(line for line in tokens if line.strip())
    nv = int(next(it))
    verts = [tuple(map(float, next(it).split())) for _ in range(nv)]
    nt = int(next(it))
    tris = [tuple(map(int, next(it).split())) for _ in range(nt)]
    nb = int(next(it))
    bedges, btags = [], []
    for _ in range(nb):
        i, j, tag = next(it).split()
        bedges.append((int(i), int(j)))
        btags.append(tag)
    return TriMesh(np.array(verts), np.array(tris), np.array(bedges).reshape(-1, 2), btags).validate()


# ----------------------------------------------------------------------------
# coarse observation covers


@dataclass(frozen=True)
class CoarseCell:
    id: int
    area: float
    member_triangles: np.ndarray
    paired_node: int
    anchor: Point2
    grid_index: tuple = (0, 0)
    diameter: float = 0.0


@dataclass(frozen=True)
class CoarseCover:
    cells: tuple
    H: float
    mesh: TriMesh = field(repr=False)
    cell_of_triangle: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.cells)

    @property
    def paired_nodes(self):
        return np.array([c.paired_node for c in self.cells], dtype=np.int64)

    @property
    def cell_areas(self):
        return np.array([c.area for c in self.cells])

    @property
    def anchors(self):
        return np.array([c.anchor for c in self.cells], dtype=float)

    def write(self, path):
        lines = [f"{c.id} {c.area!r} {c.paired_node} {c.anchor.x!r} {c.anchor.y!r}" for c in self.cells]
        Path(path).write_text("\n".join(lines) + "\n")


def _cell_diameter(points):
    pts = np.unique(points, axis=0)
    if len(pts) > 8:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # collinear or tiny point sets
            pass
    return float(pdist(pts).max()) if len(pts) > 1 else 0.0


def build_coarse_cover(mesh, H, origin=(0.0, 0.0), space=None, Hy=None):
    """Assign fine triangles to the rectangular grid cell holding their centroid.

    Grid cells are ``H`` wide and ``Hy`` (default ``H``) tall, anchored at
    ``origin``.  Empty grid cells are dropped.  Cells are numbered row by row,
    x fastest.  Observation nodes are paired against ``space`` (any object with
    ``node_coords`` and ``elem_nodes``); with no space the mesh vertices are used.
    """
    Hy = H if Hy is None else Hy
    if H <= 0 or Hy <= 0:
        raise InvalidDomainError("coarse grid spacing must be positive")
    ox, oy = origin
    cen = mesh.centroids
    ix = np.floor((cen[:, 0] - ox) / H).astype(np.int64)
    iy = np.floor((cen[:, 1] - oy) / Hy).astype(np.int64)
    keys = np.column_stack([iy, ix])
    uniq, cell_of = np.unique(keys, axis=0, return_inverse=True)
    cell_of = cell_of.ravel()
    areas = mesh.areas
    order = np.argsort(cell_of, kind="stable")
    bounds = np.searchsorted(cell_of[order], np.arange(len(uniq) + 1))
    cells = []
    for j, (ky, kx) in enumerate(uniq):
        members = order[bounds[j]:bounds[j + 1]]
        a = areas[members]
        total = float(np.sum(a))
        anchor = (a[:, None] * cen[members]).sum(axis=0) / total
        pts = mesh.vertices[mesh.triangles[members].ravel()]
        cells.append(CoarseCell(j, total, members, -1, Point2(*anchor), (int(kx), int(ky)), _cell_diameter(pts)))
    cover = CoarseCover(tuple(cells), max(c.diameter for c in cells), mesh, _readonly(cell_of))
    if space is None:
        space = _VertexNodes(mesh)
    return pair_observation_nodes(cover, space)


@dataclass(frozen=True)
class _VertexNodes:
    mesh: TriMesh

    @property
    def node_coords(self):
        return self.mesh.vertices

    @property
    def elem_nodes(self):
        return self.mesh.triangles


def pair_observation_nodes(cover, space):
    """Choose for each cell the fine node nearest its anchor.

    Candidates are the nodes of member triangles (boundary inclusive); ties go
    to the lowest node index.  If the nearest node was already claimed by an
    earlier cell the next-nearest free candidate is taken so pairing stays
    injective.
    """
    coords = np.asarray(space.node_coords)
    elem_nodes = np.asarray(space.elem_nodes)
    taken = set()
    out = []
    for cell in cover.cells:
        cand = np.unique(elem_nodes[cell.member_triangles].ravel())
        if cand.size == 0:
            raise PairingError(cell.id)
        d = np.hypot(coords[cand, 0] - cell.anchor.x, coords[cand, 1] - cell.anchor.y)
        ranked = cand[np.lexsort((cand, d))]
        free = [k for k in ranked.tolist() if k not in taken]
        if not free:
            raise PairingError(cell.id, f"coarse cell {cell.id}: every candidate node is already paired")
        if free[0] != ranked[0]:
            logger.warning("cell %d: nearest node %d already paired, using %d", cell.id, ranked[0], free[0])
        k = free[0]
        taken.add(k)
        out.append(CoarseCell(cell.id, cell.area, cell.member_triangles, int(k), cell.anchor,
                              cell.grid_index, cell.diameter))
    return CoarseCover(tuple(out), cover.H, cover.mesh, cover.cell_of_triangle)


def cover_from_grid_counts(mesh, nx, ny, bbox, space=None):
    """Cover built from an ``nx`` by ``ny`` grid over ``bbox = ((x0, y0), (x1, y1))``."""
    (x0, y0), (x1, y1) = bbox
    return build_coarse_cover(mesh, (x1 - x0) / nx, (x0, y0), space=space, Hy=(y1 - y0) / ny)
