import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from femda.errors import InvalidDomainError, PairingError
from femda.fem import build_fe_space
from femda.mesh import (CoarseCover, Point2, TriMesh, build_coarse_cover, build_uniform_tri_mesh,
                        cylinder_channel_mesh, pair_observation_nodes, read_mesh, refine_uniform,
                        sinusoidal_channel_mesh, write_mesh)


def test_single_cell_square():
    m = build_uniform_tri_mesh(1, 1)
    assert m.n_vertices == 4 and m.n_triangles == 2
    assert m.area == pytest.approx(1.0)


def test_counts_two_by_two():
    m = build_uniform_tri_mesh(2, 2)
    assert m.n_vertices == 9 and m.n_triangles == 8


def test_congruent_cells():
    m = build_uniform_tri_mesh(3, 1, ((0, 0), (3, 1)))
    np.testing.assert_allclose(m.areas, 0.5)


def test_default_tags_and_validity():
    m = build_uniform_tri_mesh(4, 3).validate()
    assert set(m.boundary_tags) == {"Gamma1"}
    assert len(m.boundary_edges) == 2 * (4 + 3)


@pytest.mark.parametrize("rect", [((0, 0), (0, 1)), ((0, 0), (1, 0)), ((1, 1), (0, 2))])
def test_degenerate_rectangle(rect):
    with pytest.raises(InvalidDomainError):
        build_uniform_tri_mesh(2, 2, rect)


def test_bad_counts():
    with pytest.raises(InvalidDomainError):
        build_uniform_tri_mesh(0, 2)


def test_negative_area_rejected():
    m = build_uniform_tri_mesh(1, 1)
    bad = TriMesh(m.vertices, m.triangles[:, ::-1], m.boundary_edges, m.boundary_tags)
    with pytest.raises(InvalidDomainError):
        bad.validate()


def test_refine_counts_and_area():
    m = refine_uniform(build_uniform_tri_mesh(1, 1))
    assert m.n_triangles == 8 and m.n_vertices == 9
    assert m.area == pytest.approx(1.0, rel=1e-14)
    m.validate()


def test_refine_twice_matches_direct():
    a = refine_uniform(refine_uniform(build_uniform_tri_mesh(3, 2, ((0, 0), (1.5, 1)))))
    b = build_uniform_tri_mesh(12, 8, ((0, 0), (1.5, 1)))
    np.testing.assert_allclose(np.sort(a.areas), np.sort(b.areas), rtol=1e-13)
    assert a.n_vertices == b.n_vertices
    np.testing.assert_allclose(np.unique(np.round(a.vertices, 12), axis=0),
                               np.unique(np.round(b.vertices, 12), axis=0))


def test_refine_inherits_tags():
    m = build_uniform_tri_mesh(2, 1, tags={"left": "inflow", "right": "outflow"})
    r = refine_uniform(m)
    for tag in ("inflow", "outflow", "Gamma1"):
        assert sum(t == tag for t in r.boundary_tags) == 2 * sum(t == tag for t in m.boundary_tags)
    r.validate()


def test_mesh_roundtrip(tmp_path):
    m = sinusoidal_channel_mesh(16, 3)
    write_mesh(m, tmp_path / "m.txt")
    back = read_mesh(tmp_path / "m.txt")
    assert back.fingerprint() == m.fingerprint()


def test_read_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_mesh(tmp_path / "nope.txt")


def test_channel_meshes_valid():
    ch = sinusoidal_channel_mesh(32, 4)
    assert ch.area == pytest.approx(4 * np.pi, rel=1e-2)
    cyl = cylinder_channel_mesh()
    assert set(cyl.boundary_tags) == {"inflow", "outflow", "wall", "cylinder"}
    assert cyl.area == pytest.approx(2.2 * 0.41 - np.pi * 0.05**2, rel=2e-3)


# ---------------------------------------------------------------------------
# covers


def test_cover_whole_domain():
    m = build_uniform_tri_mesh(4, 4)
    cover = build_coarse_cover(m, 1.0)
    assert len(cover) == 1
    assert cover.cells[0].area == pytest.approx(1.0)


def test_cover_quarters():
    m = build_uniform_tri_mesh(8, 8)
    cover = build_coarse_cover(m, 0.5)
    assert len(cover) == 4
    np.testing.assert_allclose(cover.cell_areas, 0.25)


def test_single_cell_pairs_center_node():
    m = build_uniform_tri_mesh(2, 2)
    space = build_fe_space(m, 1)
    cover = build_coarse_cover(m, 1.0, space=space)
    np.testing.assert_allclose(space.node_coords[cover.paired_nodes[0]], [0.5, 0.5])


def test_two_by_two_p2_pairing(p2_space8, unit_mesh8):
    cover = build_coarse_cover(unit_mesh8, 0.5, space=p2_space8)
    got = p2_space8.node_coords[cover.paired_nodes]
    np.testing.assert_allclose(got, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    # exhaustive oracle: nearest node among those lying in a member triangle
    for cell in cover.cells:
        cand = np.unique(p2_space8.elem_nodes[cell.member_triangles])
        d = np.hypot(*(p2_space8.node_coords[cand] - np.array(cell.anchor)).T)
        assert np.isclose(d.min(), np.hypot(*(p2_space8.node_coords[cell.paired_node] - np.array(cell.anchor))))


def test_tie_breaks_to_lowest_index():
    # anchor (0.5, 0.5) of the 1x1 mesh: all four vertices are equidistant
    m = build_uniform_tri_mesh(1, 1)
    cover = build_coarse_cover(m, 1.0)
    assert cover.paired_nodes[0] == 0


def test_channel_partition_property():
    m = sinusoidal_channel_mesh(64, 6)
    space = build_fe_space(m, 2)
    cover = build_coarse_cover(m, 0.5, (0.0, -1.0), space=space)
    assert abs(cover.cell_areas.sum() - m.area) <= 1e-12 * m.area
    tri_ids = np.concatenate([c.member_triangles for c in cover.cells])
    assert np.array_equal(np.sort(tri_ids), np.arange(m.n_triangles))
    assert len(np.unique(cover.paired_nodes)) == len(cover)
    # some paired nodes are on the boundary in this geometry
    on_wall = np.isin(cover.paired_nodes, m.boundary_edges.ravel())
    assert on_wall.any()


def test_pairing_failure_names_cell():
    m = build_uniform_tri_mesh(2, 2)
    cover = build_coarse_cover(m, 1.0)
    cell = cover.cells[0]
    empty = type(cell)(cell.id, cell.area, np.zeros(0, dtype=np.int64), -1, cell.anchor)
    broken = CoarseCover((empty,), cover.H, m, cover.cell_of_triangle)
    with pytest.raises(PairingError) as exc:
        pair_observation_nodes(broken, build_fe_space(m, 1))
    assert exc.value.cell == cell.id


def test_cover_export(tmp_path, unit_mesh8):
    cover = build_coarse_cover(unit_mesh8, 0.5)
    cover.write(tmp_path / "cover.txt")
    lines = (tmp_path / "cover.txt").read_text().split("\n")
    assert len([l for l in lines if l]) == 4
    assert len(lines[0].split()) == 5


def test_refinement_never_moves_pair_farther():
    m = build_uniform_tri_mesh(4, 4)
    for H in (0.5, 0.25):
        c1 = build_coarse_cover(m, H, space=build_fe_space(m, 2))
        mr = refine_uniform(m)
        c2 = build_coarse_cover(mr, H, space=build_fe_space(mr, 2))
        s1, s2 = build_fe_space(m, 2), build_fe_space(mr, 2)
        d1 = np.linalg.norm(s1.node_coords[c1.paired_nodes] - c1.anchors, axis=1)
        d2 = np.linalg.norm(s2.node_coords[c2.paired_nodes] - c2.anchors, axis=1)
        np.testing.assert_allclose(c1.anchors, c2.anchors, atol=1e-14)
        assert np.all(d2 <= d1 + 1e-14)


@settings(max_examples=25, deadline=None)
@given(nx=st.integers(1, 12), ny=st.integers(1, 12), H=st.floats(0.05, 1.5),
       ox=st.floats(-0.3, 0.0), oy=st.floats(-0.3, 0.0))
def test_cover_invariants_property(nx, ny, H, ox, oy):
    m = build_uniform_tri_mesh(nx, ny, ((0, 0), (1.3, 0.7)))
    space = build_fe_space(m, 2)
    cover = build_coarse_cover(m, H, (ox, oy), space=space)
    assert abs(cover.cell_areas.sum() - m.area) <= 1e-12 * m.area
    assert len(np.unique(cover.paired_nodes)) == len(cover)
    for cell in cover.cells:
        assert cell.area > 0
        assert np.isclose(cell.area, m.areas[cell.member_triangles].sum(), rtol=1e-14)
        assert cell.paired_node in space.elem_nodes[cell.member_triangles]
    assert cover.H == pytest.approx(max(c.diameter for c in cover.cells))
