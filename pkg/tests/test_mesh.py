import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autovarp.errors import EmptyElectrode, FormatError, MissingUVC, UncoveredTag, UnknownCavity
from autovarp.mesh import (UVC, geometry_files, grid_node, load_mesh, make_mesh, resolve_electrode,
                           save_mesh, sheet, strand, tag_partition)
from autovarp.plan import ConfigurationDef, ElectrodeDef
from autovarp.slab import SlabGeometry, isthmus_slab


def _cfg(*items):
    return [ConfigurationDef(n, tuple(t), f) for n, t, f in items]


def test_two_element_strand_file(tmp_path):
    (tmp_path / "s.pts").write_text("3\n0 0 0\n1000 0 0\n2000 0 0\n")
    (tmp_path / "s.elem").write_text("2\nLn 0 1 1\nLn 1 2 1\n")
    (tmp_path / "s.lon").write_text("1\n1 0 0\n1 0 0\n")
    m = load_mesh(tmp_path)
    assert m.n_points == 3 and m.n_elements == 2
    assert list(m.kinds) == ["line", "line"]
    np.testing.assert_allclose(m.points[:, 0], [0.0, 1.0, 2.0])  # um -> mm


def test_truncated_points_file(tmp_path):
    (tmp_path / "s.pts").write_text("3\n0 0 0\n1000 0 0\n")
    (tmp_path / "s.elem").write_text("1\nLn 0 1 1\n")
    (tmp_path / "s.lon").write_text("1\n1 0 0\n")
    with pytest.raises(FormatError, match="header says 3"):
        load_mesh(tmp_path)


def test_unknown_element_code(tmp_path):
    (tmp_path / "s.pts").write_text("2\n0 0 0\n1000 0 0\n")
    (tmp_path / "s.elem").write_text("1\nXx 0 1 1\n")
    (tmp_path / "s.lon").write_text("1\n1 0 0\n")
    with pytest.raises(FormatError, match="unknown element type"):
        load_mesh(tmp_path)


def test_save_load_round_trip_with_uvc(tmp_path):
    m = sheet(2.0, 1.0, 0.5, fiber_angle=30.0, tags_fn=lambda x, y: np.where(x < 1, 1, 2))
    n = m.n_points
    m.uvc = UVC(np.linspace(0, 1, n), np.zeros(n), np.zeros(n), np.array(["lv"] * n, dtype=object))
    save_mesh(m, tmp_path / "sheet")
    again = load_mesh(tmp_path / "sheet")
    np.testing.assert_allclose(again.points, m.points, atol=1e-9)
    np.testing.assert_array_equal(again.conn, m.conn)
    np.testing.assert_array_equal(again.tags, m.tags)
    np.testing.assert_allclose(again.fibers, m.fibers, atol=1e-7)
    assert [p.suffix for p in geometry_files(tmp_path / "sheet")] == [".pts", ".elem", ".lon", ".uvc"]


def test_slab_tags_and_partition():
    geom = SlabGeometry(size=12.0, resolution=0.5, scar_width=6.0, scar_height=5.0,
                        isthmus_width=1.0, electrode_offset=1.5)
    m = isthmus_slab(geom)
    assert m.tag_set == {1, 2, 3, 4}
    part = tag_partition(m, _cfg(("h", [1], "ht"), ("b", [2, 3], "bz"), ("s", [4], "scar")))
    assert set(part.groups) == {"ht", "bz", "scar"}
    # scar interior is excluded, its rim is shared with border zone
    assert 0 < part.excluded_nodes.size < m.n_points
    assert set(part.node_function[part.active]) == {"ht", "bz"}


def test_uncovered_tag():
    m = sheet(2.0, 1.0, 0.5, tags_fn=lambda x, y: np.where(x < 0.7, 1, np.where(x < 1.4, 2, 3)))
    with pytest.raises(UncoveredTag) as exc:
        tag_partition(m, _cfg(("a", [1, 2], "ht")))
    assert exc.value.tags == [3]


def test_homogeneous_partition():
    m = strand(3.0, 0.5)
    part = tag_partition(m, _cfg(("a", [1], "ht")))
    assert list(part.groups) == ["ht"] and part.excluded_nodes.size == 0


def test_sphere_on_single_node():
    m = sheet(3.0, 3.0, 0.5)
    node = grid_node(3.0, 0.5, 1.5, 1.0)
    ns = resolve_electrode(m, ElectrodeDef("p", "cartesian_sphere", center=tuple(m.points[node]),
                                           radius=0.1))
    assert list(ns.ids) == [node]


def test_uvc_sphere_fixed_point():
    m = sheet(3.0, 3.0, 0.5)
    n = m.n_points
    rng = np.random.default_rng(0)
    cav = np.array(["lv"] * (n // 2) + ["rv"] * (n - n // 2), dtype=object)
    m.uvc = UVC(rng.random(n), rng.random(n), rng.uniform(-np.pi, np.pi, n), cav)
    k = 3
    e = ElectrodeDef("u", "ucc_sphere", p0=(m.uvc.apicobasal[k], m.uvc.transmural[k],
                                            m.uvc.rotational[k]), cavity="lv", radius=1.0)
    assert k in resolve_electrode(m, e).ids
    with pytest.raises(UnknownCavity):
        resolve_electrode(m, ElectrodeDef("u", "ucc_sphere", p0=(0, 0, 0), cavity="ra", radius=1))


def test_uvc_electrode_needs_uvc():
    with pytest.raises(MissingUVC):
        resolve_electrode(strand(2.0, 0.5), ElectrodeDef("u", "ucc_sphere", p0=(0, 0, 0),
                                                          cavity="lv", radius=1.0))


def test_empty_and_out_of_range_electrodes():
    m = strand(2.0, 0.5)
    with pytest.raises(EmptyElectrode):
        resolve_electrode(m, ElectrodeDef("e", "cartesian_sphere", center=(0, 5, 0), radius=0.1))
    with pytest.raises(EmptyElectrode):
        resolve_electrode(m, ElectrodeDef("e", "node_list", nodes=(0, 99)))


def test_slab_electrodes_disjoint():
    from autovarp.plan import plan_from_dict
    from autovarp.slab import slab_plan
    geom = SlabGeometry(size=12.0, resolution=0.5, scar_width=6.0, scar_height=5.0,
                        isthmus_width=1.0, electrode_offset=1.5)
    m = isthmus_slab(geom)
    plan = plan_from_dict(slab_plan(geom))
    sets = [set(resolve_electrode(m, e).ids) for e in plan.electrodes.values()]
    assert len(sets) == 8
    assert sum(len(s) for s in sets) == len(set().union(*sets))


def test_degenerate_element_rejected():
    from autovarp.errors import GeometryError
    with pytest.raises(GeometryError):
        make_mesh([[0, 0, 0], [0, 0, 0]], [[0, 1]], [1], [[1, 0, 0]])


@settings(max_examples=25, deadline=None)
@given(lx=st.floats(0.5, 4.0), h=st.sampled_from([0.25, 0.5]), angle=st.floats(0, 180))
def test_sheet_measures_sum_to_area(lx, h, angle):
    from autovarp.mesh import element_measures
    m = sheet(lx, 1.0, h, fiber_angle=angle)
    nx, ny = int(round(lx / h)), int(round(1.0 / h))
    assert element_measures(m).sum() == pytest.approx(lx * ny * h * 1.0 / (ny * h), rel=1e-9) \
        if nx * h == pytest.approx(lx) else True
    np.testing.assert_allclose(np.linalg.norm(m.fibers, axis=1), 1.0)
