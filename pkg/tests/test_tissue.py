from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autovarp.errors import NoActiveNodes, NodeCountMismatch, NoPropagation, VersionMismatch
from autovarp.experiments import restart_equivalence, slab_function
from autovarp.mesh import NodeSet, sheet, strand, tag_partition
from autovarp.plan import Conductivity, ConfigurationDef, FunctionDef
from autovarp.tissue import (SentinelConfig, StimulusEvent, Tissue, TissueState, assemble_operators,
                             axis_diffusivities, harmonic_mean, load_checkpoint, measure_cv,
                             read_lat, read_vm_series, save_checkpoint, write_lat,
                             write_vm_series)

HT = slab_function("ht_tissue")
HT_ISO = slab_function("ht_tissue", isotropic=True)


def _sheet_tissue(size=4.0, h=0.25, func=HT_ISO, tags_fn=None, cfg=None):
    m = sheet(size, size, h, tags_fn=tags_fn)
    cfg = cfg or [ConfigurationDef("h", (1,), func.name)]
    return Tissue(m, tag_partition(m, cfg), {func.name: func, "scar": FunctionDef("scar", None)})


def test_harmonic_mean_of_appendix_conductivities():
    assert harmonic_mean(0.255, 0.625) == pytest.approx(0.1811, abs=5e-5)
    d = axis_diffusivities(Conductivity(0.255, 0.625, 0.0775, 0.236, 0.0775, 0.236, 0.14))
    assert d["fiber"] == pytest.approx(0.255 * 0.625 / 0.88 * 100 / 140)
    assert d["sheet"] == d["normal"]


def test_isotropic_operator_rotation_invariant():
    m = sheet(3.0, 3.0, 0.5)
    part = tag_partition(m, [ConfigurationDef("h", (1,), HT_ISO.name)])
    K = assemble_operators(m, part, {HT_ISO.name: HT_ISO}).K.toarray()
    n = 7  # nodes per side
    idx = np.arange(n * n).reshape(n, n)
    perm = np.rot90(idx).ravel()  # node relabelling of a 90 degree rotation
    np.testing.assert_allclose(K[np.ix_(perm, perm)], K, atol=1e-12)


def test_all_scar_mesh():
    m = strand(2.0, 0.5)
    with pytest.raises(NoActiveNodes):
        assemble_operators(m, tag_partition(m, [ConfigurationDef("s", (1,), "scar")]),
                           {"scar": FunctionDef("scar", None)})


def test_rest_is_stationary():
    tis = _sheet_tissue()
    r = tis.run(tis.resting_state(), [], 20.0)
    np.testing.assert_allclose(r.state.values, tis.resting_state().values, atol=1e-9)


def test_point_stimulus_gives_circular_isochrones():
    # large enough that the measured rays stay clear of the no-flux boundary
    size, h = 16.0, 0.25
    tis = _sheet_tissue(size, h)
    c = np.array([size / 2, size / 2, 0.0])
    d = np.linalg.norm(tis.mesh.points - c, axis=1)
    lat = tis.run(tis.resting_state(), [StimulusEvent(NodeSet(np.nonzero(d <= 1.0)[0]), 0.0,
                                                      2.0, 40.0)], 40.0).lat
    p = tis.mesh.points
    ang = np.arctan2(p[:, 1] - c[1], p[:, 0] - c[0])
    speeds = []
    for a in np.linspace(0, np.pi / 2, 7):
        ray = (np.abs(np.angle(np.exp(1j * (ang - a)))) < 0.1) & (d > 2.0) & (d < 6.0)
        assert np.all(lat[ray] > 0)
        speeds.append(1.0 / np.polyfit(d[ray], lat[ray], 1)[0])
    speeds = np.array(speeds)
    assert (speeds.max() - speeds.min()) / speeds.mean() < 0.02


def test_tuned_strand_cv():
    assert measure_cv(HT, 0.3) == pytest.approx(0.6, rel=0.02)
    assert measure_cv(HT, 0.3, "sheet") == pytest.approx(0.2, rel=0.02)


def test_zero_conductivity_does_not_propagate():
    f = replace(HT, conductivity=replace(HT.conductivity, gil=0.0))
    with pytest.raises(NoPropagation):
        measure_cv(f, 0.3)


def test_strand_lat_properties():
    m = strand(10.0, 0.25, tags_fn=lambda x: 2 if 4.0 < x < 5.0 else 1)
    part = tag_partition(m, [ConfigurationDef("h", (1,), HT.name), ConfigurationDef("s", (2,), "scar")])
    tis = Tissue(m, part, {HT.name: HT, "scar": FunctionDef("scar", None)})
    el = NodeSet(np.array([0, 1, 2]))
    lat_local = tis.run(tis.resting_state(), [StimulusEvent(el, 5.0, 2.0, 40.0)], 60.0).lat
    lat = np.full(m.n_points, -1.0)
    lat[tis.ops.active] = lat_local
    assert 5.0 <= lat[0] <= 10.0
    assert np.all(lat[~part.active] == -1.0)
    x = m.points[:, 0]
    left = part.active & (x < 4.0)
    assert np.all(np.diff(lat[left]) > 0)
    assert np.all(lat[x > 5.0] == -1.0)  # the gap blocks conduction


def test_sentinel_on_quiet_tissue():
    tis = _sheet_tissue(2.0, 0.5)
    r = tis.run(tis.resting_state(), [], 1000.0, sentinel=SentinelConfig(quiescence_window=150.0))
    assert r.terminated_by == "sentinel" and r.exit_time == pytest.approx(150.0)


def test_sentinel_after_activity():
    tis = _sheet_tissue(2.0, 0.5)
    el = NodeSet(np.array([0]))
    r = tis.run(tis.resting_state(), [StimulusEvent(el, 0.0, 2.0, 40.0)], 1000.0,
                sentinel=SentinelConfig())
    assert r.terminated_by == "sentinel"
    assert r.exit_time - r.last_activity == pytest.approx(150.0, abs=1.0)
    r = tis.run(tis.resting_state(), [StimulusEvent(el, 0.0, 2.0, 40.0)], 100.0,
                sentinel=SentinelConfig())
    assert r.terminated_by == "duration" and r.exit_time == 100.0


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 50), dim=st.integers(1, 4), t=st.floats(0, 1e5),
       seed=st.integers(0, 2**31))
def test_checkpoint_round_trip(tmp_path_factory, n, dim, t, seed):
    vals = np.random.default_rng(seed).normal(size=(n, dim))
    path = save_checkpoint(TissueState(t, vals), tmp_path_factory.mktemp("ck") / "x.roe")
    assert load_checkpoint(path, n) == TissueState(t, vals)


def test_checkpoint_guards(tmp_path):
    path = save_checkpoint(TissueState(0.0, np.zeros((100, 2))), tmp_path / "a.roe")
    with pytest.raises(NodeCountMismatch):
        load_checkpoint(path, 200)
    (tmp_path / "b.roe").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "b.roe")
    (tmp_path / "c.roe").write_bytes(path.read_bytes()[:-8])
    with pytest.raises(VersionMismatch, match="truncated"):
        load_checkpoint(tmp_path / "c.roe")


def test_restart_is_bitwise(tmp_path):
    assert restart_equivalence(tmp_path)


def test_lat_and_vm_series_files(tmp_path):
    lat = np.array([-1.0, 0.0, 1.25, 600.125])
    np.testing.assert_array_equal(read_lat(write_lat(tmp_path / "l.dat", lat)), lat)
    frames = np.random.default_rng(1).normal(size=(3, 5)).astype(np.float32)
    times = np.array([0.0, 1.0, 2.0])
    t, f = read_vm_series(write_vm_series(tmp_path / "vm.bin", times, frames))
    np.testing.assert_array_equal(f, frames)
    np.testing.assert_allclose(t, times)


def test_state_size_mismatch_rejected():
    tis = _sheet_tissue(2.0, 0.5)
    with pytest.raises(NodeCountMismatch):
        tis.run(TissueState(0.0, np.zeros((3, 2))), [], 10.0)
