from dataclasses import replace

import numpy as np
import pytest

from autovarp.errors import MissingTrajectory, NoPropagation, TuningDiverged
from autovarp.experiments import slab_function, strand_lat_agreement
from autovarp.mesh import NodeSet, grid_node, sheet, strand, tag_partition
from autovarp.plan import ConfigurationDef, FunctionDef, Velocities
from autovarp.prepace import (PrepaceMode, distribute_states, eikonal_lat, function_limit_cycle,
                              prepace, shift_phase_consistent, tune_conductivities)
from autovarp.tissue import StimulusEvent, Tissue

HT = replace(slab_function("ht_tissue"), measured=None)
SCAR = FunctionDef("scar", None)


@pytest.fixture(scope="module")
def ht_cycle():
    return function_limit_cycle(HT, 600.0)


def _one(mesh, func=HT, extra=()):
    cfg = [ConfigurationDef("h", (1,), func.name), *extra]
    return tag_partition(mesh, cfg), {func.name: func, "scar": SCAR}


@pytest.mark.parametrize("h", [0.1, 0.3])
def test_strand_eikonal_is_analytic(h):
    m = strand(12.0, h)
    part, funcs = _one(m)
    x0 = int(round(4.0 / h))
    f = eikonal_lat(m, part, funcs, NodeSet(np.array([x0])))
    exact = np.abs(m.points[:, 0] - m.points[x0, 0]) / 0.6
    assert f.times[x0] == 0.0
    np.testing.assert_allclose(f.times, exact, rtol=0.01, atol=1e-9)


def test_anisotropic_isochrones_are_three_to_one():
    size, h = 12.0, 0.2
    m = sheet(size, size, h)
    part, funcs = _one(m)  # fibers along x: 0.6 / 0.2 m/s
    c = grid_node(size, h, size / 2, size / 2)
    t = eikonal_lat(m, part, funcs, NodeSet(np.array([c]))).times
    along = t[grid_node(size, h, size / 2 + 5.0, size / 2)]
    across = t[grid_node(size, h, size / 2, size / 2 + 5.0)]
    assert across / along == pytest.approx(3.0, rel=0.05)


def test_scar_is_impassable():
    m = sheet(6.0, 3.0, 0.25, tags_fn=lambda x, y: np.where((x > 2.5) & (x < 3.5), 4, 1))
    part, funcs = _one(m, extra=[ConfigurationDef("s", (4,), "scar")])
    with pytest.warns(UserWarning, match="not reached"):
        f = eikonal_lat(m, part, funcs, NodeSet(np.array([0])))
    right = m.points[:, 0] > 3.6
    assert np.all(f.times[right] == -1.0)
    assert np.all(f.times[~part.active] == -1.0)


def test_eikonal_matches_reaction_diffusion_on_strand():
    assert strand_lat_agreement().relative < 0.05


def test_uniform_lat_gives_pre_stimulus_state(ht_cycle):
    m = strand(3.0, 0.5)
    part, funcs = _one(m)
    tis = Tissue(m, part, funcs)
    s = distribute_states(tis, np.zeros(m.n_points), {HT.name: ht_cycle}, 600.0)
    np.testing.assert_array_equal(s.values, np.tile(ht_cycle.trajectory[0], (m.n_points, 1)))


def test_linear_lat_gives_linear_phase(ht_cycle):
    m = strand(10.0, 0.5)
    part, funcs = _one(m)
    tis = Tissue(m, part, funcs)
    lat = 10.0 + 5.0 * m.points[:, 0]  # 10..60 ms, all past the upstroke
    s = distribute_states(tis, lat, {HT.name: ht_cycle}, 600.0)
    idx = np.rint((600.0 - lat) / ht_cycle.dt).astype(int)
    np.testing.assert_array_equal(s.values, ht_cycle.trajectory[idx])
    # a constant shift moves every phase by the same amount
    s2 = distribute_states(tis, shift_phase_consistent(lat, 5.0), {HT.name: ht_cycle}, 600.0)
    np.testing.assert_array_equal(s2.values, ht_cycle.trajectory[idx - 100])


def test_missing_trajectory():
    m = strand(2.0, 0.5)
    part, funcs = _one(m)
    with pytest.raises(MissingTrajectory):
        distribute_states(Tissue(m, part, funcs), np.zeros(m.n_points), {}, 600.0)


def test_lat1_settles_in_one_cycle(ht_cycle):
    m = sheet(6.0, 6.0, 0.3)
    part, funcs = _one(m)
    tis = Tissue(m, part, funcs)
    el = NodeSet(np.nonzero(np.linalg.norm(m.points, axis=1) <= 1.0)[0])
    res, run = prepace(tis, m, part, funcs, el, {HT.name: ht_cycle}, 600.0,
                       PrepaceMode("ek", "lat-1"), 40.0)
    assert run is not None and res.state.time == 600.0
    nxt = tis.run(res.state, [StimulusEvent(el, 600.0, 2.0, 40.0)], 1200.0).state
    assert np.abs(nxt.vm - res.state.vm).max() < 1.0


def test_lat0_returns_time_zero_distribution(ht_cycle):
    m = strand(4.0, 0.5)
    part, funcs = _one(m)
    tis = Tissue(m, part, funcs)
    res, run = prepace(tis, m, part, funcs, NodeSet(np.array([0])), {HT.name: ht_cycle}, 600.0,
                       PrepaceMode("ek", "lat-0"), 40.0)
    assert run is None and res.state.time == 0.0
    assert res.lat[0] == 0.0 and np.all(np.diff(res.lat) > 0)


def test_prepace_mode_validation():
    with pytest.raises(ValueError):
        PrepaceMode("fmm", "lat-1")
    with pytest.raises(ValueError):
        PrepaceMode("ek", "lat-2")


def test_tuning_from_appendix_conductivities():
    from autovarp.plan import Conductivity
    f = replace(HT, conductivity=Conductivity(0.255, 0.625, 0.0775, 0.236, 0.0775, 0.236, 0.14))
    r = tune_conductivities(f, 0.3)
    assert r.iterations <= 5
    assert r.function.measured.vf == pytest.approx(0.6, rel=0.02)
    assert r.function.measured.vs == pytest.approx(0.2, rel=0.02)


def test_tuning_fixed_point():
    r = tune_conductivities(HT, 0.3)
    assert r.iterations == 1 and r.function.conductivity == HT.conductivity


@pytest.mark.parametrize("v, error", [(0.05, TuningDiverged), (0.03, NoPropagation)])
def test_slow_target_on_coarse_grid_fails(v, error):
    # the upstroke of this model is steep enough that 0.1 m/s still tunes at 0.8 mm
    f = replace(HT, reference=Velocities(v, v, v))
    with pytest.raises(error):
        tune_conductivities(f, 0.8)
