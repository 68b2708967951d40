import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from autovarp.cellmodel import (PARAMETER_SETS, V_REST, CellState, cell_limit_cycle, estimate_erp,
                                make_model, plot_restitution, read_init_state, resting,
                                restitution_curve, step_cell, write_init_state)
from autovarp.errors import LossOfCapture


@pytest.fixture(scope="module")
def ht():
    return make_model("MitchellSchaeffer", "ht_tissue")


@pytest.fixture(scope="module")
def bz():
    return make_model("MitchellSchaeffer", "bz_tissue")


@settings(max_examples=20, deadline=None)
@given(dt=st.floats(0.0, 0.1))
def test_rest_is_a_fixed_point(dt):
    m = make_model("MitchellSchaeffer", "ht_tissue")
    s = step_cell(m, resting(m), dt, 0.0)
    np.testing.assert_allclose(s.values, m.resting_state(), atol=1e-9)


def test_upstroke_matches_reference_integrator(ht):
    dt, t_end = 0.01, 10.0
    n = int(round(t_end / dt))
    istim = np.zeros(n)
    istim[:int(2.0 / dt)] = 20.0
    traj = ht.trace(ht.resting_state(), dt, istim)
    t_cross = np.argmax(traj[:, 0] > 0.0) * dt
    assert 0 < t_cross < 10.0
    ref = solve_ivp(lambda t, y: ht.rhs(t, y, 20.0 if t < 2.0 else 0.0), (0, t_end),
                    ht.resting_state(), max_step=0.005, rtol=1e-8, atol=1e-10, dense_output=True)
    tt = np.arange(0, t_end, 0.001)
    t_ref = tt[np.argmax(ref.sol(tt)[0] > 0.0)]
    assert abs(t_cross - t_ref) < 0.1


@pytest.mark.parametrize("name", ["ht_tissue", "bz_tissue"])
def test_limit_cycle_identity(name):
    lc = cell_limit_cycle(make_model("MitchellSchaeffer", name), 600.0, 100)
    assert abs(lc.apds[-1] - lc.apds[-2]) < 1.0
    assert abs(600.0 - (lc.apds[-1] + lc.dis[-1])) < 1.0
    assert lc.trajectory.shape == (12000, 2)


def test_loss_of_capture(ht):
    with pytest.raises(LossOfCapture):
        cell_limit_cycle(ht, 150.0, 10)


def test_calibrated_erps(ht, bz):
    assert abs(estimate_erp(ht, 600.0) - 280.0) <= 10.0
    assert abs(estimate_erp(bz, 600.0) - 350.0) <= 10.0


@pytest.mark.parametrize("name", ["ht_tissue", "bz_tissue"])
def test_erp_tracks_pacing_rate(name):
    # longer cycles give longer APDs and therefore longer ERPs in this model
    m = make_model("MitchellSchaeffer", name)
    erps = [estimate_erp(m, pcl, num_cycles=60) for pcl in (500, 600, 800, 1000)]
    assert all(b >= a for a, b in zip(erps, erps[1:]))


def test_restitution_gap_and_refractoriness(ht, bz):
    dis = [0.0, 50.0, 100.0, 200.0, 400.0]
    ch = restitution_curve(ht, 600.0, dis)
    cb = restitution_curve(bz, 600.0, dis)
    assert not ch.samples[0].captured and not cb.samples[0].captured
    # the border zone is refractory for longer after the same S1 ...
    assert not cb.samples[1].captured and ch.samples[1].captured
    # ... and its APD exceeds the healthy one at long diastolic intervals; its
    # steep restitution makes the curves cross near DI = 300 ms
    assert cb.samples[-1].apd > ch.samples[-1].apd


def test_long_di_recovers_limit_cycle_apd(ht):
    lc = cell_limit_cycle(ht, 600.0, 100)
    curve = restitution_curve(ht, 600.0, [1000.0], lc=lc)
    assert abs(curve.samples[0].apd - lc.apd) < 2.0


def test_plot_restitution_files(ht, bz, tmp_path):
    curves = [restitution_curve(ht, 600.0, [100.0, 300.0], tissue="ht"),
              restitution_curve(bz, 600.0, [100.0, 300.0], tissue="bz")]
    png, csv = plot_restitution(curves, tmp_path / "rest")
    assert png.exists()
    lines = csv.read_text().splitlines()
    assert lines[0] == "tissue,DI,APD,captured" and len(lines) == 5
    _, csv = plot_restitution([restitution_curve(ht, 600.0, [], tissue="ht")], tmp_path / "empty")
    assert csv.read_text().splitlines() == ["tissue,DI,APD,captured"]


def test_unwritable_plot_path(ht, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        plot_restitution([restitution_curve(ht, 600.0, [100.0])], blocker / "sub" / "x")


def test_init_state_round_trip(tmp_path):
    s = CellState(np.array([V_REST + 0.123456789, 0.987654321]), 59400.0)
    write_init_state(tmp_path / "x.sv", s)
    back = read_init_state(tmp_path / "x.sv")
    assert back.time == s.time and np.array_equal(back.values, s.values)


def test_parameter_validation():
    with pytest.raises(ValueError):
        make_model("MitchellSchaeffer", {"tau_xyz": 1.0})
    with pytest.raises(ValueError):
        make_model("MitchellSchaeffer", {"tau_in": -1.0})
    with pytest.raises(ValueError):
        make_model("Nope")
    assert set(PARAMETER_SETS) == {"ht_tissue", "bz_tissue"}
