"""Single-cell membrane models, pacing and restitution.

The shipped model is a two-variable Mitchell-Schaeffer formulation rescaled to
millivolts.  State layout is ``[Vm (mV), h (-)]``; ``h`` is the inward-current
gate.  Time in ms, current densities in uA/cm^2, Cm = 1 uF/cm^2 so a current
density maps directly to mV/ms.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import LossOfCapture, NumericalBlowup

V_REST = -85.0
V_PEAK = 30.0
CM = 1.0  # uF/cm^2

DEFAULT_DT = 0.05
DEFAULT_STIM_STRENGTH = 20.0  # uA/cm^2, single-cell pacing
DEFAULT_STIM_DURATION = 2.0
CAPTURE_PEAK = 0.0  # mV
ERP_APD_FRACTION = 0.3


@njit(cache=True)
def ms_react(y, dt, istim, p):
    """One forward-Euler reaction step over all nodes of ``y`` (n, 2), in place.

    ``p`` holds per-node parameters (n, 5) so heterogeneous tissue is handled
    in a single pass.
    """
    amp = V_PEAK - V_REST
    for i in range(y.shape[0]):
        v = (y[i, 0] - V_REST) / amp
        hi = y[i, 1]
        dv = hi * v * v * (1.0 - v) / p[i, 0] - v / p[i, 1]
        if v < p[i, 4]:
            dh = (1.0 - hi) / p[i, 2]
        else:
            dh = -hi / p[i, 3]
        y[i, 0] = y[i, 0] + dt * (amp * dv + istim[i] / CM)
        y[i, 1] = hi + dt * dh


@njit(cache=True)
def _ms_trace(vm0, h0, dt, istim, p):
    n = istim.shape[0]
    vm_out = np.empty(n + 1)
    h_out = np.empty(n + 1)
    amp = V_PEAK - V_REST
    vm = vm0
    h = h0
    vm_out[0] = vm
    h_out[0] = h
    tau_in, tau_out, tau_open, tau_close, v_gate = p[0], p[1], p[2], p[3], p[4]
    for k in range(n):
        v = (vm - V_REST) / amp
        dv = h * v * v * (1.0 - v) / tau_in - v / tau_out
        if v < v_gate:
            dh = (1.0 - h) / tau_open
        else:
            dh = -h / tau_close
        vm = vm + dt * (amp * dv + istim[k] / CM)
        h = h + dt * dh
        vm_out[k + 1] = vm
        h_out[k + 1] = h
    return vm_out, h_out


@dataclass(frozen=True)
class CellModel:
    """Base for registered membrane models.

    Subclasses provide ``state_dim``, ``resting_state`` and a vectorised
    ``react`` acting on an ``(n, state_dim)`` array.
    """

    name: str = "base"
    params: dict = field(default_factory=dict)

    state_dim = 0
    state_names: tuple = ()

    def resting_state(self) -> np.ndarray:
        raise NotImplementedError

    def react(self, y: np.ndarray, dt: float, istim: np.ndarray) -> None:
        raise NotImplementedError

    @property
    def dt_max(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class MitchellSchaeffer(CellModel):
    name: str = "MitchellSchaeffer"
    params: dict = field(default_factory=lambda: dict(MS_DEFAULTS))

    state_dim = 2
    state_names = ("Vm", "h")

    def __post_init__(self):
        unknown = set(self.params) - set(MS_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown MitchellSchaeffer parameters: {sorted(unknown)}")
        full = dict(MS_DEFAULTS)
        full.update(self.params)
        for k, v in full.items():
            if not v > 0:
                raise ValueError(f"parameter {k} must be positive, got {v}")
        object.__setattr__(self, "params", full)

    def param_vector(self) -> np.ndarray:
        return np.array([self.params[k] for k in MS_PARAM_ORDER], dtype=np.float64)

    def resting_state(self) -> np.ndarray:
        return np.array([V_REST, 1.0])

    @property
    def dt_max(self) -> float:
        # explicit stability of the fast inward term
        return 0.5 * self.params["tau_in"]

    def react(self, y, dt, istim):
        p = np.tile(self.param_vector(), (y.shape[0], 1))
        ms_react(y, dt, np.ascontiguousarray(istim, dtype=np.float64), p)

    def trace(self, y0, dt, istim):
        """Integrate one cell over ``len(istim)`` steps; returns (n+1, 2) states."""
        vm, h = _ms_trace(float(y0[0]), float(y0[1]), dt,
                          np.ascontiguousarray(istim, dtype=np.float64),
                          self.param_vector())
        return np.column_stack([vm, h])

    def rhs(self, t, y, istim=0.0):
        """Continuous right-hand side, for reference integrators."""
        p = self.params
        amp = V_PEAK - V_REST
        v = (y[0] - V_REST) / amp
        dv = y[1] * v * v * (1.0 - v) / p["tau_in"] - v / p["tau_out"]
        if v < p["v_gate"]:
            dh = (1.0 - y[1]) / p["tau_open"]
        else:
            dh = -y[1] / p["tau_close"]
        return np.array([amp * dv + istim / CM, dh])


MS_PARAM_ORDER = ("tau_in", "tau_out", "tau_open", "tau_close", "v_gate")
MS_DEFAULTS = {
    "tau_in": 0.3,
    "tau_out": 6.0,
    "tau_open": 120.0,
    "tau_close": 150.0,
    "v_gate": 0.13,
}

# tau_close bisected so that ERP at PCL 600 ms is 280 ms (healthy) and 360 ms
# (border zone, upper half of its tolerance so that the S2 block at the
# isthmus entrance is robust); see scripts/calibrate_cells.py.  The slow gate
# recovery of the border zone gives it strong APD and CV restitution.
PARAMETER_SETS = {
    "ht_tissue": {"tau_open": 30.0, "tau_close": 143.22},
    "bz_tissue": {"tau_open": 400.0, "tau_close": 219.9},
}

MODELS = {"MitchellSchaeffer": MitchellSchaeffer}


def make_model(name: str, model_par=None) -> CellModel:
    """Instantiate a registered model.

    ``model_par`` is a dict of overrides or the name of a parameter set in
    :data:`PARAMETER_SETS`.
    """
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown cell model {name!r}; known: {sorted(MODELS)}") from None
    if model_par is None:
        params = {}
    elif isinstance(model_par, str):
        if model_par not in PARAMETER_SETS:
            raise ValueError(f"unknown parameter set {model_par!r}")
        params = dict(PARAMETER_SETS[model_par])
    else:
        params = dict(model_par)
    return cls(params=params)


@dataclass
class CellState:
    values: np.ndarray
    time: float = 0.0

    @property
    def vm(self) -> float:
        return float(self.values[0])

    def copy(self) -> "CellState":
        return CellState(self.values.copy(), self.time)


def resting(model: CellModel) -> CellState:
    return CellState(model.resting_state(), 0.0)


def step_cell(model: CellModel, state: CellState, dt: float, i_stim: float) -> CellState:
    """Advance one cell by ``dt`` with a constant stimulus current."""
    if dt == 0:
        return state.copy()
    y = state.values.reshape(1, -1).copy()
    model.react(y, dt, np.array([float(i_stim)]))
    if not np.all(np.isfinite(y)):
        raise NumericalBlowup(f"non-finite cell state at t={state.time + dt}")
    return CellState(y[0], state.time + dt)


# -- AP measurement ------------------------------------------------------

def _crossing_up(t, v, level, start):
    idx = np.nonzero((v[start:-1] < level) & (v[start + 1:] >= level))[0]
    if idx.size == 0:
        return None
    i = start + idx[0]
    return t[i] + (level - v[i]) * (t[i + 1] - t[i]) / (v[i + 1] - v[i])


def _crossing_down(t, v, level, start):
    idx = np.nonzero((v[start:-1] > level) & (v[start + 1:] <= level))[0]
    if idx.size == 0:
        return None
    i = start + idx[0]
    return t[i] + (v[i] - level) * (t[i + 1] - t[i]) / (v[i] - v[i + 1])


@dataclass
class ActionPotential:
    activation: float  # ms, time of maximum upstroke velocity
    repolarization: float  # ms, 90% repolarization
    peak: float

    @property
    def apd(self) -> float:
        return self.repolarization - self.activation


def measure_ap(t, vm, start_index=0, baseline=V_REST, stop_index=None):
    """Locate the first action potential with its peak in [start, stop).

    Returns None when no upstroke reaching ``CAPTURE_PEAK`` is found or the
    AP does not repolarize within the trace.
    """
    seg = vm[start_index:stop_index]
    if seg.size < 3:
        return None
    ipk = int(np.argmax(seg))
    peak = float(seg[ipk])
    if peak <= CAPTURE_PEAK:
        return None
    dv = np.diff(seg[: ipk + 1])
    if dv.size == 0:
        return None
    iact = int(np.argmax(dv))
    t_act = 0.5 * (t[start_index + iact] + t[start_index + iact + 1])
    level = peak - 0.9 * (peak - baseline)
    t_rep = _crossing_down(t, vm, level, start_index + ipk)
    if t_rep is None:
        return None
    return ActionPotential(t_act, t_rep, peak)


# -- pacing --------------------------------------------------------------

def stimulus_train(n_steps, dt, onsets, strength, duration):
    istim = np.zeros(n_steps)
    nd = int(round(duration / dt))
    for t0 in onsets:
        k0 = int(round(t0 / dt))
        istim[k0:k0 + nd] = strength
    return istim


@dataclass
class LimitCycle:
    """Result of pacing one cell to its limit cycle."""

    state: CellState  # pre-stimulus state of the final cycle
    apds: list
    dis: list
    trajectory: np.ndarray  # (round(pcl/dt), state_dim), phase 0 = final stimulus onset
    pcl: float
    dt: float
    baseline: float

    @property
    def apd(self) -> float:
        return self.apds[-1]

    def state_at_phase(self, phase):
        """States at phase(s) in [0, pcl) via nearest sample."""
        idx = np.rint(np.asarray(phase) / self.dt).astype(int) % len(self.trajectory)
        return self.trajectory[idx]


def cell_limit_cycle(model: CellModel, pcl: float, num_cycles: int, dt: float = DEFAULT_DT,
                     strength: float = DEFAULT_STIM_STRENGTH,
                     duration: float = DEFAULT_STIM_DURATION,
                     initial: CellState | None = None) -> LimitCycle:
    if num_cycles < 1:
        raise ValueError("num_cycles must be >= 1")
    nper = int(round(pcl / dt))
    y0 = model.resting_state() if initial is None else initial.values
    t0 = 0.0 if initial is None else initial.time
    istim = stimulus_train(nper * num_cycles, dt, [k * pcl for k in range(num_cycles)],
                           strength, duration)
    traj = model.trace(y0, dt, istim)
    if not np.all(np.isfinite(traj)):
        raise NumericalBlowup("non-finite state during limit-cycle pacing")
    vm = traj[:, 0]
    t = np.arange(vm.size) * dt
    baseline = float(vm[nper * (num_cycles - 1)])
    aps = []
    for k in range(num_cycles):
        seg_end = (k + 1) * nper + 1
        ap = measure_ap(t[:seg_end], vm[:seg_end], k * nper, baseline)
        if ap is None:
            raise LossOfCapture(f"cycle {k + 1} at pcl {pcl} ms produced no action potential")
        aps.append(ap)
    apds = [ap.apd for ap in aps]
    dis = [aps[k + 1].activation - aps[k].repolarization for k in range(num_cycles - 1)]
    last = nper * (num_cycles - 1)
    state = CellState(traj[last].copy(), t0 + last * dt)
    return LimitCycle(state, apds, dis, traj[last:last + nper].copy(), pcl, dt, baseline)


# -- restitution and ERP ------------------------------------------------

@dataclass
class RestitutionSample:
    di: float
    apd: float
    captured: bool


@dataclass
class RestitutionCurve:
    s1_pcl: float
    samples: list
    tissue: str = ""


def _s2_response(model, lc: LimitCycle, ci, strength, duration, window=None):
    """Response to an S2 delivered ``ci`` ms after the final S1 onset."""
    dt = lc.dt
    if window is None:
        window = ci + 3.0 * lc.apd + 50.0
    n = int(round(window / dt))
    istim = stimulus_train(n, dt, [0.0, ci], strength, duration)
    traj = model.trace(lc.trajectory[0], dt, istim)
    vm = traj[:, 0]
    t = np.arange(vm.size) * dt
    k2 = int(round(ci / dt))
    s1 = measure_ap(t, vm, 0, lc.baseline, stop_index=k2)
    if s1 is None or s1.repolarization > ci:
        return s1, None
    return s1, measure_ap(t, vm, k2, lc.baseline)


def restitution_curve(model: CellModel, s1_pcl: float, di_list, lc: LimitCycle | None = None,
                      num_cycles: int = 100, strength=DEFAULT_STIM_STRENGTH,
                      duration=DEFAULT_STIM_DURATION, tissue="") -> RestitutionCurve:
    if lc is None:
        lc = cell_limit_cycle(model, s1_pcl, num_cycles, strength=strength, duration=duration)
    s1 = measure_ap(np.arange(len(lc.trajectory)) * lc.dt, lc.trajectory[:, 0], 0, lc.baseline)
    samples = []
    for di in sorted(di_list):
        ci = s1.repolarization + di
        _, ap = _s2_response(model, lc, ci, strength, duration)
        if ap is None or ap.apd < ERP_APD_FRACTION * lc.apd:
            samples.append(RestitutionSample(float(di), float("nan") if ap is None else ap.apd, False))
        else:
            samples.append(RestitutionSample(float(di), ap.apd, True))
    return RestitutionCurve(s1_pcl, samples, tissue)


def _captures(model, lc, ci, strength, duration):
    _, ap = _s2_response(model, lc, ci, strength, duration)
    return ap is not None and ap.apd >= ERP_APD_FRACTION * lc.apd


def estimate_erp(model: CellModel, s1_pcl: float, lc: LimitCycle | None = None,
                 num_cycles: int = 100, strength=DEFAULT_STIM_STRENGTH,
                 duration=DEFAULT_STIM_DURATION) -> float:
    """Smallest S2 coupling interval (1 ms resolution) giving a full response."""
    if lc is None:
        lc = cell_limit_cycle(model, s1_pcl, num_cycles, strength=strength, duration=duration)
    lo, hi = 1.0, float(s1_pcl)
    if not _captures(model, lc, hi, strength, duration):
        return float("inf")
    while hi - lo > 1.0:
        mid = math.floor(0.5 * (lo + hi))
        if _captures(model, lc, mid, strength, duration):
            hi = mid
        else:
            lo = mid
    return hi


# -- init files and plots --------------------------------------------------

def init_filename(function: str, pcl: float) -> str:
    return f"{function}_bcl{pcl:g}.sv"


def write_init_state(path, state: CellState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"dim={state.values.size} time={state.time!r}"]
    lines += [repr(float(x)) for x in state.values]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_init_state(path) -> CellState:
    lines = Path(path).read_text().split("\n")
    head = dict(kv.split("=") for kv in lines[0].split())
    dim = int(head["dim"])
    vals = np.array([float(x) for x in lines[1:1 + dim]])
    if vals.size != dim:
        raise ValueError(f"{path}: expected {dim} state values, found {vals.size}")
    return CellState(vals, float(head["time"]))


def plot_restitution(curves, out) -> tuple[Path, Path]:
    """Write a restitution plot (PNG) and the underlying samples (CSV)."""
    out = Path(out)
    png = out.with_suffix(".png")
    csv_path = out.with_suffix(".csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tissue", "DI", "APD", "captured"])
            for c in curves:
                for s in c.samples:
                    w.writerow([c.tissue, f"{s.di:g}", f"{s.apd:.3f}", int(s.captured)])
    except OSError as exc:
        raise OSError(f"cannot write restitution output {csv_path}: {exc}") from exc

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        pts = [(s.di, s.apd) for s in c.samples if s.captured]
        if pts:
            di, apd = zip(*pts)
            ax.plot(di, apd, marker="o", ms=3, label=c.tissue or "tissue")
    ax.set_xlabel("DI (ms)")
    ax.set_ylabel("APD90 (ms)")
    if curves:
        ax.set_title(f"S1 PCL {curves[0].s1_pcl:g} ms")
    if ax.get_lines():
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return png, csv_path
