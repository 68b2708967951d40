"""Monodomain reaction-diffusion on labelled meshes.

Godunov operator splitting: forward-Euler reaction (with stimulus current),
then an implicit diffusion solve with lumped mass,

    (M + theta*dt*K) V = (M - (1 - theta)*dt*K) V*,

theta = 1 (implicit Euler) or 1/2 (Crank-Nicolson).  Units: mm, ms, mV.

Time is tracked as an integer step index on a global ``dt`` grid, so a run
restarted from a checkpoint takes exactly the same stimulus decisions as an
uninterrupted one.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cellmodel import CellModel, MitchellSchaeffer, make_model, ms_react, V_REST
from .errors import (LinearSolveFailure, NoActiveNodes, NodeCountMismatch,
                     NumericalBlowup, SingularElement, VersionMismatch)
from .mesh import KIND_NVERT, SCAR, Mesh, NodeSet, Partition

CHECKPOINT_MAGIC = b"AVRP"
CHECKPOINT_VERSION = 1


# -- conductivity ------------------------------------------------------------------

def harmonic_mean(gi, ge):
    return gi * ge / (gi + ge)


def axis_diffusivities(conductivity) -> dict:
    """Diffusivity (mm^2/ms) per axis from intra/extracellular conductivities.

    D = sigma_m / (beta * Cm) with sigma_m the harmonic mean (S/m), beta the
    surface-to-volume ratio (1/um on input) and Cm = 1 uF/cm^2.
    """
    beta_mm = conductivity.surf2vol * 1000.0
    out = {}
    for axis in ("fiber", "sheet", "normal"):
        gi, ge = conductivity.pair(axis)
        # S/m -> S/mm (1e-3), uF/cm^2 -> F/mm^2 (1e-8), 1/s -> 1/ms (1e-3)
        out[axis] = harmonic_mean(gi, ge) * 100.0 / beta_mm
    return out


def diffusion_tensors(mesh: Mesh, elem_ids, functions, efunc) -> np.ndarray:
    """Per-element 3x3 diffusion tensors.

    Without sheet vectors the tissue is transversely isotropic and the sheet
    diffusivity is used for every direction normal to the fiber.
    """
    D = np.zeros((len(elem_ids), 3, 3))
    I = np.eye(3)
    for fname in dict.fromkeys(efunc[elem_ids]):
        sel = np.nonzero(efunc[elem_ids] == fname)[0]
        d = axis_diffusivities(functions[fname].conductivity)
        f = mesh.fibers[elem_ids[sel]]
        ff = np.einsum("mi,mj->mij", f, f)
        if mesh.sheets is None:
            D[sel] = d["sheet"] * I + (d["fiber"] - d["sheet"]) * ff
        else:
            s = mesh.sheets[elem_ids[sel]]
            s = s - np.einsum("mi,mi->m", s, f)[:, None] * f
            s /= np.linalg.norm(s, axis=1)[:, None]
            n = np.cross(f, s)
            D[sel] = (d["fiber"] * ff + d["sheet"] * np.einsum("mi,mj->mij", s, s)
                      + d["normal"] * np.einsum("mi,mj->mij", n, n))
    return D


# -- reference elements -------------------------------------------------------------

_G2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _reference(kind):
    """Quadrature points (q, d), weights (q,), shape values (q, k), gradients (q, k, d)."""
    if kind == "line":
        xi = np.array([[0.5]])
        w = np.array([1.0])
        N = np.array([[0.5, 0.5]])
        dN = np.array([[[-1.0], [1.0]]])
        return xi, w, N, dN
    if kind == "triangle":
        w = np.array([0.5])
        N = np.full((1, 3), 1.0 / 3.0)
        dN = np.array([[[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]])
        return None, w, N, dN
    if kind == "tetra":
        w = np.array([1.0 / 6.0])
        N = np.full((1, 4), 0.25)
        dN = np.array([[[-1.0, -1.0, -1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
        return None, w, N, dN
    if kind == "quad":
        corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        pts = np.array([[a, b] for b in _G2 for a in _G2])
        w = np.full(4, 0.25)
    elif kind == "hexa":
        corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=float)
        pts = np.array([[a, b, c] for c in _G2 for b in _G2 for a in _G2])
        w = np.full(8, 0.125)
    else:
        raise ValueError(kind)
    # tensor-product (bi/tri)linear shape functions
    lin = lambda x, c: x if c == 1 else 1.0 - x
    dlin = lambda c: 1.0 if c == 1 else -1.0
    q, k, d = len(pts), len(corners), corners.shape[1]
    N = np.ones((q, k))
    dN = np.zeros((q, k, d))
    for qi, x in enumerate(pts):
        for a, c in enumerate(corners):
            N[qi, a] = np.prod([lin(x[j], c[j]) for j in range(d)])
            for j in range(d):
                dN[qi, a, j] = dlin(c[j]) * np.prod([lin(x[m], c[m]) for m in range(d) if m != j])
    return pts, w, N, dN


def element_matrices(points, conn, kind, D):
    """Stiffness (m, k, k) and lumped mass (m, k) for one element block."""
    _, w, N, dN = _reference(kind)
    X = points[conn]  # (m, k, 3)
    m, k = conn.shape
    Ke = np.zeros((m, k, k))
    Me = np.zeros((m, k))
    for q in range(len(w)):
        J = np.einsum("mka,kd->mad", X, dN[q])  # (m, 3, d)
        G = np.einsum("mad,mae->mde", J, J)
        detG = np.linalg.det(G)
        if np.any(detG <= 1e-24):
            bad = int(np.argmin(detG))
            raise SingularElement(f"{kind} element with zero or negative measure (block index {bad})")
        detJ = np.sqrt(detG)
        grad = np.einsum("mad,mde,ke->mka", J, np.linalg.inv(G), dN[q])  # (m, k, 3)
        Ke += w[q] * detJ[:, None, None] * np.einsum("mka,mab,mlb->mkl", grad, D, grad)
        Me += w[q] * detJ[:, None] * N[q][None, :]
    return Ke, Me


@dataclass
class Operators:
    K: sp.csr_matrix  # stiffness on active nodes
    mass: np.ndarray  # lumped mass, active nodes
    active: np.ndarray  # global ids of active nodes (sorted)
    local: np.ndarray  # global id -> local index, -1 when excluded
    node_function: np.ndarray  # function name per active node
    n_global: int

    @property
    def n(self) -> int:
        return len(self.active)

    def to_local(self, ids) -> np.ndarray:
        loc = self.local[np.asarray(ids, dtype=np.int64)]
        return loc[loc >= 0]


def assemble_operators(mesh: Mesh, partition: Partition, functions) -> Operators:
    """Linear-element stiffness with zero-flux boundaries; scar omitted."""
    active = np.nonzero(partition.active)[0]
    if active.size == 0:
        raise NoActiveNodes("no active nodes: every element is scar")
    local = -np.ones(mesh.n_points, dtype=np.int64)
    local[active] = np.arange(active.size)
    efunc = partition.element_function
    rows, cols, vals = [], [], []
    mass = np.zeros(active.size)
    for kind, ids, conn in mesh.blocks():
        keep = efunc[ids] != SCAR
        ids, conn = ids[keep], conn[keep]
        if ids.size == 0:
            continue
        for fname in set(efunc[ids]):
            f = functions[fname]
            if f.conductivity is None:
                raise ValueError(f"function {fname!r} has no conductivity")
            for key in ("gil", "gel", "git", "get", "gin", "gen", "surf2vol"):
                if not getattr(f.conductivity, key) > 0:
                    raise ValueError(f"function {fname!r}: {key} must be > 0")
        D = diffusion_tensors(mesh, ids, functions, efunc)
        Ke, Me = element_matrices(mesh.points, conn, kind, D)
        lc = local[conn]
        k = conn.shape[1]
        rows.append(np.repeat(lc, k, axis=1).ravel())
        cols.append(np.tile(lc, (1, k)).ravel())
        vals.append(Ke.ravel())
        np.add.at(mass, lc.ravel(), Me.ravel())
    n = active.size
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return Operators(K, mass, active, local, partition.node_function[active], mesh.n_points)


# -- tissue state and checkpoints -----------------------------------------------------

@dataclass
class TissueState:
    time: float  # ms
    values: np.ndarray  # (n_active, state_dim)

    @property
    def vm(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "TissueState":
        return TissueState(self.time, self.values.copy())

    def __eq__(self, other):
        return (isinstance(other, TissueState) and self.time == other.time
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


def save_checkpoint(state: TissueState, path) -> Path:
    """Binary little-endian checkpoint; written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dim = state.values.shape
    header = CHECKPOINT_MAGIC + struct.pack("<IQId", CHECKPOINT_VERSION, n, dim, state.time)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(state.values, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_nodes=None) -> TissueState:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint file")
    version, n, dim, t = struct.unpack("<IQId", data[4:28])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if expected_nodes is not None and n != expected_nodes:
        raise NodeCountMismatch(f"{path}: checkpoint has {n} nodes, mesh has {expected_nodes}")
    vals = np.frombuffer(data[28:], dtype="<f8")
    if vals.size != n * dim:
        raise VersionMismatch(f"{path}: truncated state data")
    return TissueState(t, vals.reshape(n, dim).astype(np.float64))


# -- stimuli and sentinel ------------------------------------------------------------

@dataclass(frozen=True)
class StimulusEvent:
    nodes: NodeSet
    onset: float
    duration: float
    strength: float

    def __post_init__(self):
        if not self.duration > 0 or not self.strength > 0:
            raise ValueError("stimulus duration and strength must be > 0")


@dataclass(frozen=True)
class SentinelConfig:
    upstroke_threshold: float = -20.0
    quiescence_window: float = 150.0
    poll_interval: float = 1.0

    def __post_init__(self):
        if not self.quiescence_window > 0:
            raise ValueError("quiescence_window must be > 0")


@dataclass
class RecordOptions:
    lat: bool = True
    snapshots: bool = False
    output_interval: float = 1.0
    threshold: float = -20.0


@dataclass
class RunResult:
    state: TissueState
    exit_time: float
    terminated_by: str  # "duration" | "sentinel"
    lat: np.ndarray | None = None  # first activation (ms), -1 never; active nodes
    snapshot_times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    last_activity: float | None = None
    crossings: int = 0


# -- the solver ----------------------------------------------------------------------

class Tissue:
    """Assembled problem: operators, per-node cell models, time step."""

    def __init__(self, mesh: Mesh, partition: Partition, functions, dt=0.05,
                 scheme="implicit_euler", solver="cg", tol=1e-8, models=None):
        self.mesh = mesh
        self.partition = partition
        self.functions = functions
        self.dt = float(dt)
        self.scheme = scheme
        self.solver = solver
        self.tol = tol
        self.ops = assemble_operators(mesh, partition, functions)
        if models is None:
            models = {name: make_model(f.model, f.model_par)
                      for name, f in functions.items() if not f.is_scar}
        self.models = models
        self._setup_reaction()
        self._setup_diffusion()

    # reaction ------------------------------------------------------------------
    def _setup_reaction(self):
        nf = self.ops.node_function
        names = list(dict.fromkeys(nf))
        for name in names:
            if self.models[name].dt_max < self.dt:
                raise ValueError(f"dt={self.dt} exceeds stability bound of {name}")
        dims = {self.models[n].state_dim for n in names}
        if len(dims) != 1:
            raise ValueError("all cell models in one tissue must share a state dimension")
        self.state_dim = dims.pop()
        self.groups = [(name, np.nonzero(nf == name)[0]) for name in names]
        self._ms = all(isinstance(self.models[n], MitchellSchaeffer) for n in names)
        if self._ms:
            self._params = np.zeros((self.ops.n, 5))
            for name, idx in self.groups:
                self._params[idx] = self.models[name].param_vector()

    def react(self, y, istim):
        if self._ms:
            ms_react(y, self.dt, istim, self._params)
        else:
            for name, idx in self.groups:
                sub = y[idx]
                self.models[name].react(sub, self.dt, istim[idx])
                y[idx] = sub

    # diffusion -----------------------------------------------------------------
    def _setup_diffusion(self):
        theta = 1.0 if self.scheme == "implicit_euler" else 0.5
        if self.scheme not in ("implicit_euler", "crank_nicolson"):
            raise ValueError(f"unknown diffusion scheme {self.scheme!r}")
        M = sp.diags(self.ops.mass)
        K = self.ops.K
        self.A = (M + theta * self.dt * K).tocsr()
        self.B = None if theta == 1.0 else (M - (1 - theta) * self.dt * K).tocsr()
        self._diag = self.A.diagonal()
        self._precond = spla.LinearOperator(self.A.shape, matvec=lambda x: x / self._diag,
                                            dtype=np.float64)
        self._lu = spla.splu(self.A.tocsc()) if self.solver == "direct" else None

    def diffuse(self, v):
        b = self.ops.mass * v if self.B is None else self.B @ v
        if self._lu is not None:
            return self._lu.solve(b)
        x, info = spla.cg(self.A, b, x0=v, rtol=self.tol, atol=0.0, maxiter=1000,
                          M=self._precond)
        if info != 0:
            raise LinearSolveFailure(f"CG did not converge (info={info})")
        return x

    # states --------------------------------------------------------------------
    def resting_state(self, time=0.0) -> TissueState:
        y = np.zeros((self.ops.n, self.state_dim))
        for name, idx in self.groups:
            y[idx] = self.models[name].resting_state()
        return TissueState(float(time), y)

    def step_index(self, t) -> int:
        return int(round(t / self.dt))

    def step(self, state: TissueState, istim=None) -> TissueState:
        """One split step; returns a new state."""
        y = state.values.copy()
        if istim is None:
            istim = np.zeros(self.ops.n)
        self.react(y, istim)
        y[:, 0] = self.diffuse(y[:, 0])
        if not np.all(np.isfinite(y)):
            raise NumericalBlowup(f"non-finite tissue state at t={state.time + self.dt}")
        k = self.step_index(state.time) + 1
        return TissueState(k * self.dt, y)

    def stimulus_nodes(self, nodes: NodeSet) -> np.ndarray:
        return self.ops.to_local(nodes.ids)

    def run(self, state: TissueState, stimuli=(), t_end=None, sentinel=None,
            record: RecordOptions | None = None, callback=None) -> RunResult:
        """Integrate to ``t_end`` or until the sentinel detects quiescence."""
        if state.n != self.ops.n:
            raise NodeCountMismatch(f"state has {state.n} nodes, tissue has {self.ops.n}")
        record = record or RecordOptions()
        dt = self.dt
        k0 = self.step_index(state.time)
        k_end = self.step_index(t_end)
        if k_end <= k0:
            raise ValueError(f"t_end={t_end} must exceed state time {state.time}")
        # stimulus schedule on the global step grid
        sched = []
        for s in stimuli:
            loc = self.stimulus_nodes(s.nodes)
            if loc.size == 0:
                raise ValueError("stimulus electrode lies entirely in excluded tissue")
            a = self.step_index(s.onset)
            sched.append((a, a + max(1, int(round(s.duration / dt))), loc, s.strength))
        last_stim_end = max((b for _, b, _, _ in sched), default=k0)

        thr = sentinel.upstroke_threshold if sentinel else record.threshold
        poll = max(1, int(round((sentinel.poll_interval if sentinel else 1.0) / dt)))
        window = sentinel.quiescence_window if sentinel else None
        snap_every = max(1, int(round(record.output_interval / dt)))

        y = state.values.copy()
        n = self.ops.n
        lat = np.full(n, -1.0) if record.lat else None
        last_activity = state.time
        crossings = 0
        result = RunResult(None, 0.0, "duration")
        if record.snapshots:
            result.snapshot_times.append(k0 * dt)
            result.snapshots.append(y[:, 0].astype(np.float32))
        istim = np.zeros(n)
        terminated = "duration"
        k = k0
        while k < k_end:
            istim[:] = 0.0
            for a, b, loc, amp in sched:
                if a <= k < b:
                    istim[loc] += amp
            v_prev = y[:, 0].copy()
            self.react(y, istim)
            y[:, 0] = self.diffuse(y[:, 0])
            k += 1
            v = y[:, 0]
            up = (v_prev < thr) & (v >= thr)
            if up.any():
                crossings += int(up.sum())
                t_prev = (k - 1) * dt
                frac = (thr - v_prev[up]) / (v[up] - v_prev[up])
                t_cross = t_prev + frac * dt
                last_activity = k * dt
                if lat is not None:
                    first = up & (lat < 0)
                    if first.any():
                        lat[first] = (t_prev + (thr - v_prev[first]) / (v[first] - v_prev[first]) * dt)
            if not np.isfinite(v).all() or not np.isfinite(y[:, 1:]).all():
                raise NumericalBlowup(f"non-finite tissue state at t={k * dt}")
            if record.snapshots and (k - k0) % snap_every == 0:
                result.snapshot_times.append(k * dt)
                result.snapshots.append(v.astype(np.float32))
            if callback is not None:
                callback(k * dt, y)
            if sentinel is not None and (k - k0) % poll == 0 and k >= last_stim_end:
                if k * dt - last_activity >= window - 1e-9:
                    terminated = "sentinel"
                    break
        final = TissueState(k * dt, y)
        result.state = final
        result.exit_time = k * dt
        result.terminated_by = terminated
        result.lat = lat
        result.last_activity = last_activity
        result.crossings = crossings
        return result


def run_simulation(tissue: Tissue, state, stimuli, t_end, sentinel=None, record=None) -> RunResult:
    return tissue.run(state, stimuli, t_end, sentinel, record)


def measure_lat(result: RunResult) -> np.ndarray:
    if result.lat is None:
        raise ValueError("run did not record activation times")
    return result.lat.copy()


def lat_to_global(ops: Operators, lat_local) -> np.ndarray:
    out = np.full(ops.n_global, -1.0)
    out[ops.active] = lat_local
    return out


def write_lat(path, lat_global) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    np.savetxt(tmp, lat_global, fmt="%.4f")
    os.replace(tmp, path)
    return path


def read_lat(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=1)


# -- Vm frame series -----------------------------------------------------------------

def write_vm_series(path, times, frames) -> Path:
    """IGB-like binary: header ``<QQdd`` (nodes, frames, t0, dt) then float32 frames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nframes = len(frames)
    n = len(frames[0]) if nframes else 0
    t0 = times[0] if nframes else 0.0
    step = (times[1] - times[0]) if nframes > 1 else 0.0
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<QQdd", n, nframes, t0, step))
        for f in frames:
            fh.write(np.asarray(f, dtype="<f4").tobytes())
    os.replace(tmp, path)
    return path


def read_vm_series(path):
    data = Path(path).read_bytes()
    n, nframes, t0, step = struct.unpack("<QQdd", data[:32])
    frames = np.frombuffer(data[32:], dtype="<f4").reshape(nframes, n)
    times = t0 + step * np.arange(nframes)
    return times, frames


# -- strand measurements ---------------------------------------------------------------

STRAND_LENGTH = 20.0  # mm
STRAND_STIM_LENGTH = 1.0  # mm of cable stimulated at x = 0
STRAND_STRENGTH = 100.0  # uA/cm^2, comfortably suprathreshold for CV runs


def _axis_function(function, axis):
    """Copy of ``function`` whose fiber pair is the conductivity pair of ``axis``."""
    from dataclasses import replace
    gi, ge = function.conductivity.pair(axis)
    cond = replace(function.conductivity, gil=gi, gel=ge, git=gi, get=ge, gin=gi, gen=ge)
    return replace(function, conductivity=cond)


def strand_tissue(function, resolution, axis="fiber", length=STRAND_LENGTH, dt=0.05,
                  solver="cg"):
    """1D cable of one function with its ``axis`` conductivities along x."""
    from .mesh import strand, tag_partition
    from .plan import ConfigurationDef
    f = _axis_function(function, axis)
    m = strand(length, resolution, name=f"strand_{function.name}")
    part = tag_partition(m, [ConfigurationDef("strand", (1,), f.name)])
    return Tissue(m, part, {f.name: f}, dt=dt, solver=solver)


def _strand_stimulus(tis, strength, duration, onset=0.0):
    x = tis.mesh.points[:, 0]
    ids = np.nonzero(x <= STRAND_STIM_LENGTH + 1e-9)[0]
    return StimulusEvent(NodeSet(ids, None), onset, duration, strength)


def _conductivity_is_zero(function, axis):
    gi, ge = function.conductivity.pair(axis)
    return gi <= 0 or ge <= 0 or function.conductivity.surf2vol <= 0


def strand_lat(function, resolution, axis="fiber", strength=STRAND_STRENGTH, duration=2.0,
               dt=0.05, t_max=1000.0, length=STRAND_LENGTH):
    """Activation times along a stimulated strand; returns (x, lat)."""
    tis = strand_tissue(function, resolution, axis, length, dt)
    x = tis.mesh.points[tis.ops.active, 0]
    state = tis.resting_state()
    stim = [_strand_stimulus(tis, strength, duration)]
    res = tis.run(state, stim, t_max, sentinel=SentinelConfig(quiescence_window=50.0))
    return x, res.lat


def measure_cv(function, resolution, axis="fiber", dt=0.05, strength=STRAND_STRENGTH,
               length=STRAND_LENGTH) -> float:
    """Conduction velocity (m/s) on a 20 mm cable, from LAT regression over the central half."""
    from .errors import NoPropagation
    if _conductivity_is_zero(function, axis):
        raise NoPropagation(f"{function.name}: zero {axis} conductivity")
    x, lat = strand_lat(function, resolution, axis, strength, dt=dt, length=length)
    sel = (x >= 0.25 * length) & (x <= 0.75 * length)
    if np.any(lat[sel] < 0):
        raise NoPropagation(f"{function.name}: wave failed before the measurement window "
                            f"({axis}, h={resolution} mm)")
    slope = np.polyfit(x[sel], lat[sel], 1)[0]  # ms/mm
    if not slope > 0:
        raise NoPropagation(f"{function.name}: non-monotone activation along the strand")
    return float(1.0 / slope)  # mm/ms == m/s


def stimulus_threshold(function, resolution=0.3, duration=2.0, dt=0.05, tol=0.05) -> float:
    """Smallest strength (uA/cm^2) of an end stimulus that propagates along the strand."""
    tis = strand_tissue(function, resolution, "fiber", dt=dt)
    x = tis.mesh.points[tis.ops.active, 0]
    far = x >= 0.75 * STRAND_LENGTH
    rest = tis.resting_state()

    def propagates(s):
        res = tis.run(rest, [_strand_stimulus(tis, s, duration)], 1000.0,
                      sentinel=SentinelConfig(quiescence_window=50.0))
        return bool(np.all(res.lat[far] >= 0))

    lo, hi = 0.0, 10.0
    while not propagates(hi):
        lo, hi = hi, 2.0 * hi
        if hi > 1e4:
            from .errors import NoPropagation
            raise NoPropagation(f"{function.name}: no propagating response up to {hi} uA/cm^2")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if propagates(mid):
            hi = mid
        else:
            lo = mid
    return hi
