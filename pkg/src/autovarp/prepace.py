"""Tissue initialization: eikonal activation maps, limit-cycle state
distribution and conductivity tuning.

The eikonal solve is a fast-iterative method on the simplicial split of the
mesh.  Each simplex carries the metric ``M = sum_a a a^T / v_a^2`` over its
fiber/sheet/normal axes, so the travel time along an edge ``e`` is
``sqrt(e^T M e)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .cellmodel import (DEFAULT_STIM_DURATION, DEFAULT_STIM_STRENGTH, CellState, LimitCycle,
                        cell_limit_cycle, make_model, read_init_state)
from .errors import (MissingTrajectory, NoPropagation, TuningDiverged, UnreachableTissue)
from .mesh import SCAR, SIMPLEX_SPLIT, Mesh, NodeSet, Partition
from .plan import Velocities
from .tissue import StimulusEvent, Tissue, TissueState, measure_cv


# -- eikonal ---------------------------------------------------------------------

@dataclass
class EikonalField:
    times: np.ndarray  # (n_points,) ms, -1 where unreached or excluded
    source: NodeSet
    speeds: np.ndarray  # (n_elements, 3) m/s along fiber, sheet, normal; 0 for scar

    @property
    def reached(self) -> np.ndarray:
        return self.times >= 0


def element_speeds(mesh: Mesh, partition: Partition, functions) -> np.ndarray:
    """Orthotropic speeds per element from each function's target velocities."""
    sp = np.zeros((mesh.n_elements, 3))
    for name, ids in partition.groups.items():
        if name == SCAR or functions[name].is_scar:
            continue
        v = functions[name].target_velocities
        sp[ids] = [v.vf, v.vs, v.vn]
    return sp


def simplices(mesh: Mesh, keep=None):
    """Simplicial split of the mesh: (s, 4) vertex ids padded with -1 and parent element ids."""
    out, parent = [], []
    for kind, ids, conn in mesh.blocks():
        if keep is not None:
            sel = keep[ids]
            ids, conn = ids[sel], conn[sel]
        if ids.size == 0:
            continue
        for local in SIMPLEX_SPLIT.get(kind, [tuple(range(conn.shape[1]))]):
            s = np.full((len(ids), 4), -1, dtype=np.int64)
            s[:, :len(local)] = conn[:, list(local)]
            out.append(s)
            parent.append(ids)
    if not out:
        return np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(out), np.concatenate(parent)


def metric_tensors(mesh: Mesh, elem_ids, speeds) -> np.ndarray:
    """Inverse-speed-squared metric per element (transversely isotropic without sheets)."""
    f = mesh.fibers[elem_ids]
    v = speeds[elem_ids]
    ff = np.einsum("mi,mj->mij", f, f)
    if mesh.sheets is None:
        return (ff / v[:, 0, None, None] ** 2
                + (np.eye(3)[None] - ff) / v[:, 1, None, None] ** 2)
    s = mesh.sheets[elem_ids]
    s = s - np.einsum("mi,mi->m", s, f)[:, None] * f
    s /= np.linalg.norm(s, axis=1)[:, None]
    n = np.cross(f, s)
    return (ff / v[:, 0, None, None] ** 2
            + np.einsum("mi,mj->mij", s, s) / v[:, 1, None, None] ** 2
            + np.einsum("mi,mj->mij", n, n) / v[:, 2, None, None] ** 2)


@njit(cache=True)
def _local_solve(x, known, T, pts, M):
    """Minimal arrival time at ``x`` through the face spanned by ``known`` vertices."""
    k = known.shape[0]
    y0 = known[0]
    w = pts[x] - pts[y0]
    if k == 1:
        return T[y0] + np.sqrt(w @ M @ w)
    E = np.empty((3, k - 1))
    dT = np.empty(k - 1)
    for j in range(1, k):
        E[:, j - 1] = pts[known[j]] - pts[y0]
        dT[j - 1] = T[known[j]] - T[y0]
    A = E.T @ M @ E
    b = E.T @ M @ w
    Ainv_b = np.linalg.solve(A, b)
    Ainv_dT = np.linalg.solve(A, dT)
    r0 = w - E @ Ainv_b
    den = 1.0 - dT @ Ainv_dT
    num = r0 @ M @ r0
    if den <= 0.0 or num < 0.0:
        return np.inf
    s = np.sqrt(num / den)
    lam = Ainv_b - s * Ainv_dT
    tot = 0.0
    for j in range(k - 1):
        if lam[j] < -1e-12:
            return np.inf
        tot += lam[j]
    if tot > 1.0 + 1e-12:
        return np.inf
    return T[y0] + dT @ lam + s


@njit(cache=True)
def _node_update(x, T, pts, simp, mets, n2s_ptr, n2s_idx):
    best = T[x]
    for p in range(n2s_ptr[x], n2s_ptr[x + 1]):
        s = n2s_idx[p]
        others = np.empty(3, dtype=np.int64)
        m = 0
        for j in range(4):
            v = simp[s, j]
            if v >= 0 and v != x and np.isfinite(T[v]):
                others[m] = v
                m += 1
        # every non-empty subset of the known vertices of this simplex
        for mask in range(1, 1 << m):
            cnt = 0
            for j in range(m):
                if mask & (1 << j):
                    cnt += 1
            known = np.empty(cnt, dtype=np.int64)
            c = 0
            for j in range(m):
                if mask & (1 << j):
                    known[c] = others[j]
                    c += 1
            t = _local_solve(x, known, T, pts, mets[s])
            if t < best:
                best = t
    return best


@njit(cache=True)
def _fim(T, pts, simp, mets, n2s_ptr, n2s_idx, nbr_ptr, nbr_idx, sources, tol):
    n = T.shape[0]
    in_list = np.zeros(n, dtype=np.bool_)
    fixed = np.zeros(n, dtype=np.bool_)
    active = np.empty(n, dtype=np.int64)
    na = 0
    for s in sources:
        fixed[s] = True
    for s in sources:
        for p in range(nbr_ptr[s], nbr_ptr[s + 1]):
            v = nbr_idx[p]
            if not fixed[v] and not in_list[v]:
                in_list[v] = True
                active[na] = v
                na += 1
    nxt = np.empty(n, dtype=np.int64)
    while na > 0:
        nn = 0
        for i in range(na):
            x = active[i]
            old = T[x]
            new = _node_update(x, T, pts, simp, mets, n2s_ptr, n2s_idx)
            T[x] = new
            if abs(old - new) <= tol or (not np.isfinite(old) and not np.isfinite(new)):
                in_list[x] = False
                for p in range(nbr_ptr[x], nbr_ptr[x + 1]):
                    v = nbr_idx[p]
                    if fixed[v] or in_list[v]:
                        continue
                    q = _node_update(v, T, pts, simp, mets, n2s_ptr, n2s_idx)
                    if q < T[v] - tol:
                        T[v] = q
                        in_list[v] = True
                        nxt[nn] = v
                        nn += 1
            else:
                nxt[nn] = x
                nn += 1
        for i in range(nn):
            active[i] = nxt[i]
        na = nn
    return T


def _adjacency(simp, n):
    """Node -> simplex and node -> neighbour CSR structures."""
    rows, cols = [], []
    for j in range(simp.shape[1]):
        v = simp[:, j]
        ok = v >= 0
        rows.append(v[ok])
        cols.append(np.nonzero(ok)[0])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    order = np.lexsort((c, r))
    r, c = r[order], c[order]
    n2s_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(n2s_ptr, r + 1, 1)
    n2s_ptr = np.cumsum(n2s_ptr)
    pairs = []
    for a in range(simp.shape[1]):
        for b in range(simp.shape[1]):
            if a != b:
                ok = (simp[:, a] >= 0) & (simp[:, b] >= 0)
                pairs.append(np.column_stack([simp[ok, a], simp[ok, b]]))
    pr = np.unique(np.concatenate(pairs), axis=0)
    nbr_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(nbr_ptr, pr[:, 0] + 1, 1)
    nbr_ptr = np.cumsum(nbr_ptr)
    return n2s_ptr, c.astype(np.int64), nbr_ptr, pr[:, 1].astype(np.int64)


def eikonal_lat(mesh: Mesh, partition: Partition, functions, electrode: NodeSet,
                tol: float = 1e-6) -> EikonalField:
    """Anisotropic arrival times from ``electrode`` (t = 0) through non-scar tissue."""
    speeds = element_speeds(mesh, partition, functions)
    keep = partition.element_function != SCAR
    simp, parent = simplices(mesh, keep)
    mets = metric_tensors(mesh, parent, speeds) if len(parent) else np.zeros((0, 3, 3))
    n = mesh.n_points
    T = np.full(n, np.inf)
    src = np.asarray(electrode.ids, dtype=np.int64)
    src = src[partition.active[src]]
    if src.size == 0:
        raise NoPropagation("electrode lies entirely in excluded tissue")
    T[src] = 0.0
    n2s_ptr, n2s_idx, nbr_ptr, nbr_idx = _adjacency(simp, n)
    T = _fim(T, np.ascontiguousarray(mesh.points, dtype=np.float64), simp,
             np.ascontiguousarray(mets), n2s_ptr, n2s_idx, nbr_ptr, nbr_idx, src, tol)
    unreached = partition.active & ~np.isfinite(T)
    if unreached.any():
        warnings.warn(UnreachableTissue(f"{int(unreached.sum())} active nodes not reached "
                                        f"from the electrode"))
    T[~np.isfinite(T)] = -1.0
    T[~partition.active] = -1.0
    return EikonalField(T, electrode, speeds)


# -- cellular limit cycles and state distribution ------------------------------------

def function_limit_cycle(function, pcl, dt=0.05, init_dir=None, num_cycles=None,
                         strength=DEFAULT_STIM_STRENGTH,
                         duration=DEFAULT_STIM_DURATION) -> LimitCycle:
    """Cellular limit cycle of one function at ``pcl``, cached in ``init_dir``.

    The cached file holds the pre-stimulus state of the final cycle; the
    one-cycle trajectory is regenerated from it deterministically.
    """
    from pathlib import Path
    from .cellmodel import init_filename, write_init_state
    model = make_model(function.model, function.model_par)
    ini = function.initialization
    if num_cycles is None:
        num_cycles = ini.num_cycles if ini is not None else 100
    cached = None
    if init_dir is not None:
        path = Path(init_dir) / init_filename(function.name, pcl)
        if path.exists():
            cached = read_init_state(path)
    if cached is None and ini is not None and ini.init:
        p = Path(ini.init)
        if p.exists():
            cached = read_init_state(p)
    if cached is not None:
        lc = cell_limit_cycle(model, pcl, 1, dt, strength, duration,
                              initial=CellState(cached.values, 0.0))
        lc.state = cached
        return lc
    lc = cell_limit_cycle(model, pcl, num_cycles, dt, strength, duration)
    if init_dir is not None:
        write_init_state(Path(init_dir) / init_filename(function.name, pcl), lc.state)
    return lc


def _upstroke_end(lc: LimitCycle) -> float:
    """Phase (ms) at which the stimulated upstroke peaks."""
    return float(np.argmax(lc.trajectory[:, 0]) * lc.dt)


def distribute_states(tissue: Tissue, lat, trajectories: dict, pcl: float,
                      time: float = 0.0) -> TissueState:
    """Assign every active node the limit-cycle state one cycle behind its activation.

    ``lat`` is a global per-point map (-1 = unreached).  A node with LAT ``L``
    gets the phase ``(pcl - L) mod pcl`` of its function's trajectory; phases
    landing between stimulus onset and the upstroke peak are snapped back to
    phase 0 (the last diastolic sample).
    """
    ops = tissue.ops
    lat_local = np.asarray(lat, dtype=np.float64)[ops.active]
    state = tissue.resting_state(time)
    for name, idx in tissue.groups:
        if name not in trajectories:
            raise MissingTrajectory(f"no limit-cycle trajectory for function {name!r}")
        lc = trajectories[name]
        L = lat_local[idx]
        reached = L >= 0
        phase = np.mod(pcl - L[reached], pcl)
        phase[(phase > 0) & (phase <= _upstroke_end(lc))] = 0.0
        state.values[idx[reached]] = lc.state_at_phase(phase)
    return state


def shift_phase_consistent(lat, c):
    """LAT map shifted by a constant; helper for phase-consistency checks."""
    lat = np.asarray(lat, dtype=np.float64)
    return np.where(lat >= 0, lat + c, lat)


# -- prepacing ----------------------------------------------------------------------

@dataclass(frozen=True)
class PrepaceMode:
    gen_lat: str = "ek"
    lim_cyc: str = "lat-1"

    def __post_init__(self):
        if self.gen_lat not in ("ek", "rd"):
            raise ValueError(f"gen_lat must be 'ek' or 'rd', got {self.gen_lat!r}")
        if self.lim_cyc not in ("lat-0", "lat-1"):
            raise ValueError(f"lim_cyc must be 'lat-0' or 'lat-1', got {self.lim_cyc!r}")


@dataclass
class PrepaceResult:
    state: TissueState
    lat: np.ndarray  # global per-point activation map used for distribution


def rd_lat(tissue: Tissue, trajectories, electrode: NodeSet, pcl, strength, duration):
    """Activation map from one simulated RD beat starting at the pre-stimulus limit-cycle state."""
    n_glob = tissue.ops.n_global
    state = distribute_states(tissue, np.zeros(n_glob), trajectories, pcl)
    res = tissue.run(state, [StimulusEvent(electrode, 0.0, duration, strength)], pcl)
    lat = np.full(n_glob, -1.0)
    lat[tissue.ops.active] = res.lat
    return lat


def prepace(tissue: Tissue, mesh: Mesh, partition: Partition, functions, electrode: NodeSet,
            trajectories: dict, pcl: float, mode: PrepaceMode, strength: float,
            duration: float = 2.0, record=None):
    """Build the PP state: LAT map, phase distribution and, for lat-1, one RD cycle.

    Returns (PrepaceResult, RunResult or None).
    """
    if mode.gen_lat == "ek":
        lat = eikonal_lat(mesh, partition, functions, electrode).times
    else:
        lat = rd_lat(tissue, trajectories, electrode, pcl, strength, duration)
    state = distribute_states(tissue, lat, trajectories, pcl)
    run = None
    if mode.lim_cyc == "lat-1":
        run = tissue.run(state, [StimulusEvent(electrode, 0.0, duration, strength)], pcl,
                         record=record)
        state = run.state
    return PrepaceResult(state, lat), run


# -- conductivity tuning ----------------------------------------------------------

AXES = ("fiber", "sheet", "normal")


@dataclass
class TuningResult:
    function: object  # FunctionDef with tuned conductivity and measured velocities
    iterations: int  # measurement rounds
    history: list  # per round: {axis: measured m/s}


def tune_conductivities(function, resolution, tol=0.02, max_iter=10, dt=0.05) -> TuningResult:
    """Scale each axis's (gi, ge) pair by (v_target / v_measured)^2 until all axes match.

    Axes with identical conductivity pairs and targets share one measurement.
    """
    target = function.reference
    if target is None:
        raise ValueError(f"{function.name}: no reference velocities to tune against")
    f = function
    history = []
    for it in range(1, max_iter + 1):
        measured = {}
        cache = {}
        for axis in AXES:
            key = (f.conductivity.pair(axis), target.axis(axis))
            if key not in cache:
                cache[key] = measure_cv(f, resolution, axis, dt=dt)
            measured[axis] = cache[key]
        history.append(measured)
        errs = {a: abs(measured[a] - target.axis(a)) / target.axis(a) for a in AXES}
        f = replace(f, measured=Velocities(measured["fiber"], measured["sheet"], measured["normal"]))
        if max(errs.values()) < tol:
            return TuningResult(f, it, history)
        if it == max_iter:
            break
        factors = {a: (target.axis(a) / measured[a]) ** 2 for a in AXES if errs[a] >= tol}
        f = replace(f, conductivity=f.conductivity.scaled(factors))
    raise TuningDiverged(f"{function.name}: velocities {history[-1]} not within {tol:.0%} "
                         f"of {target.as_dict()} after {max_iter} iterations")
