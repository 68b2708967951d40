"""Staged PP -> S1 -> S2 -> MT execution over a cohort of subjects.

Every stage hands over to the next through checkpoint files whose names
follow a fixed template.  Each checkpoint carries a JSON sidecar with a
stage key: a hash of everything upstream that determines the state.  A
checkpoint is reused only when its key matches the current study, which is
how stale or foreign upstream states are detected.

Times in checkpoint names are offsets relative to the final S1 stimulus (PP
uses the absolute prepacing time, MT the simulated MT duration); absolute
simulation time lives inside the state.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cellmodel import make_model, plot_restitution, restitution_curve
from .errors import AutoVarpError, MissingUpstream, SpecError
from .mesh import geometry_files, load_mesh, resolve_electrode, tag_partition
from .plan import (Plan, atomic_write_text, dumps, load_plan, merge_subject_overrides,
                   plan_to_dict, write_measured_velocities)
from .prepace import PrepaceMode, function_limit_cycle, prepace, tune_conductivities
from .tissue import (RecordOptions, SentinelConfig, StimulusEvent, Tissue, load_checkpoint,
                     save_checkpoint, write_lat, write_vm_series)

log = logging.getLogger(__name__)

STAGES = ("PP", "S1", "S2", "MT")
DEFAULT_TISSUE_STRENGTH = 40.0  # uA/cm^2, used when the plan leaves it unset
TUNING_TOL = 0.02
TUNING_MAX_ITER = 10


# -- study specification --------------------------------------------------------

@dataclass(frozen=True)
class StudySpec:
    plan: Plan
    cohort_dir: Path
    plan_path: Path | None = None
    protocols_path: Path | None = None
    case_id: str | None = None
    protocols: tuple = ()  # ProtocolDef in execution order; empty -> plan order
    stage: str = "MT"
    run_upstream: bool = True  # False: execute only ``stage``, upstream must exist
    prepace: PrepaceMode | None = PrepaceMode()
    s1_cycles: int = 1
    ci_array: tuple = (330.0,)
    s2_cycles: int = 1
    decrement_s2: float = 0.0
    mt_duration: float = 2000.0
    overwrite: bool = False
    tissue_tuning: bool = False
    gen_param_files: bool = False
    plot_restitution: bool = False
    electrodes_file: str | None = "electrodes.json"
    configurations_file: str | None = "configurations.json"
    workers: int = 1
    root: Path | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise SpecError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 1 <= self.s1_cycles <= 9:
            raise SpecError(f"S1 cycles must be in 1..9, got {self.s1_cycles}")
        if not 1 <= self.s2_cycles <= 9:
            raise SpecError(f"S2 cycles must be in 1..9, got {self.s2_cycles}")
        ci = tuple(float(c) for c in self.ci_array)
        if not ci:
            raise SpecError("CI array must not be empty")
        if any(c <= 0 for c in ci):
            raise SpecError(f"CI array entries must be > 0, got {ci}")
        if list(ci) != sorted(set(ci)):
            raise SpecError(f"CI array must be strictly ascending, got {ci}")
        if self.decrement_s2 < 0:
            raise SpecError("S2 decrement must be >= 0")
        if min(ci) - (self.s2_cycles - 1) * self.decrement_s2 <= 0:
            raise SpecError("decremental S2 train reaches a non-positive interval")
        if not self.mt_duration > 0:
            raise SpecError("MT duration must be > 0")
        if self.workers < 1:
            raise SpecError("workers must be >= 1")
        object.__setattr__(self, "ci_array", ci)
        object.__setattr__(self, "cohort_dir", Path(self.cohort_dir))
        if not self.protocols:
            object.__setattr__(self, "protocols", tuple(self.plan.protocols.values()))
        if not self.protocols:
            raise SpecError("no protocols defined")

    @property
    def stages(self) -> tuple:
        """Stages whose tasks are emitted (everything up to ``stage``)."""
        return STAGES[:STAGES.index(self.stage) + 1]

    @property
    def executed_stages(self) -> tuple:
        return self.stages if self.run_upstream else (self.stage,)

    @property
    def mode(self) -> PrepaceMode:
        return self.prepace or PrepaceMode()

    @property
    def output_root(self) -> Path:
        if self.root is not None:
            return Path(self.root)
        return Path(os.environ.get("AUTOVARP_ROOT", os.getcwd()))

    def command(self) -> list:
        """CLI arguments that reproduce this study."""
        args = ["autovarp", "--plan", str(self.plan_path or "planfile.json"),
                "--cohort-dir", str(self.cohort_dir)]
        if self.protocols_path is not None:
            args += ["--protocols", str(self.protocols_path)]
        if self.case_id is not None:
            args += ["--case-ID", self.case_id]
        if self.electrodes_file != "electrodes.json":
            args += ["--electrodes", str(self.electrodes_file)]
        if self.configurations_file != "configurations.json":
            args += ["--configurations", str(self.configurations_file)]
        if not self.run_upstream:
            args += ["--stage", self.stage]
        elif self.stage != "MT":
            args += ["--stage", self.stage]
        if self.prepace is not None:
            args += ["--gen-lat", self.prepace.gen_lat, "--lim-cyc", self.prepace.lim_cyc]
        if "S1" in self.stages:
            args += ["--S1-cycles", str(self.s1_cycles),
                     "--CI-array", ",".join(f"{c:g}" for c in self.ci_array)]
        if "S2" in self.stages:
            args += ["--S2-cycles", str(self.s2_cycles)]
            if self.decrement_s2:
                args += ["--decrement-S2", f"{self.decrement_s2:g}"]
        if "MT" in self.stages:
            args += ["--MT-duration", f"{self.mt_duration:g}"]
        if self.tissue_tuning:
            args.append("--tissue-tuning")
        return args

    def spec_hash(self) -> str:
        d = {"plan": plan_to_dict(self.plan),
             "protocols": [p.name for p in self.protocols],
             "stage": self.stage, "prepace": _mode_dict(self.prepace),
             "s1_cycles": self.s1_cycles, "ci_array": list(self.ci_array),
             "s2_cycles": self.s2_cycles, "decrement_s2": self.decrement_s2,
             "mt_duration": self.mt_duration, "tissue_tuning": self.tissue_tuning}
        return hashlib.sha256(dumps(d).encode()).hexdigest()


def _mode_dict(mode):
    return None if mode is None else {"gen_lat": mode.gen_lat, "lim_cyc": mode.lim_cyc}


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:20]


# -- checkpoint naming -------------------------------------------------------------

def checkpoint_name(stage, protocol=None, electrode=None, meshname=None, pcl=None, ci=None,
                    t=0.0, mode=None) -> str:
    """File name of a checkpoint; ``mode`` is the lim-cyc option for PP."""
    if stage == "PP":
        return f"{protocol}_{meshname}_pp_{mode}_bcl_{pcl:.1f}_tstamp_{t:.1f}.roe"
    if stage == "S1":
        return f"S1_{electrode}_PCL_{pcl:.1f}_ms_{meshname}_tstamp_{t:.1f}.roe"
    if stage == "S2":
        return f"S2_{electrode}_PCL_{pcl:.1f}_ms_CI_{ci:.1f}_ms_{meshname}_tstamp_{t:.1f}.roe"
    if stage == "MT":
        return f"MT_{electrode}_PCL_{pcl:.1f}_ms_CI_{ci:.1f}_ms_{meshname}_tstamp_{t:.3f}.roe"
    raise ValueError(f"unknown stage {stage!r}")


def lat_name(protocol, gen_lat, electrode) -> str:
    # the "lim_cic" prefix is kept as-is for compatibility with existing cohorts
    return f"lim_cic-ptcl_{protocol}_{gen_lat}_el_{electrode}-act_seq.dat"


_N = r"\d+(?:\.\d+)?"
NAME_PATTERNS = {
    "S1": re.compile(rf"^S1_(?P<electrode>.+)_PCL_(?P<pcl>{_N})_ms_(?P<mesh>.+)_tstamp_(?P<t>{_N})\.roe$"),
    "S2": re.compile(rf"^S2_(?P<electrode>.+)_PCL_(?P<pcl>{_N})_ms_CI_(?P<ci>{_N})_ms_(?P<mesh>.+)"
                     rf"_tstamp_(?P<t>{_N})\.roe$"),
    "MT": re.compile(rf"^MT_(?P<electrode>.+)_PCL_(?P<pcl>{_N})_ms_CI_(?P<ci>{_N})_ms_(?P<mesh>.+)"
                     rf"_tstamp_(?P<t>{_N})\.roe$"),
    "PP": re.compile(rf"^(?P<protocol>.+)_(?P<mesh>[^_]+)_pp_(?P<mode>lat-[01])_bcl_(?P<pcl>{_N})"
                     rf"_tstamp_(?P<t>{_N})\.roe$"),
}


def parse_checkpoint_name(name: str):
    """Inverse of :func:`checkpoint_name`: (stage, fields) or None."""
    for stage in ("S1", "S2", "MT", "PP"):
        m = NAME_PATTERNS[stage].match(name)
        if m:
            d = m.groupdict()
            for k in ("pcl", "ci", "t"):
                if k in d:
                    d[k] = float(d[k])
            return stage, d
    return None


def display_label(stage, pcl, ci=None, t=None) -> str:
    """Compact status label, e.g. ``S1-0600-280``, ``S2-0600-0330-660``, ``MT-0600-0330-02000``."""
    p = f"{round(pcl):04d}"
    if stage == "PP":
        return f"lim_cyc-{p}"
    if stage == "S1":
        return f"S1-{p}-{t:g}"
    if stage == "S2":
        return f"S2-{p}-{round(ci):04d}-{t:g}"
    if stage == "MT":
        return f"MT-{p}-{round(ci):04d}-{int(t):05d}"
    raise ValueError(stage)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


@dataclass
class CheckpointRecord:
    stage: str
    protocol: str
    electrode: str
    pcl: float
    ci: float | None
    timestamp: float
    path: Path
    metadata: dict = field(default_factory=dict)
    simulated: bool = False  # produced in this invocation

    @property
    def label(self) -> str:
        return display_label(self.stage, self.pcl, self.ci, self.timestamp)

    @property
    def time(self) -> float:
        """Absolute simulation time of the stored state."""
        return float(self.metadata["time"])


def read_meta(path) -> dict | None:
    p = meta_path(path)
    if not Path(path).exists() or not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def _record_from_meta(path, meta, simulated=False) -> CheckpointRecord:
    return CheckpointRecord(meta["stage"], meta["protocol"], meta["electrode"], meta["pcl"],
                            meta.get("ci"), meta["timestamp"], Path(path), meta, simulated)


# -- train timing ------------------------------------------------------------------

def s2_train(ci, s2_cycles, decrement=0.0):
    """S2 onsets relative to the final S1 and the end of the wait after the last S2.

    Intervals are ci, ci - d, ci - 2d, ...; the wait equals the last interval.
    """
    onsets, t = [], 0.0
    for j in range(s2_cycles):
        t += ci - j * decrement
        onsets.append(t)
    last = ci - (s2_cycles - 1) * decrement
    return onsets, onsets[-1] + last


# -- subjects ----------------------------------------------------------------------

def list_subjects(spec: StudySpec) -> list:
    """Subject directories in name order (a subject holds a ``.pts`` file)."""
    if not spec.cohort_dir.is_dir():
        raise OSError(f"cohort directory not found: {spec.cohort_dir}")
    dirs = sorted(d for d in spec.cohort_dir.iterdir() if d.is_dir() and any(d.glob("*.pts")))
    if spec.case_id is not None:
        dirs = [d for d in dirs if d.name == spec.case_id]
        if not dirs:
            raise OSError(f"case {spec.case_id!r} not found in {spec.cohort_dir}")
    return dirs


class Subject:
    """One mesh with its merged plan; heavy objects are built on first use."""

    def __init__(self, spec: StudySpec, directory):
        self.spec = spec
        self.dir = Path(directory)
        self.name = self.dir.name
        self.plan = merge_subject_overrides(spec.plan, self.dir, spec.electrodes_file,
                                            spec.configurations_file)
        self.checkpoints = self.dir / "checkpoints"
        self.init_dir = self.dir / "init"
        self._mesh = self._partition = self._tissue = self._geom_hash = None
        self._electrodes = {}

    @property
    def mesh(self):
        if self._mesh is None:
            self._mesh = load_mesh(self.dir)
        return self._mesh

    @property
    def meshname(self) -> str:
        return self.name

    @property
    def partition(self):
        if self._partition is None:
            self._partition = tag_partition(self.mesh, self.plan.configurations.values())
        return self._partition

    @property
    def functions(self):
        return self.plan.functions

    @property
    def setup(self):
        return self.plan.solver_setup

    @property
    def strength(self) -> float:
        s = self.setup.stimulus_strength
        return DEFAULT_TISSUE_STRENGTH if s is None else s

    @property
    def tissue(self) -> Tissue:
        if self._tissue is None:
            s = self.setup
            used = set(self.partition.groups) - {"scar"}
            funcs = {k: f for k, f in self.functions.items() if k in used}
            self._tissue = Tissue(self.mesh, self.partition, funcs, dt=s.dt,
                                  scheme=s.diffusion_scheme, solver=s.linear_solver,
                                  tol=s.linear_tolerance)
        return self._tissue

    def electrode(self, name):
        if name not in self._electrodes:
            self._electrodes[name] = resolve_electrode(self.mesh, self.plan.electrodes[name])
        return self._electrodes[name]

    @property
    def geometry_hash(self) -> str:
        if self._geom_hash is None:
            h = hashlib.sha256()
            for p in geometry_files(self.dir):
                h.update(p.name.encode())
                h.update(p.read_bytes())
            self._geom_hash = h.hexdigest()[:20]
        return self._geom_hash

    @property
    def resolution(self) -> float:
        return float(np.median(self.mesh.edge_lengths()))

    # stage keys ----------------------------------------------------------------
    def pp_key(self, protocol, mode: PrepaceMode) -> str:
        d = plan_to_dict(self.plan)
        return _key("PP", d["functions"], d["configurations"], d["solver_setup"],
                    d["electrodes"].get(protocol.electrode), protocol.name, protocol.bcl,
                    protocol.num_cycles, self.geometry_hash, _mode_dict(mode))

    def s1_key(self, protocol, mode, spec) -> str:
        return _key("S1", self.pp_key(protocol, mode), spec.s1_cycles, min(spec.ci_array))

    def coast_key(self, protocol, mode, spec, ci) -> str:
        return _key("S1c", self.s1_key(protocol, mode, spec), ci)

    def s2_key(self, protocol, mode, spec, ci) -> str:
        return _key("S2", self.s1_key(protocol, mode, spec), ci, spec.s2_cycles, spec.decrement_s2)

    def mt_key(self, protocol, mode, spec, ci) -> str:
        s = self.setup
        return _key("MT", self.s2_key(protocol, mode, spec, ci), spec.mt_duration,
                    s.upstroke_threshold, s.quiescence_window, s.poll_interval)


# -- stage execution -------------------------------------------------------------------

def _task_id(protocol, ci=None) -> str:
    return protocol if ci is None else f"{protocol}_CI_{ci:.1f}"


class StageRunner:
    """Runs the stages of one subject, reusing valid checkpoints."""

    def __init__(self, spec: StudySpec, subject: Subject):
        self.spec = spec
        self.subj = subject
        self.simulations = 0

    # helpers -----------------------------------------------------------------------
    def _sim_dir(self, stage, task) -> Path:
        return self.spec.output_root / "sim_outputs" / self.subj.name / stage / task

    def _valid(self, path, key):
        meta = read_meta(path)
        if meta is None or meta.get("key") != key:
            return None
        return meta

    def _publish(self, state, path, meta):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = dict(meta, time=state.time, spec_hash=self.spec.spec_hash(),
                    created=time.strftime("%Y-%m-%dT%H:%M:%S"),
                    command=self.spec.command(), version=__version__)
        atomic_write_text(meta_path(path), dumps(meta))
        save_checkpoint(state, path)
        return _record_from_meta(path, meta, simulated=True)

    def _write_outputs(self, stage, task, run, extra=None, state=None):
        out = self._sim_dir(stage, task)
        out.mkdir(parents=True, exist_ok=True)
        ops = self.subj.tissue.ops
        if run is not None and run.snapshots:
            times, frames = run.snapshot_times, run.snapshots
        else:
            times, frames = [state.time], [state.vm.astype(np.float32)]
        glob_frames = []
        for f in frames:
            g = np.full(ops.n_global, np.nan, dtype=np.float32)
            g[ops.active] = f
            glob_frames.append(g)
        write_vm_series(out / "vm.bin", times, glob_frames)
        info = {"task": task, "stage": stage, "subject": self.subj.name}
        if run is not None:
            info.update(exit_time=run.exit_time, terminated_by=run.terminated_by,
                        last_activity=run.last_activity, crossings=run.crossings)
        info.update(extra or {})
        atomic_write_text(out / "log.json", dumps(info))

    def _record_opts(self):
        s = self.subj.setup
        return RecordOptions(lat=True, snapshots=True, output_interval=s.output_interval,
                             threshold=s.upstroke_threshold)

    def _stim(self, protocol, onset):
        return StimulusEvent(self.subj.electrode(protocol.electrode), onset,
                             self.subj.setup.stimulus_duration, self.subj.strength)

    def _missing(self, path, stage, reason):
        found = []
        for m in sorted(Path(path).parent.glob(f"{stage}_*.roe.json")) if stage != "PP" else \
                sorted(Path(path).parent.glob("*_pp_*.roe.json")):
            try:
                found.append(" ".join(json.loads(m.read_text()).get("command", [])))
            except (OSError, json.JSONDecodeError):
                continue
        rem = (f"run --stage {stage} first with the same upstream flags"
               if not found else
               f"repeat the flags of the run that produced the existing {stage} checkpoints, "
               f"e.g. `{found[0]}`, or rerun --stage {stage}")
        return MissingUpstream(path, reason, rem)

    def _require(self, path, key, stage):
        meta = self._valid(path, key)
        if meta is None:
            reason = ("checkpoint absent" if not Path(path).exists()
                      else "checkpoint was produced by a different study configuration")
            raise self._missing(path, stage, reason)
        return meta

    def _pp_path(self, protocol, mode):
        pcl = protocol.bcl
        t = pcl if mode.lim_cyc == "lat-1" else 0.0
        return self.subj.checkpoints / checkpoint_name(
            "PP", protocol.name, protocol.electrode, self.subj.meshname, pcl, t=t, mode=mode.lim_cyc)

    def _upstream_mode(self, protocol):
        if self.spec.prepace is None:
            pattern = checkpoint_name("PP", protocol.name, protocol.electrode, self.subj.meshname,
                                      protocol.bcl, t=0, mode="<lim-cyc>")
            raise self._missing(self.subj.checkpoints / pattern, "PP",
                                "prepacing flags (--gen-lat/--lim-cyc) not given")
        return self.spec.prepace

    # PP ------------------------------------------------------------------------------
    def trajectories(self, protocol):
        out = {}
        used = set(self.subj.partition.groups) - {"scar"}
        for name in sorted(used):
            f = self.subj.functions[name]
            out[name] = function_limit_cycle(f, protocol.bcl, self.subj.setup.dt,
                                             self.subj.init_dir, num_cycles=protocol.num_cycles)
        return out

    def pp(self, protocol) -> CheckpointRecord:
        mode = self.spec.mode
        path = self._pp_path(protocol, mode)
        lat_path = self.subj.checkpoints / lat_name(protocol.name, mode.gen_lat, protocol.electrode)
        key = self.subj.pp_key(protocol, mode)
        meta = self._valid(path, key)
        if meta is not None and lat_path.exists() and not self.spec.overwrite:
            log.info("%s: PP %s present, skipped", self.subj.name, path.name)
            return _record_from_meta(path, meta)
        log.info("%s: PP %s (%s, %s)", self.subj.name, protocol.name, mode.gen_lat, mode.lim_cyc)
        trajs = self.trajectories(protocol)
        s = self.subj.setup
        res, run = prepace(self.subj.tissue, self.subj.mesh, self.subj.partition,
                           self.subj.functions, self.subj.electrode(protocol.electrode), trajs,
                           protocol.bcl, mode, self.subj.strength, s.stimulus_duration,
                           record=self._record_opts())
        self.simulations += 1
        self.subj.checkpoints.mkdir(parents=True, exist_ok=True)
        write_lat(lat_path, res.lat)
        if self.spec.plot_restitution:
            self._restitution(protocol, trajs)
        self._write_outputs("PP", _task_id(protocol.name), run, state=res.state,
                            extra={"lat_file": lat_path.name})
        t = res.state.time
        return self._publish(res.state, path, {
            "stage": "PP", "protocol": protocol.name, "electrode": protocol.electrode,
            "pcl": protocol.bcl, "ci": None, "timestamp": t, "key": key,
            "prepace": _mode_dict(mode), "lat_file": lat_path.name})

    def _restitution(self, protocol, trajs):
        curves = []
        for name, lc in trajs.items():
            f = self.subj.functions[name]
            model = make_model(f.model, f.model_par)
            curves.append(restitution_curve(model, protocol.bcl, np.arange(10.0, 410.0, 10.0),
                                            lc=lc, tissue=name))
        plot_restitution(curves, self._sim_dir("PP", "restitution") / f"restitution_bcl{protocol.bcl:g}")

    # S1 ------------------------------------------------------------------------------
    def s1(self, protocol) -> CheckpointRecord:
        mode = self._upstream_mode(protocol)
        spec, pcl = self.spec, protocol.bcl
        cmin = min(spec.ci_array)
        path = self.subj.checkpoints / checkpoint_name("S1", protocol.name, protocol.electrode,
                                                       self.subj.meshname, pcl, t=cmin)
        key = self.subj.s1_key(protocol, mode, spec)
        meta = self._valid(path, key)
        if meta is not None and not spec.overwrite:
            return _record_from_meta(path, meta)
        pp_path = self._pp_path(protocol, mode)
        pp_meta = self._require(pp_path, self.subj.pp_key(protocol, mode), "PP")
        state = load_checkpoint(pp_path, self.subj.tissue.ops.n)
        t0 = state.time
        t_last = t0 + (spec.s1_cycles - 1) * pcl
        stimuli = [self._stim(protocol, t0 + k * pcl) for k in range(spec.s1_cycles)]
        log.info("%s: S1 %s, %d cycles, stop at +%g ms", self.subj.name, protocol.name,
                 spec.s1_cycles, cmin)
        run = self.subj.tissue.run(state, stimuli, t_last + cmin, record=self._record_opts())
        self.simulations += 1
        self._write_outputs("S1", _task_id(protocol.name), run)
        return self._publish(run.state, path, {
            "stage": "S1", "protocol": protocol.name, "electrode": protocol.electrode,
            "pcl": pcl, "ci": None, "timestamp": cmin, "key": key, "t_last_s1": t_last,
            "upstream": pp_path.name, "upstream_key": pp_meta["key"]})

    # S2 ------------------------------------------------------------------------------
    def _s1_path(self, protocol, ci):
        return self.subj.checkpoints / checkpoint_name("S1", protocol.name, protocol.electrode,
                                                       self.subj.meshname, protocol.bcl, t=ci)

    def _s2_path(self, protocol, ci):
        _, end = s2_train(ci, self.spec.s2_cycles, self.spec.decrement_s2)
        return self.subj.checkpoints / checkpoint_name("S2", protocol.name, protocol.electrode,
                                                       self.subj.meshname, protocol.bcl, ci, end)

    def _coast(self, protocol, mode, s1_meta):
        """Materialize pre-stimulus S1-named checkpoints at every CI above the minimum."""
        spec = self.spec
        cis = spec.ci_array
        records = []
        start_path, start_ci = self._s1_path(protocol, cis[0]), cis[0]
        todo = []
        for c in cis[1:]:
            p = self._s1_path(protocol, c)
            meta = self._valid(p, self.subj.coast_key(protocol, mode, spec, c))
            if meta is not None and not spec.overwrite:
                records.append(_record_from_meta(p, meta))
                if not todo:
                    start_path, start_ci = p, c
            else:
                todo.append(c)
        if not todo:
            return records, False
        state = load_checkpoint(start_path, self.subj.tissue.ops.n)
        t_last = s1_meta["t_last_s1"]
        for c in cis:
            if c <= start_ci:
                continue
            run = self.subj.tissue.run(state, (), t_last + c, record=RecordOptions(lat=False))
            state = run.state
            if c in todo:
                records.append(self._publish(state, self._s1_path(protocol, c), {
                    "stage": "S1", "protocol": protocol.name, "electrode": protocol.electrode,
                    "pcl": protocol.bcl, "ci": None, "timestamp": c,
                    "key": self.subj.coast_key(protocol, mode, spec, c), "t_last_s1": t_last,
                    "coasted_from": start_path.name}))
        return records, True

    def s2(self, protocol) -> list:
        mode = self._upstream_mode(protocol)
        spec = self.spec
        s1_path = self._s1_path(protocol, spec.ci_array[0])
        s1_meta = self._require(s1_path, self.subj.s1_key(protocol, mode, spec), "S1")
        records, coasted, max_simulated = [], False, False
        for c in reversed(spec.ci_array):  # largest interval first: it generates the others
            path = self._s2_path(protocol, c)
            key = self.subj.s2_key(protocol, mode, spec, c)
            if c == spec.ci_array[-1] and len(spec.ci_array) > 1:
                coast_records, coasted = self._coast(protocol, mode, s1_meta)
                records.extend(coast_records)
            meta = self._valid(path, key)
            if meta is not None and not spec.overwrite:
                records.append(_record_from_meta(path, meta))
                continue
            start = self._s1_path(protocol, c)
            key_start = (self.subj.s1_key(protocol, mode, spec) if c == spec.ci_array[0]
                         else self.subj.coast_key(protocol, mode, spec, c))
            self._require(start, key_start, "S1")
            state = load_checkpoint(start, self.subj.tissue.ops.n)
            t_last = s1_meta["t_last_s1"]
            onsets, end = s2_train(c, spec.s2_cycles, spec.decrement_s2)
            stimuli = [self._stim(protocol, t_last + o) for o in onsets]
            log.info("%s: S2 %s CI %g, onsets %s", self.subj.name, protocol.name, c, onsets)
            run = self.subj.tissue.run(state, stimuli, t_last + end, record=self._record_opts())
            self.simulations += 1
            max_simulated = max_simulated or c == spec.ci_array[-1]
            self._write_outputs("S2", _task_id(protocol.name, c), run)
            records.append(self._publish(run.state, path, {
                "stage": "S2", "protocol": protocol.name, "electrode": protocol.electrode,
                "pcl": protocol.bcl, "ci": c, "timestamp": end, "key": key,
                "onsets": onsets, "wait_rule": "last_interval", "t_last_s1": t_last,
                "upstream": start.name}))
        if coasted and not max_simulated:
            self.simulations += 1  # coasting alone still ran part of the largest-interval task
        return records

    # MT ------------------------------------------------------------------------------
    def _mt_prefix(self, protocol, ci):
        name = checkpoint_name("MT", protocol.name, protocol.electrode, self.subj.meshname,
                               protocol.bcl, ci, 0.0)
        return name[:name.rindex("_tstamp_") + len("_tstamp_")]

    def mt(self, protocol) -> list:
        mode = self._upstream_mode(protocol)
        spec, s = self.spec, self.subj.setup
        records = []
        for c in spec.ci_array:
            key = self.subj.mt_key(protocol, mode, spec, c)
            prefix = self._mt_prefix(protocol, c)
            existing = sorted(self.subj.checkpoints.glob(prefix + "*.roe"))
            hit = None
            for p in existing:
                meta = self._valid(p, key)
                if meta is not None:
                    hit = _record_from_meta(p, meta)
            if hit is not None and not spec.overwrite:
                records.append(hit)
                continue
            s2_path = self._s2_path(protocol, c)
            self._require(s2_path, self.subj.s2_key(protocol, mode, spec, c), "S2")
            state = load_checkpoint(s2_path, self.subj.tissue.ops.n)
            sentinel = SentinelConfig(s.upstroke_threshold, s.quiescence_window, s.poll_interval)
            log.info("%s: MT %s CI %g, up to %g ms", self.subj.name, protocol.name, c,
                     spec.mt_duration)
            run = self.subj.tissue.run(state, (), state.time + spec.mt_duration, sentinel,
                                       record=self._record_opts())
            self.simulations += 1
            duration = run.exit_time - state.time
            for p in existing:  # stale results of other configurations
                p.unlink(missing_ok=True)
                meta_path(p).unlink(missing_ok=True)
            path = self.subj.checkpoints / (prefix + f"{duration:.3f}.roe")
            self._write_outputs("MT", _task_id(protocol.name, c), run)
            records.append(self._publish(run.state, path, {
                "stage": "MT", "protocol": protocol.name, "electrode": protocol.electrode,
                "pcl": protocol.bcl, "ci": c, "timestamp": duration, "key": key,
                "terminated_by": run.terminated_by, "upstream": s2_path.name}))
        return records

    def run_stage(self, stage, protocol):
        out = {"PP": self.pp, "S1": self.s1, "S2": self.s2, "MT": self.mt}[stage](protocol)
        return out if isinstance(out, list) else [out]


# -- public stage entry points ------------------------------------------------------

def _subject(spec, subject):
    if isinstance(subject, Subject):
        return subject
    d = Path(subject)
    if not d.is_absolute() and not d.exists():
        d = spec.cohort_dir / d
    return Subject(spec, d)


def _run_stage(spec, subject, stage):
    runner = StageRunner(spec, _subject(spec, subject))
    records = []
    for p in spec.protocols:
        records.extend(runner.run_stage(stage, p))
    return records


def run_stage_pp(spec, subject):
    return _run_stage(spec, subject, "PP")


def run_stage_s1(spec, subject):
    return _run_stage(spec, subject, "S1")


def run_stage_s2(spec, subject):
    return _run_stage(spec, subject, "S2")


def run_stage_mt(spec, subject):
    return _run_stage(spec, subject, "MT")


# -- tuning ---------------------------------------------------------------------

def tune_subject(spec: StudySpec, subject: Subject) -> Plan:
    """Tune every used function at the subject's resolution and write results to the plan file.

    Functions whose measured velocities already sit within tolerance of the
    reference are left alone, so repeated runs do not re-simulate.
    """
    plan = spec.plan
    used = set(subject.partition.groups) - {"scar"}
    changed = False
    for name in sorted(used):
        f = subject.functions[name]
        if f.reference is None:
            continue
        m = f.measured
        if m is not None and all(
                getattr(m, a) is not None
                and abs(getattr(m, a) - getattr(f.reference, a)) / getattr(f.reference, a) < TUNING_TOL
                for a in ("vf", "vs", "vn")):
            continue
        log.info("%s: tuning conductivities of %s at %.3f mm", subject.name, name,
                 subject.resolution)
        res = tune_conductivities(f, subject.resolution, TUNING_TOL, TUNING_MAX_ITER,
                                  dt=subject.setup.dt)
        if spec.plan_path is not None:
            write_measured_velocities(spec.plan_path, name, res.function.measured,
                                      conductivity=res.function.conductivity)
        funcs = dict(plan.functions)
        funcs[name] = res.function
        plan = replace(plan, functions=funcs)
        changed = True
    if changed and spec.plan_path is not None:
        plan = replace(load_plan(spec.plan_path), protocols=plan.protocols)
    return plan


# -- task planning ----------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    subject: str
    stage: str
    protocol: str
    ci: float | None
    depends_on: tuple
    execute: bool = True

    @property
    def task_id(self) -> str:
        return f"{self.subject}/{self.stage}/{_task_id(self.protocol, self.ci)}"


def plan_execution(spec: StudySpec, subjects=None) -> list:
    """Ordered task list: subject, then stage, then protocol, then CI (largest first)."""
    names = subjects if subjects is not None else [d.name for d in list_subjects(spec)]
    tasks = []
    for subj in names:
        for stage in spec.stages:
            execute = stage in spec.executed_stages
            for p in spec.protocols:
                pid = lambda st, ci=None: f"{subj}/{st}/{_task_id(p.name, ci)}"
                if stage == "PP":
                    tasks.append(Task(subj, stage, p.name, None, (), execute))
                elif stage == "S1":
                    tasks.append(Task(subj, stage, p.name, None, (pid("PP"),), execute))
                elif stage == "S2":
                    cmax = spec.ci_array[-1]
                    for c in reversed(spec.ci_array):
                        deps = (pid("S1"),) if c == cmax else (pid("S1"), pid("S2", cmax))
                        tasks.append(Task(subj, stage, p.name, c, deps, execute))
                else:
                    for c in reversed(spec.ci_array):
                        tasks.append(Task(subj, stage, p.name, c, (pid("S2", c),), execute))
    return tasks


def task_counts(tasks) -> dict:
    out = {s: 0 for s in STAGES}
    for t in tasks:
        out[t.stage] += 1
    return out


# -- parameter files -----------------------------------------------------------------

def _solver_section(plan):
    return plan_to_dict(plan)["solver_setup"]


def task_parameters(spec: StudySpec, subject: Subject, task: Task) -> dict:
    """Self-contained description of one task (no simulation needed)."""
    p = next(q for q in spec.protocols if q.name == task.protocol)
    mode = spec.mode
    setup = subject.setup
    pcl = p.bcl
    t_pp = pcl if mode.lim_cyc == "lat-1" else 0.0
    t_last = t_pp + (spec.s1_cycles - 1) * pcl
    el = subject.electrode(p.electrode)
    stim = lambda onset: {"onset": onset, "duration": setup.stimulus_duration,
                          "strength": subject.strength}
    ck = lambda name: f"checkpoints/{name}"
    runner = StageRunner(spec, subject)
    sentinel = None
    if task.stage == "PP":
        stimuli = [stim(0.0)] if mode.lim_cyc == "lat-1" else []
        restart, t0, t1 = None, 0.0, t_pp
        out = ck(runner._pp_path(p, mode).name)
    elif task.stage == "S1":
        stimuli = [stim(t_pp + k * pcl) for k in range(spec.s1_cycles)]
        restart, t0, t1 = ck(runner._pp_path(p, mode).name), t_pp, t_last + spec.ci_array[0]
        out = ck(runner._s1_path(p, spec.ci_array[0]).name)
    elif task.stage == "S2":
        onsets, end = s2_train(task.ci, spec.s2_cycles, spec.decrement_s2)
        stimuli = [stim(t_last + o) for o in onsets]
        restart = ck(runner._s1_path(p, task.ci).name)
        t0, t1 = t_last + task.ci, t_last + end
        out = ck(runner._s2_path(p, task.ci).name)
    else:
        _, end = s2_train(task.ci, spec.s2_cycles, spec.decrement_s2)
        stimuli = []
        restart = ck(runner._s2_path(p, task.ci).name)
        t0, t1 = t_last + end, t_last + end + spec.mt_duration
        out = ck(runner._mt_prefix(p, task.ci) + "{exit_time:.3f}.roe")
        sentinel = {"upstroke_threshold": setup.upstroke_threshold,
                    "quiescence_window": setup.quiescence_window,
                    "poll_interval": setup.poll_interval}
    d = {"task": task.task_id, "subject": subject.name, "stage": task.stage,
         "protocol": p.name, "electrode": p.electrode, "electrode_nodes": el.ids.tolist(),
         "pcl": pcl, "ci": task.ci, "prepace": _mode_dict(mode),
         "solver_setup": _solver_section(subject.plan), "stimuli": stimuli,
         "t_start": t0, "t_end": t1, "sentinel": sentinel, "restart": restart,
         "outputs": {"checkpoint": out,
                     "sim_dir": f"sim_outputs/{subject.name}/{task.stage}/"
                                f"{_task_id(p.name, task.ci)}"},
         "depends_on": list(task.depends_on)}
    if task.stage == "S2" and len(spec.ci_array) > 1 and task.ci == spec.ci_array[-1]:
        d["coast_checkpoints"] = [ck(runner._s1_path(p, c).name) for c in spec.ci_array[1:]]
    if task.stage == "PP":
        d["lat_file"] = ck(lat_name(p.name, mode.gen_lat, p.electrode))
    return d


def gen_param_files(spec: StudySpec) -> list:
    """Write one JSON parameter file per task plus ``manifest.json`` per subject."""
    written = []
    tasks = plan_execution(spec)
    for d in list_subjects(spec):
        subject = Subject(spec, d)
        out = spec.output_root / "param_files" / subject.name
        out.mkdir(parents=True, exist_ok=True)
        order = []
        for i, t in enumerate(x for x in tasks if x.subject == subject.name):
            fname = f"{i:04d}_{t.stage}_{_task_id(t.protocol, t.ci)}.json"
            atomic_write_text(out / fname, dumps(task_parameters(spec, subject, t)))
            order.append({"file": fname, "task": t.task_id, "depends_on": list(t.depends_on)})
            written.append(out / fname)
        atomic_write_text(out / "manifest.json", dumps({
            "subject": subject.name, "command": spec.command(), "order": order}))
        written.append(out / "manifest.json")
    return written


# -- study driver --------------------------------------------------------------------

@dataclass
class StudyReport:
    records: list = field(default_factory=list)
    simulations: int = 0
    failures: list = field(default_factory=list)  # (subject, message)
    tasks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _run_chain(spec, subject_dir, protocol_name):
    """All executed stages of one protocol; used by worker processes."""
    subj = Subject(spec, subject_dir)
    runner = StageRunner(spec, subj)
    p = next(q for q in spec.protocols if q.name == protocol_name)
    records = []
    for stage in spec.executed_stages:
        records.extend(runner.run_stage(stage, p))
    return records, runner.simulations


def run_subject(spec: StudySpec, subject_dir) -> tuple:
    subj = Subject(spec, subject_dir)
    if spec.tissue_tuning and "PP" in spec.executed_stages:
        plan = tune_subject(spec, subj)
        if plan is not spec.plan:
            spec = replace(spec, plan=plan)
            subj = Subject(spec, subject_dir)
    records, sims = [], 0
    if spec.workers > 1 and len(spec.protocols) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futs = [pool.submit(_run_chain, spec, subject_dir, p.name) for p in spec.protocols]
            for f in futs:
                r, n = f.result()
                records.extend(r)
                sims += n
        return records, sims, spec
    runner = StageRunner(spec, subj)
    for stage in spec.executed_stages:
        for p in spec.protocols:
            records.extend(runner.run_stage(stage, p))
    return records, runner.simulations, spec


def run_study(spec: StudySpec) -> StudyReport:
    """Run the requested stages for every subject; one subject's failure does not stop the others."""
    report = StudyReport()
    subjects = list_subjects(spec)
    report.tasks = plan_execution(spec, [d.name for d in subjects])
    for d in subjects:
        try:
            records, sims, spec = run_subject(spec, d)
        except (AutoVarpError, OSError, ValueError) as exc:
            log.error("subject %s failed: %s", d.name, exc)
            report.failures.append((d.name, f"{type(exc).__name__}: {exc}"))
            continue
        report.records.extend(records)
        report.simulations += sims
    return report
