"""Outcome classification, status tables, frame export and reproducibility bundles.

Everything here reads the checkpoint directories and simulation outputs;
nothing triggers a simulation.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (STAGES, StageRunner, StudySpec, Subject, _task_id, display_label, lat_name,
                     list_subjects, meta_path, parse_checkpoint_name)
from .errors import MissingData
from .mesh import SIMPLEX_SPLIT, geometry_files
from .plan import atomic_write_text, dumps
from .tissue import read_vm_series

NON_INDUCIBLE, NON_SUSTAINED, SUSTAINED = "non_inducible", "non_sustained", "sustained"
OUTCOME_ORDER = (NON_INDUCIBLE, NON_SUSTAINED, SUSTAINED)
QUIESCENCE_EPS = 5.0  # ms of slack above the quiescence window
STATUS_HEADER = ["protocol", "gen-lat", "lim-cycle", "S1", "S2", "MT", "sustained_tally"]


# -- classification ------------------------------------------------------------------

def classify_outcome(mt_exit, mt_threshold=1000.0, quiescence_window=150.0,
                     eps=QUIESCENCE_EPS) -> str:
    if mt_exit < 0:
        raise ValueError(f"MT exit time must be >= 0, got {mt_exit}")
    if mt_exit >= mt_threshold:
        return SUSTAINED
    if mt_exit <= quiescence_window + eps:
        return NON_INDUCIBLE
    return NON_SUSTAINED


@dataclass(frozen=True)
class OutcomeRecord:
    subject: str
    protocol: str
    electrode: str
    pcl: float
    ci: float
    mt_exit: float
    outcome: str

    @property
    def sustained(self) -> bool:
        """Two-class view: sustained iff the MT run reached the threshold."""
        return self.outcome == SUSTAINED


# -- status ------------------------------------------------------------------------

@dataclass
class StatusRow:
    label: str
    gen_lat: str = ""
    lim_cycle: str = ""
    s1: str = ""
    s2: str = ""
    mt: str = ""
    tally: str = ""

    def cells(self):
        return [self.label, self.gen_lat, self.lim_cycle, self.s1, self.s2, self.mt, self.tally]


@dataclass
class SubjectStatus:
    subject: str
    rows: list
    outcomes: list

    def render(self) -> str:
        """Plain-text table in the compact label style."""
        lines = [f"subject {self.subject}"]
        for r in self.rows:
            mt = "/".join(x for x in (r.mt, r.tally) if x)
            lines.append(f"{r.label}:  " + "  ".join(
                c if c else "-" for c in (r.gen_lat, r.lim_cycle, r.s1, r.s2, mt)))
        return "\n".join(lines)


def _scan(checkpoints: Path, meshname: str):
    """Parsed checkpoint names present in a directory, grouped by stage."""
    found = {s: [] for s in STAGES}
    if not checkpoints.is_dir():
        return found
    for p in sorted(checkpoints.glob("*.roe")):
        parsed = parse_checkpoint_name(p.name)
        if parsed is None:
            continue
        stage, d = parsed
        if d.get("mesh") != meshname and stage != "PP":
            continue
        found[stage].append((p, d))
    return found


def subject_status(spec: StudySpec, subject_dir, mt_threshold=1000.0) -> SubjectStatus:
    subject_dir = Path(subject_dir)
    name = subject_dir.name
    ck = subject_dir / "checkpoints"
    found = _scan(ck, name)
    window = spec.plan.solver_setup.quiescence_window
    rows, outcomes = [], []
    for p in spec.protocols:
        row = StatusRow(f"{p.name},{p.electrode}")
        pcl = p.bcl
        if any(ck.glob(lat_name(p.name, "*", p.electrode))):
            row.gen_lat = "gen-lat"
        if any(ck.glob(f"{p.name}_{name}_pp_lat-*_bcl_{pcl:.1f}_tstamp_*.roe")):
            row.lim_cycle = display_label("PP", pcl)
        same = lambda d: d["electrode"] == p.electrode and abs(d["pcl"] - pcl) < 1e-9
        s1 = sorted(d["t"] for _, d in found["S1"] if same(d))
        row.s1 = "/".join(display_label("S1", pcl, t=t) for t in s1)
        s2 = sorted((d["ci"], d["t"]) for _, d in found["S2"] if same(d))
        row.s2 = "/".join(display_label("S2", pcl, ci, t) for ci, t in s2)
        mt = sorted((d["ci"], d["t"]) for _, d in found["MT"] if same(d))
        row.mt = "/".join(display_label("MT", pcl, ci, t) for ci, t in mt)
        if mt:
            k = sum(t >= mt_threshold for _, t in mt)
            row.tally = f"over {mt_threshold:g} msec: {k}/{len(mt)}"
        for ci, t in mt:
            outcomes.append(OutcomeRecord(name, p.name, p.electrode, pcl, ci, t,
                                          classify_outcome(t, mt_threshold, window)))
        rows.append(row)
    return SubjectStatus(name, rows, outcomes)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, buf.getvalue())


def status(spec: StudySpec, mt_threshold=1000.0) -> list:
    """Status tables for every subject, written to ``status_tables/`` under the output root."""
    out_dir = spec.output_root / "status_tables"
    tables = []
    for d in list_subjects(spec):
        st = subject_status(spec, d, mt_threshold)
        tables.append(st)
        _write_csv(out_dir / f"{st.subject}.csv", STATUS_HEADER, [r.cells() for r in st.rows])
        _write_csv(out_dir / f"{st.subject}_outcomes.csv",
                   ["subject", "protocol", "electrode", "pcl", "ci", "mt_exit", "class", "sustained"],
                   [[o.subject, o.protocol, o.electrode, f"{o.pcl:g}", f"{o.ci:g}",
                     f"{o.mt_exit:.3f}", o.outcome, int(o.sustained)] for o in st.outcomes])
    if tables:
        write_cohort_summary(tables, spec, out_dir)
    return tables


def cohort_grid(tables, spec: StudySpec):
    """Subjects x electrodes grid holding the most severe outcome per cell ('' = not run)."""
    electrodes = [p.electrode for p in spec.protocols]
    grid = []
    for st in tables:
        row = []
        for el in electrodes:
            cls = [o.outcome for o in st.outcomes if o.electrode == el]
            row.append(max(cls, key=OUTCOME_ORDER.index) if cls else "")
        grid.append(row)
    return electrodes, grid


def write_cohort_summary(tables, spec, out_dir):
    electrodes, grid = cohort_grid(tables, spec)
    _write_csv(out_dir / "cohort_summary.csv", ["subject"] + electrodes,
               [[st.subject] + row for st, row in zip(tables, grid)])
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    code = {"": 0, NON_INDUCIBLE: 1, NON_SUSTAINED: 2, SUSTAINED: 3}
    z = np.array([[code[c] for c in row] for row in grid])
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(electrodes), 1 + 0.35 * len(tables)))
    cmap = matplotlib.colors.ListedColormap(["white", "#dddddd", "#f4a582", "#b2182b"])
    ax.imshow(z, cmap=cmap, vmin=0, vmax=3, aspect="auto")
    ax.set_xticks(range(len(electrodes)), electrodes, rotation=90, fontsize=7)
    ax.set_yticks(range(len(tables)), [st.subject for st in tables], fontsize=7)
    ax.set_title("sustained reentry (red)", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "cohort_summary.png", dpi=100)
    plt.close(fig)


# -- frame export --------------------------------------------------------------------

DEFAULT_SCENE = {"vmin": -85.0, "vmax": 30.0, "cmap": "viridis", "stride": 1, "dpi": 80,
                 "camera": {"elev": 30.0, "azim": -60.0}}
SCENE_FILE = "scene.json"


def load_scene(subject_dir) -> dict:
    scene = json.loads(json.dumps(DEFAULT_SCENE))
    p = Path(subject_dir) / SCENE_FILE
    if p.exists():
        scene.update(json.loads(p.read_text()))
    return scene


def task_series_dirs(spec: StudySpec, subject: str, protocol: str, ci: float):
    base = spec.output_root / "sim_outputs" / subject
    return [("PP", base / "PP" / _task_id(protocol)), ("S1", base / "S1" / _task_id(protocol)),
            ("S2", base / "S2" / _task_id(protocol, ci)), ("MT", base / "MT" / _task_id(protocol, ci))]


def stitched_series(spec, subject, protocol, ci):
    """Concatenate the PP, S1, S2 and MT snapshot series of one task."""
    times, frames, stages = [], [], []
    for stage, d in task_series_dirs(spec, subject, protocol, ci):
        f = d / "vm.bin"
        if not f.exists():
            raise MissingData(stage, f"{f} not found")
        t, fr = read_vm_series(f)
        for ti, x in zip(t, fr):
            if times and ti <= times[-1] + 1e-9:
                continue  # the first frame of a stage repeats the last of the previous one
            times.append(float(ti))
            frames.append(x)
            stages.append(stage)
    return times, frames, stages


def _triangles(mesh):
    tris = []
    for kind, ids, conn in mesh.blocks():
        if kind in ("triangle", "quad"):
            for local in SIMPLEX_SPLIT[kind]:
                tris.append(conn[:, list(local)])
    return np.concatenate(tris) if tris else None


def export_frames(spec: StudySpec, subject_dir, protocol: str, ci: float, out_dir=None,
                  scene=None) -> Path:
    """PNG per frame plus ``frames_manifest.json``; returns the manifest path."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    subject_dir = Path(subject_dir)
    subj = Subject(spec, subject_dir)
    times, frames, stages = stitched_series(spec, subj.name, protocol, ci)
    scene = scene or load_scene(subject_dir)
    out_dir = Path(out_dir or spec.output_root / "sim_outputs" / subj.name / "frames"
                   / _task_id(protocol, ci))
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = subj.mesh
    pts = mesh.points
    planar = np.ptp(pts[:, 2]) < 1e-9
    tris = _triangles(mesh) if planar else None
    entries = []
    stride = max(1, int(scene["stride"]))
    for k in range(0, len(frames), stride):
        v = np.asarray(frames[k], dtype=float)
        fig = plt.figure(figsize=(4, 4))
        if tris is not None:
            ax = fig.add_subplot(111)
            ok = np.all(np.isfinite(v[tris]), axis=1)
            ax.tripcolor(pts[:, 0], pts[:, 1], np.nan_to_num(v, nan=scene["vmin"]), triangles=tris,
                         mask=~ok, cmap=scene["cmap"], vmin=scene["vmin"], vmax=scene["vmax"],
                         shading="gouraud")
            ax.set_aspect("equal")
            ax.set_axis_off()
        else:
            ax = fig.add_subplot(111, projection="3d")
            ok = np.isfinite(v)
            ax.scatter(pts[ok, 0], pts[ok, 1], pts[ok, 2], c=v[ok], s=1, cmap=scene["cmap"],
                       vmin=scene["vmin"], vmax=scene["vmax"])
            ax.view_init(scene["camera"]["elev"], scene["camera"]["azim"])
            ax.set_axis_off()
        ax.set_title(f"{stages[k]}  t = {times[k]:.1f} ms", fontsize=8)
        name = f"frame_{len(entries):05d}.png"
        fig.savefig(out_dir / name, dpi=scene["dpi"])
        plt.close(fig)
        entries.append({"file": name, "time": times[k], "stage": stages[k]})
    manifest = out_dir / "frames_manifest.json"
    atomic_write_text(manifest, dumps({"subject": subj.name, "protocol": protocol, "ci": ci,
                                       "scene": scene, "frames": entries}))
    return manifest


def export_all_frames(spec: StudySpec) -> list:
    out = []
    for d in list_subjects(spec):
        for p in spec.protocols:
            for ci in spec.ci_array:
                out.append(export_frames(spec, d, p.name, ci))
    return out


# -- bundles --------------------------------------------------------------------------

LICENSE_TEXT = """\
This bundle is distributed under the Creative Commons Attribution 4.0
International license (CC BY 4.0).  You may share and adapt the material for
any purpose provided appropriate credit is given.
Full text: https://creativecommons.org/licenses/by/4.0/legalcode
"""
_ZIP_TIME = (2000, 1, 1, 0, 0, 0)  # fixed so identical inputs give identical archives


def _zinfo(name):
    info = zipfile.ZipInfo(name, _ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    return info


def _restart_files(spec: StudySpec, subj: Subject, stage: str) -> list:
    """Checkpoints (with sidecars) needed to run ``stage`` from scratch."""
    runner = StageRunner(spec, subj)
    mode = spec.mode
    files = []
    for p in spec.protocols:
        if stage == "S1":
            files.append(runner._pp_path(p, mode))
            files.append(subj.checkpoints / lat_name(p.name, mode.gen_lat, p.electrode))
        elif stage == "S2":
            files += [runner._s1_path(p, ci) for ci in spec.ci_array[:1]]
        elif stage == "MT":
            files += [runner._s2_path(p, ci) for ci in spec.ci_array]
    out = []
    for f in files:
        out.append(f)
        if f.suffix == ".roe":
            out.append(meta_path(f))
    return out


def bundle_command(spec: StudySpec, subject: str, stage: str) -> list:
    rel = replace(spec, plan_path=Path("planfile.json"), cohort_dir=Path("cohort"),
                  protocols_path=Path("varp_protocols.json") if spec.protocols_path else None,
                  case_id=subject, stage=stage, run_upstream=stage == "PP", root=None)
    return rel.command()


def bundle(spec: StudySpec, stage=None, out_dir=None) -> list:
    """One zip per subject with everything needed to rerun ``stage``."""
    stage = stage or spec.stage
    out_dir = Path(out_dir or spec.output_root / "bundles")
    out_dir.mkdir(parents=True, exist_ok=True)
    archives = []
    for d in list_subjects(spec):
        subj = Subject(spec, d)
        members = {}
        if spec.plan_path is None:
            raise OSError("bundling needs the plan file path")
        members["planfile.json"] = Path(spec.plan_path)
        if spec.protocols_path is not None:
            members["varp_protocols.json"] = Path(spec.protocols_path)
        for f in geometry_files(d):
            members[f"cohort/{subj.name}/{f.name}"] = f
        for name in (spec.electrodes_file, spec.configurations_file, "scene.json"):
            if name and (d / name).exists():
                members[f"cohort/{subj.name}/{name}"] = d / name
        restart = _restart_files(spec, subj, stage)
        missing = [str(f) for f in restart if not f.exists()]
        if missing:
            raise FileNotFoundError(f"cannot bundle stage {stage} of {subj.name}; missing "
                                    f"checkpoints: {', '.join(missing)}")
        for f in restart:
            members[f"cohort/{subj.name}/checkpoints/{f.name}"] = f
        command = bundle_command(spec, subj.name, stage)
        hashes = {}
        archive = out_dir / f"{subj.name}_{stage}.zip"
        tmp = archive.with_name(archive.name + ".tmp")
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for arc in sorted(members):
                data = members[arc].read_bytes()
                hashes[arc] = hashlib.sha256(data).hexdigest()
                zf.writestr(_zinfo(arc), data)
            extra = {"LICENSE": LICENSE_TEXT, "COMMAND.txt": " ".join(command) + "\n"}
            for arc, text in extra.items():
                hashes[arc] = hashlib.sha256(text.encode()).hexdigest()
                zf.writestr(_zinfo(arc), text)
            manifest = {"tool": "autovarp", "version": __version__, "subject": subj.name,
                        "stage": stage, "spec_hash": spec.spec_hash(), "command": command,
                        "files": hashes}
            zf.writestr(_zinfo("MANIFEST.json"), dumps(manifest))
        tmp.replace(archive)
        archives.append(archive)
    return archives
