"""Experiment definition files: plan, protocols, electrodes, configurations.

Layout follows the forCEPSS-style plan used by auto-VARP: each top-level
section carries ``"version": 2`` and a ``"definitions"`` map (protocols use
``"prepacing"``).  Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParseError, PlanReferenceError, SchemaError, UnknownFunction

PLAN_VERSION = 2
SCAR = "scar"

_MISSING = object()


# -- small validation helpers --------------------------------------------------

def _obj(d, path):
    if not isinstance(d, dict):
        raise SchemaError(path, f"expected an object, got {type(d).__name__}")
    return d


def _keys(d, path, required=(), optional=()):
    _obj(d, path)
    allowed = set(required) | set(optional)
    extra = sorted(set(d) - allowed)
    if extra:
        raise SchemaError(f"{path}.{extra[0]}", "unknown key")
    for k in required:
        if k not in d:
            raise SchemaError(f"{path}.{k}", "missing required field")


def _num(d, key, path, positive=True, nullable=False, default=_MISSING):
    if key not in d:
        if default is not _MISSING:
            return default
        raise SchemaError(f"{path}.{key}", "missing required field")
    v = d[key]
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{path}.{key}", f"expected a number, got {v!r}")
    if positive and not v > 0:
        raise SchemaError(f"{path}.{key}", f"must be > 0, got {v}")
    return float(v)


def _int(d, key, path, minimum=None, default=_MISSING):
    if key not in d:
        if default is not _MISSING:
            return default
        raise SchemaError(f"{path}.{key}", "missing required field")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"{path}.{key}", f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise SchemaError(f"{path}.{key}", f"must be >= {minimum}, got {v}")
    return v


def _str(d, key, path, choices=None, nullable=False, default=_MISSING):
    if key not in d:
        if default is not _MISSING:
            return default
        raise SchemaError(f"{path}.{key}", "missing required field")
    v = d[key]
    if v is None and nullable:
        return None
    if not isinstance(v, str):
        raise SchemaError(f"{path}.{key}", f"expected a string, got {v!r}")
    if choices is not None and v not in choices:
        raise SchemaError(f"{path}.{key}", f"must be one of {sorted(choices)}, got {v!r}")
    return v


def _version(section, path):
    v = section.get("version", _MISSING)
    if v is _MISSING:
        raise SchemaError(f"{path}.version", "missing required field")
    if v != PLAN_VERSION:
        raise SchemaError(f"{path}.version", f"version mismatch: expected {PLAN_VERSION}, got {v!r}")


# -- domain types --------------------------------------------------------------

@dataclass(frozen=True)
class Velocities:
    vf: float | None
    vs: float | None
    vn: float | None

    def as_dict(self):
        return {"vf": self.vf, "vs": self.vs, "vn": self.vn}

    def axis(self, name):
        return {"fiber": self.vf, "sheet": self.vs, "normal": self.vn}[name]


@dataclass(frozen=True)
class Conductivity:
    gil: float
    gel: float
    git: float
    get: float
    gin: float
    gen: float
    surf2vol: float  # 1/um

    def as_dict(self):
        return {k: getattr(self, k) for k in ("gil", "gel", "git", "get", "gin", "gen", "surf2vol")}

    def pair(self, axis):
        return {"fiber": (self.gil, self.gel), "sheet": (self.git, self.get),
                "normal": (self.gin, self.gen)}[axis]

    def scaled(self, factors):
        """Scale the (gi, ge) pair of each axis by ``factors[axis]``."""
        f = {"fiber": 1.0, "sheet": 1.0, "normal": 1.0}
        f.update(factors)
        return replace(self, gil=self.gil * f["fiber"], gel=self.gel * f["fiber"],
                       git=self.git * f["sheet"], get=self.get * f["sheet"],
                       gin=self.gin * f["normal"], gen=self.gen * f["normal"])


@dataclass(frozen=True)
class Initialization:
    num_cycles: int
    bcl: float
    init: str | None = None
    apdres_file: str | None = None
    apdres_protocol: str | None = None


@dataclass(frozen=True)
class FunctionDef:
    name: str
    model: str | None
    model_par: object = None
    plugins: object = None
    plugins_par: object = None
    initialization: Initialization | None = None
    conductivity: Conductivity | None = None
    reference: Velocities | None = None
    measured: Velocities | None = None

    @property
    def is_scar(self) -> bool:
        return self.model is None

    @property
    def target_velocities(self) -> Velocities:
        """Measured CVs when available, reference otherwise (per axis)."""
        r, m = self.reference, self.measured
        pick = lambda a: getattr(m, a) if m is not None and getattr(m, a) is not None else getattr(r, a)
        return Velocities(pick("vf"), pick("vs"), pick("vn"))


@dataclass(frozen=True)
class ProtocolDef:
    name: str
    propagation: str
    num_cycles: int
    bcl: float
    electrode: str
    rel_timings: object = None
    lat_file: object = None
    restart: object = None


@dataclass(frozen=True)
class ElectrodeDef:
    name: str
    kind: str
    center: tuple | None = None
    radius: float | None = None
    nodes: tuple | None = None
    p0: tuple | None = None
    cavity: str | None = None
    searchdom: str | None = None


@dataclass(frozen=True)
class ConfigurationDef:
    name: str
    tags: tuple
    func: str


@dataclass(frozen=True)
class SolverSetup:
    dt: float = 0.05
    output_interval: float = 1.0
    diffusion_scheme: str = "implicit_euler"
    linear_solver: str = "cg"
    linear_tolerance: float = 1e-8
    stimulus_strength: float | None = None  # None -> engine default (40 uA/cm^2)
    stimulus_duration: float = 2.0
    upstroke_threshold: float = -20.0
    quiescence_window: float = 150.0
    poll_interval: float = 1.0


@dataclass(frozen=True)
class Plan:
    version: int
    functions: dict
    protocols: dict
    electrodes: dict
    configurations: dict
    solver_setup: SolverSetup

    @property
    def protocol_list(self):
        return list(self.protocols.values())

    @property
    def tissue_functions(self):
        return {k: f for k, f in self.functions.items() if not f.is_scar}


# -- parsing ---------------------------------------------------------------------

def _parse_velocities(d, path, nullable):
    _keys(d, path, required=("vf", "vs", "vn"))
    return Velocities(*(_num(d, k, path, nullable=nullable) for k in ("vf", "vs", "vn")))


def _parse_function(name, d, path):
    _obj(d, path)
    if name == SCAR:
        _keys(d, path, optional=("description",))
        return FunctionDef(name=name, model=None)
    _keys(d, path, required=(name, "conductivity", "conduction_velocity"))
    ep_path = f"{path}.{name}"
    ep = d[name]
    _keys(ep, ep_path, required=("model", "initialization"),
          optional=("model_par", "plugins", "plugins_par"))
    model = _str(ep, "model", ep_path)
    mp = ep.get("model_par")
    if mp is not None and not isinstance(mp, (dict, str)):
        raise SchemaError(f"{ep_path}.model_par", "expected null, a string or an object")
    ip = f"{ep_path}.initialization"
    ini = ep["initialization"]
    _keys(ini, ip, required=("num_cycles", "bcl"),
          optional=("init", "apdres_file", "apdres_protocol"))
    init = Initialization(_int(ini, "num_cycles", ip, minimum=1), _num(ini, "bcl", ip),
                          _str(ini, "init", ip, nullable=True, default=None),
                          ini.get("apdres_file"), ini.get("apdres_protocol"))
    cp = f"{path}.conductivity"
    c = d["conductivity"]
    _keys(c, cp, required=("gil", "gel", "git", "get", "gin", "gen", "surf2vol"))
    cond = Conductivity(*(_num(c, k, cp) for k in ("gil", "gel", "git", "get", "gin", "gen", "surf2vol")))
    vp = f"{path}.conduction_velocity"
    v = d["conduction_velocity"]
    _keys(v, vp, required=("reference",), optional=("measured",))
    ref = _parse_velocities(v["reference"], f"{vp}.reference", nullable=False)
    meas = v.get("measured")
    meas = (Velocities(None, None, None) if meas is None
            else _parse_velocities(meas, f"{vp}.measured", nullable=True))
    return FunctionDef(name, model, _freeze(mp), _freeze(ep.get("plugins")),
                       _freeze(ep.get("plugins_par")), init, cond, ref, meas)


def _freeze(x):
    # dicts stay dicts; kept for round-trip only
    return copy.deepcopy(x)


def parse_functions(section, path="functions"):
    _keys(section, path, required=("version", "definitions"))
    _version(section, path)
    defs = _obj(section["definitions"], f"{path}.definitions")
    return {name: _parse_function(name, d, f"{path}.definitions.{name}") for name, d in defs.items()}


def _parse_protocol(name, d, path):
    _keys(d, path, required=("propagation", "num_cycles", "bcl", "electrodes"),
          optional=("rel_timings", "lat_file", "restart"))
    el = d["electrodes"]
    if isinstance(el, list):
        if len(el) != 1:
            raise SchemaError(f"{path}.electrodes", "exactly one electrode per protocol")
        el = el[0]
    if not isinstance(el, str):
        raise SchemaError(f"{path}.electrodes", f"expected an electrode name, got {el!r}")
    return ProtocolDef(name, _str(d, "propagation", path, choices={"rd", "ek"}),
                       _int(d, "num_cycles", path, minimum=1), _num(d, "bcl", path), el,
                       d.get("rel_timings"), d.get("lat_file"), d.get("restart"))


def parse_protocols(section, path="protocols"):
    _keys(section, path, required=("version", "prepacing"))
    _version(section, path)
    defs = _obj(section["prepacing"], f"{path}.prepacing")
    if not defs:
        raise SchemaError(f"{path}.prepacing", "no protocols defined")
    return {name: _parse_protocol(name, d, f"{path}.prepacing.{name}") for name, d in defs.items()}


def _vec(d, key, path, n):
    v = d.get(key)
    if (not isinstance(v, list) or len(v) != n
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
        raise SchemaError(f"{path}.{key}", f"expected a list of {n} numbers")
    return tuple(float(x) for x in v)


def _parse_electrode(name, d, path):
    _obj(d, path)
    kind = _str(d, "type", path, choices={"cartesian_sphere", "node_list", "ucc_sphere"})
    if kind == "cartesian_sphere":
        _keys(d, path, required=("type", "center", "radius"))
        return ElectrodeDef(name, kind, center=_vec(d, "center", path, 3),
                            radius=_num(d, "radius", path))
    if kind == "node_list":
        _keys(d, path, required=("type", "nodes"))
        nodes = d["nodes"]
        if (not isinstance(nodes, list) or not nodes
                or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in nodes)):
            raise SchemaError(f"{path}.nodes", "expected a non-empty list of vertex ids")
        return ElectrodeDef(name, kind, nodes=tuple(nodes))
    _keys(d, path, required=("type", "p0", "cavity", "radius", "searchdom"))
    return ElectrodeDef(name, kind, p0=_vec(d, "p0", path, 3),
                        cavity=_str(d, "cavity", path, choices={"lv", "rv"}),
                        radius=_num(d, "radius", path),
                        searchdom=_str(d, "searchdom", path, choices={"cxyz"}))


def parse_electrodes(section, path="electrodes"):
    _keys(section, path, required=("version", "definitions"))
    _version(section, path)
    defs = _obj(section["definitions"], f"{path}.definitions")
    return {name: _parse_electrode(name, d, f"{path}.definitions.{name}") for name, d in defs.items()}


def parse_configurations(section, path="configurations"):
    _keys(section, path, required=("version", "definitions"))
    _version(section, path)
    defs = _obj(section["definitions"], f"{path}.definitions")
    out = {}
    for name, d in defs.items():
        p = f"{path}.definitions.{name}"
        _keys(d, p, required=("tags", "func"))
        tags = d["tags"]
        if (not isinstance(tags, list) or not tags
                or not all(isinstance(t, int) and not isinstance(t, bool) for t in tags)):
            raise SchemaError(f"{p}.tags", "expected a non-empty list of integer tags")
        out[name] = ConfigurationDef(name, tuple(tags), _str(d, "func", p))
    seen = {}
    for c in out.values():
        for t in c.tags:
            if t in seen:
                raise SchemaError(f"{path}.definitions.{c.name}.tags",
                                  f"tag {t} already assigned by {seen[t]!r}")
            seen[t] = c.name
    return out


_SOLVER_KEYS = ("dt", "output_interval", "diffusion_scheme", "linear_solver",
                "linear_tolerance", "stimulus", "sentinel")


def parse_solver_setup(d, path="solver_setup"):
    if d is None:
        return SolverSetup()
    _keys(d, path, optional=_SOLVER_KEYS)
    defaults = SolverSetup()
    dt = _num(d, "dt", path, default=defaults.dt)
    out = _num(d, "output_interval", path, default=defaults.output_interval)
    ratio = out / dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise SchemaError(f"{path}.output_interval", "must be an integer multiple of dt")
    stim = d.get("stimulus") or {}
    _keys(stim, f"{path}.stimulus", optional=("strength", "duration"))
    sen = d.get("sentinel") or {}
    _keys(sen, f"{path}.sentinel",
          optional=("upstroke_threshold", "quiescence_window", "poll_interval"))
    return SolverSetup(
        dt=dt, output_interval=out,
        diffusion_scheme=_str(d, "diffusion_scheme", path, {"implicit_euler", "crank_nicolson"},
                              default=defaults.diffusion_scheme),
        linear_solver=_str(d, "linear_solver", path, {"cg", "direct"},
                           default=defaults.linear_solver),
        linear_tolerance=_num(d, "linear_tolerance", path, default=defaults.linear_tolerance),
        stimulus_strength=_num(stim, "strength", f"{path}.stimulus", nullable=True, default=None),
        stimulus_duration=_num(stim, "duration", f"{path}.stimulus",
                               default=defaults.stimulus_duration),
        upstroke_threshold=_num(sen, "upstroke_threshold", f"{path}.sentinel", positive=False,
                                default=defaults.upstroke_threshold),
        quiescence_window=_num(sen, "quiescence_window", f"{path}.sentinel",
                               default=defaults.quiescence_window),
        poll_interval=_num(sen, "poll_interval", f"{path}.sentinel",
                           default=defaults.poll_interval),
    )


def validate_references(plan: Plan) -> None:
    for p in plan.protocols.values():
        if p.electrode not in plan.electrodes:
            raise PlanReferenceError("electrode", p.electrode, f"protocol {p.name!r}")
    for c in plan.configurations.values():
        if c.func != SCAR and c.func not in plan.functions:
            raise PlanReferenceError("function", c.func, f"configuration {c.name!r}")
        if c.func in plan.functions and plan.functions[c.func].is_scar and c.func != SCAR:
            raise PlanReferenceError("function", c.func, f"configuration {c.name!r}")


def plan_from_dict(d) -> Plan:
    _keys(d, "", required=("functions", "protocols", "electrodes", "configurations"),
          optional=("solver_setup",))
    plan = Plan(PLAN_VERSION,
                parse_functions(d["functions"]),
                parse_protocols(d["protocols"]),
                parse_electrodes(d["electrodes"]),
                parse_configurations(d["configurations"]),
                parse_solver_setup(d.get("solver_setup")))
    validate_references(plan)
    return plan


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON: {exc}") from exc


def load_plan(path) -> Plan:
    return plan_from_dict(_read_json(path))


# -- serialization ---------------------------------------------------------------

def _function_dict(f: FunctionDef):
    if f.is_scar:
        return {}
    ini = f.initialization
    ep = {"model": f.model, "model_par": f.model_par, "plugins": f.plugins,
          "plugins_par": f.plugins_par,
          "initialization": {"num_cycles": ini.num_cycles, "bcl": ini.bcl, "init": ini.init,
                             "apdres_file": ini.apdres_file,
                             "apdres_protocol": ini.apdres_protocol}}
    return {f.name: ep, "conductivity": f.conductivity.as_dict(),
            "conduction_velocity": {"reference": f.reference.as_dict(),
                                    "measured": f.measured.as_dict()}}


def _protocol_dict(p: ProtocolDef):
    return {"propagation": p.propagation, "num_cycles": p.num_cycles, "bcl": p.bcl,
            "electrodes": p.electrode, "rel_timings": p.rel_timings,
            "lat_file": p.lat_file, "restart": p.restart}


def _electrode_dict(e: ElectrodeDef):
    if e.kind == "cartesian_sphere":
        return {"type": e.kind, "center": list(e.center), "radius": e.radius}
    if e.kind == "node_list":
        return {"type": e.kind, "nodes": list(e.nodes)}
    return {"type": e.kind, "p0": list(e.p0), "cavity": e.cavity, "radius": e.radius,
            "searchdom": e.searchdom}


def _solver_dict(s: SolverSetup):
    return {"dt": s.dt, "output_interval": s.output_interval,
            "diffusion_scheme": s.diffusion_scheme, "linear_solver": s.linear_solver,
            "linear_tolerance": s.linear_tolerance,
            "stimulus": {"strength": s.stimulus_strength, "duration": s.stimulus_duration},
            "sentinel": {"upstroke_threshold": s.upstroke_threshold,
                         "quiescence_window": s.quiescence_window,
                         "poll_interval": s.poll_interval}}


def protocols_section(protocols):
    return {"version": PLAN_VERSION,
            "prepacing": {n: _protocol_dict(p) for n, p in protocols.items()}}


def electrodes_section(electrodes):
    return {"version": PLAN_VERSION,
            "definitions": {n: _electrode_dict(e) for n, e in electrodes.items()}}


def configurations_section(configurations):
    return {"version": PLAN_VERSION,
            "definitions": {n: {"tags": list(c.tags), "func": c.func}
                            for n, c in configurations.items()}}


def plan_to_dict(plan: Plan) -> dict:
    return {
        "functions": {"version": PLAN_VERSION,
                      "definitions": {n: _function_dict(f) for n, f in plan.functions.items()}},
        "protocols": protocols_section(plan.protocols),
        "electrodes": electrodes_section(plan.electrodes),
        "configurations": configurations_section(plan.configurations),
        "solver_setup": _solver_dict(plan.solver_setup),
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def serialize(plan: Plan) -> str:
    return dumps(plan_to_dict(plan))


def plan_hash(plan: Plan) -> str:
    return hashlib.sha256(serialize(plan).encode()).hexdigest()


def atomic_write_text(path, text) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_plan(plan: Plan, path) -> None:
    atomic_write_text(path, serialize(plan))


# -- overrides and external files ------------------------------------------------

def load_protocols(path, plan: Plan) -> list:
    """Protocols from an external file; they replace the plan's protocols."""
    d = _read_json(path)
    protocols = parse_protocols(d, path=Path(path).name)
    trial = replace(plan, protocols=protocols)
    validate_references(trial)
    return list(protocols.values())


def with_protocols(plan: Plan, protocols) -> Plan:
    return replace(plan, protocols={p.name: p for p in protocols})


def merge_subject_overrides(plan: Plan, subject_dir, electrodes_file="electrodes.json",
                            configurations_file="configurations.json") -> Plan:
    """Apply subject-level electrode/configuration files over plan defaults."""
    subject_dir = Path(subject_dir)
    if not subject_dir.is_dir():
        raise OSError(f"subject directory not found: {subject_dir}")
    electrodes = dict(plan.electrodes)
    configurations = dict(plan.configurations)
    if electrodes_file:
        p = subject_dir / electrodes_file
        if p.exists():
            electrodes.update(parse_electrodes(_read_json(p), path=p.name))
    if configurations_file:
        p = subject_dir / configurations_file
        if p.exists():
            override = parse_configurations(_read_json(p), path=p.name)
            # a re-mapped tag leaves whichever default configuration held it
            moved = {t for c in override.values() for t in c.tags}
            for name, c in list(configurations.items()):
                if name in override:
                    continue
                keep = tuple(t for t in c.tags if t not in moved)
                if keep:
                    configurations[name] = replace(c, tags=keep)
                else:
                    del configurations[name]
            configurations.update(override)
    merged = replace(plan, electrodes=electrodes, configurations=configurations)
    validate_references(merged)
    return merged


def write_measured_velocities(plan_path, function: str, measured, conductivity=None) -> None:
    """Rewrite the ``measured`` CV block of one function in a plan file.

    When ``conductivity`` is given the function's conductivities are replaced
    as well (tuning write-back).
    """
    plan_path = Path(plan_path)
    d = _read_json(plan_path)
    defs = d.get("functions", {}).get("definitions", {})
    if function not in defs or function == SCAR:
        raise UnknownFunction(f"function {function!r} not defined in {plan_path}")
    if isinstance(measured, Velocities):
        measured = measured.as_dict()
    cv = defs[function].setdefault("conduction_velocity", {})
    cv["measured"] = {k: (None if measured.get(k) is None else float(measured[k]))
                      for k in ("vf", "vs", "vn")}
    if conductivity is not None:
        defs[function]["conductivity"] = (conductivity.as_dict()
                                          if isinstance(conductivity, Conductivity)
                                          else dict(conductivity))
    plan_from_dict(d)
    try:
        atomic_write_text(plan_path, dumps(d))
    except OSError as exc:
        raise OSError(f"cannot write {plan_path}: {exc}") from exc
