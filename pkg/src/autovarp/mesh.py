"""Meshes in openCARP text format, electrode resolution and region partitioning.

On disk, ``.pts`` coordinates are in micrometres; in memory everything is mm.

``.uvc`` is this package's own format: a count header followed by one line
``apicobasal transmural rotational cavity`` per point, with the cavity given
as a label such as ``lv`` or ``rv``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (EmptyElectrode, FormatError, GeometryError, MissingUVC,
                     UncoveredTag, UnknownCavity)

UM_PER_MM = 1000.0

# openCARP element codes -> (kind, vertex count)
ELEM_CODES = {
    "Ln": ("line", 2),
    "Tr": ("triangle", 3),
    "Qd": ("quad", 4),
    "Tt": ("tetra", 4),
    "Hx": ("hexa", 8),
}
KIND_CODES = {kind: code for code, (kind, _) in ELEM_CODES.items()}
KIND_NVERT = {kind: n for kind, n in ELEM_CODES.values()}
KIND_DIM = {"line": 1, "triangle": 2, "quad": 2, "tetra": 3, "hexa": 3}

# sub-simplex splits used for element measures (and eikonal updates)
SIMPLEX_SPLIT = {
    "line": [(0, 1)],
    "triangle": [(0, 1, 2)],
    "quad": [(0, 1, 2), (0, 2, 3)],
    "tetra": [(0, 1, 2, 3)],
    "hexa": [(0, 1, 3, 4), (1, 2, 3, 6), (1, 4, 5, 6), (3, 4, 6, 7), (1, 3, 4, 6)],
}

SCAR = "scar"


@dataclass
class UVC:
    apicobasal: np.ndarray
    transmural: np.ndarray
    rotational: np.ndarray
    cavity: np.ndarray  # str labels


@dataclass
class Mesh:
    points: np.ndarray  # (n, 3) mm
    kinds: np.ndarray  # (m,) str
    conn: np.ndarray  # (m, 8) int, padded with -1
    tags: np.ndarray  # (m,) int
    fibers: np.ndarray  # (m, 3)
    sheets: np.ndarray | None = None
    uvc: UVC | None = None
    name: str = "mesh"

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_elements(self) -> int:
        return len(self.kinds)

    def element_nodes(self, e) -> np.ndarray:
        row = self.conn[e]
        return row[row >= 0]

    def blocks(self):
        """Yield (kind, element ids, connectivity) per element kind."""
        for kind in KIND_NVERT:
            ids = np.nonzero(self.kinds == kind)[0]
            if ids.size:
                yield kind, ids, self.conn[ids, :KIND_NVERT[kind]]

    @property
    def tag_set(self) -> set:
        return set(int(t) for t in np.unique(self.tags))

    def edge_lengths(self) -> np.ndarray:
        out = []
        for kind, _, c in self.blocks():
            k = c.shape[1]
            for a in range(k):
                for b in range(a + 1, k):
                    out.append(np.linalg.norm(self.points[c[:, a]] - self.points[c[:, b]], axis=1))
        return np.concatenate(out) if out else np.zeros(0)


def simplex_measure(points, conn) -> np.ndarray:
    """Length/area/volume of simplices given as (m, d+1) vertex ids."""
    d = conn.shape[1] - 1
    x0 = points[conn[:, 0]]
    E = np.stack([points[conn[:, i]] - x0 for i in range(1, d + 1)], axis=2)  # (m,3,d)
    G = np.einsum("mki,mkj->mij", E, E)
    det = np.linalg.det(G)
    fact = {1: 1.0, 2: 2.0, 3: 6.0}[d]
    return np.sqrt(np.clip(det, 0.0, None)) / fact


def element_measures(mesh: Mesh) -> np.ndarray:
    meas = np.zeros(mesh.n_elements)
    for kind, ids, c in mesh.blocks():
        for sub in SIMPLEX_SPLIT[kind]:
            meas[ids] += simplex_measure(mesh.points, c[:, list(sub)])
    return meas


def _normalize(v, what):
    n = np.linalg.norm(v, axis=1)
    if np.any(n == 0):
        raise FormatError(f"zero-length {what} vector in element {int(np.argmin(n))}")
    return v / n[:, None]


def make_mesh(points, elements, tags, fibers, sheets=None, uvc=None, name="mesh",
              kinds=None) -> Mesh:
    """Build and validate a mesh from in-memory arrays.

    ``elements`` is a list of vertex-id sequences or a 2D array; ``kinds`` is
    inferred from vertex counts when omitted (4 vertices -> tetra in 3D
    points, quad when all z are equal).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise FormatError("points must be an (n, 3) array")
    elements = [np.asarray(e, dtype=np.int64) for e in elements]
    m = len(elements)
    conn = -np.ones((m, 8), dtype=np.int64)
    if kinds is None:
        flat = np.ptp(points[:, 2]) == 0 if len(points) else True
        by_n = {2: "line", 3: "triangle", 4: "quad" if flat else "tetra", 8: "hexa"}
        kinds = [by_n[len(e)] for e in elements]
    kinds = np.asarray(kinds, dtype=object)
    for i, e in enumerate(elements):
        if len(e) != KIND_NVERT[kinds[i]]:
            raise FormatError(f"element {i}: {kinds[i]} needs {KIND_NVERT[kinds[i]]} vertices")
        conn[i, :len(e)] = e
    if m and (conn.max() >= len(points) or conn[conn >= 0].min() < 0):
        raise FormatError("element vertex id out of range")
    tags = np.asarray(tags, dtype=np.int64).reshape(-1)
    fibers = np.asarray(fibers, dtype=np.float64).reshape(-1, 3)
    if len(tags) != m or len(fibers) != m:
        raise FormatError("tags/fibers must have one entry per element")
    fibers = _normalize(fibers, "fiber")
    if sheets is not None:
        sheets = _normalize(np.asarray(sheets, dtype=np.float64).reshape(-1, 3), "sheet")
    mesh = Mesh(points, kinds, conn, tags, fibers, sheets, uvc, name)
    meas = element_measures(mesh)
    bad = np.nonzero(meas <= 1e-12)[0]
    if bad.size:
        raise GeometryError(f"degenerate element(s), first id {int(bad[0])}")
    return mesh


# -- file I/O -------------------------------------------------------------

def _read_counted(path: Path):
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    return lines[0].split(), lines[1:]


def _ext(base: Path, ext: str) -> Path:
    # mesh names may contain dots (e.g. "1mmbz.300um.f90"), so no with_suffix
    return base.with_name(base.name + ext)


def _find_base(directory: Path) -> Path:
    pts = sorted(directory.glob("*.pts"))
    if not pts:
        raise OSError(f"no .pts file in {directory}")
    if len(pts) > 1:
        named = [p for p in pts if p.name[:-4] == directory.name]
        if not named:
            raise FormatError(f"{directory}: several .pts files and none named after the folder")
        pts = named
    return pts[0].with_name(pts[0].name[:-4])


def load_mesh(directory, base=None) -> Mesh:
    """Load ``<base>.pts/.elem/.lon`` (and optional ``.uvc``) from a directory."""
    directory = Path(directory)
    base = directory / base if base else _find_base(directory)

    head, body = _read_counted(_ext(base, ".pts"))
    n = int(head[0])
    if len(body) != n:
        raise FormatError(f"{base}.pts: header says {n} points, found {len(body)}")
    try:
        points = np.array([[float(x) for x in ln.split()[:3]] for ln in body]).reshape(n, 3)
    except ValueError as exc:
        raise FormatError(f"{base}.pts: {exc}") from exc
    points /= UM_PER_MM

    head, body = _read_counted(_ext(base, ".elem"))
    m = int(head[0])
    if len(body) != m:
        raise FormatError(f"{base}.elem: header says {m} elements, found {len(body)}")
    elements, kinds, tags = [], [], []
    for i, ln in enumerate(body):
        tok = ln.split()
        if tok[0] not in ELEM_CODES:
            raise FormatError(f"{base}.elem line {i + 2}: unknown element type {tok[0]!r}")
        kind, nv = ELEM_CODES[tok[0]]
        if len(tok) < nv + 2:
            raise FormatError(f"{base}.elem line {i + 2}: expected {nv} vertices and a tag")
        elements.append([int(x) for x in tok[1:1 + nv]])
        kinds.append(kind)
        tags.append(int(tok[1 + nv]))

    head, body = _read_counted(_ext(base, ".lon"))
    naxes = int(head[0])
    if naxes not in (1, 2):
        raise FormatError(f"{base}.lon: fiber header must be 1 or 2, got {naxes}")
    if len(body) != m:
        raise FormatError(f"{base}.lon: expected {m} fiber rows, found {len(body)}")
    lon = np.array([[float(x) for x in ln.split()] for ln in body])
    if lon.shape[1] != 3 * naxes:
        raise FormatError(f"{base}.lon: expected {3 * naxes} components per row")
    fibers = lon[:, :3]
    sheets = lon[:, 3:6] if naxes == 2 else None

    uvc = None
    uvc_path = _ext(base, ".uvc")
    if uvc_path.exists():
        head, body = _read_counted(uvc_path)
        if int(head[0]) != n or len(body) != n:
            raise FormatError(f"{uvc_path}: expected {n} rows")
        rows = [ln.split() for ln in body]
        uvc = UVC(np.array([float(r[0]) for r in rows]),
                  np.array([float(r[1]) for r in rows]),
                  np.array([float(r[2]) for r in rows]),
                  np.array([r[3] for r in rows], dtype=object))

    for i, e in enumerate(elements):
        if max(e) >= n or min(e) < 0:
            raise FormatError(f"{base}.elem: element {i} references vertex outside 0..{n - 1}")
    return make_mesh(points, elements, tags, fibers, sheets, uvc, name=directory.name,
                     kinds=kinds)


def save_mesh(mesh: Mesh, directory, base=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    base = directory / (base or mesh.name)
    pts = mesh.points * UM_PER_MM
    with open(_ext(base, ".pts"), "w") as fh:
        fh.write(f"{mesh.n_points}\n")
        np.savetxt(fh, pts, fmt="%.6f")
    with open(_ext(base, ".elem"), "w") as fh:
        fh.write(f"{mesh.n_elements}\n")
        for i in range(mesh.n_elements):
            ids = " ".join(str(v) for v in mesh.element_nodes(i))
            fh.write(f"{KIND_CODES[mesh.kinds[i]]} {ids} {mesh.tags[i]}\n")
    with open(_ext(base, ".lon"), "w") as fh:
        lon = mesh.fibers if mesh.sheets is None else np.hstack([mesh.fibers, mesh.sheets])
        fh.write(f"{1 if mesh.sheets is None else 2}\n")
        np.savetxt(fh, lon, fmt="%.8f")
    if mesh.uvc is not None:
        u = mesh.uvc
        with open(_ext(base, ".uvc"), "w") as fh:
            fh.write(f"{mesh.n_points}\n")
            for i in range(mesh.n_points):
                fh.write(f"{u.apicobasal[i]:.8f} {u.transmural[i]:.8f} "
                         f"{u.rotational[i]:.8f} {u.cavity[i]}\n")
    return base


def geometry_files(directory) -> list[Path]:
    base = _find_base(Path(directory))
    return [p for p in (_ext(base, s) for s in (".pts", ".elem", ".lon", ".uvc"))
            if p.exists()]


# -- electrodes -----------------------------------------------------------

@dataclass(frozen=True)
class NodeSet:
    ids: np.ndarray
    provenance: object = None

    def __len__(self):
        return len(self.ids)


def _sphere(points, center, radius):
    d = np.linalg.norm(points - np.asarray(center, dtype=float), axis=1)
    return np.nonzero(d <= radius)[0]


def uvc_distance(uvc: UVC, p0) -> np.ndarray:
    """Distance in (apicobasal, transmural, rotational/pi), rotation periodic."""
    a0, t0, r0 = p0
    dr = np.angle(np.exp(1j * (uvc.rotational - r0))) / np.pi
    return np.sqrt((uvc.apicobasal - a0) ** 2 + (uvc.transmural - t0) ** 2 + dr ** 2)


def resolve_electrode(mesh: Mesh, e) -> NodeSet:
    """Resolve an electrode definition to a sorted set of mesh vertices."""
    kind = e.kind
    if kind == "cartesian_sphere":
        ids = _sphere(mesh.points, e.center, e.radius)
    elif kind == "node_list":
        ids = np.unique(np.asarray(e.nodes, dtype=np.int64))
        if ids.size and (ids.min() < 0 or ids.max() >= mesh.n_points):
            raise EmptyElectrode(f"electrode node ids outside mesh range 0..{mesh.n_points - 1}")
    elif kind == "ucc_sphere":
        if mesh.uvc is None:
            raise MissingUVC(f"electrode needs UVC coordinates but mesh {mesh.name} has none")
        cav = mesh.uvc.cavity == e.cavity
        if not np.any(cav):
            raise UnknownCavity(f"cavity {e.cavity!r} not present in mesh {mesh.name}")
        a, t, r = e.p0
        if not (0 <= a <= 1 and 0 <= t <= 1 and -np.pi <= r <= np.pi):
            raise ValueError(f"UVC point {e.p0} outside coordinate ranges")
        d = uvc_distance(mesh.uvc, e.p0)
        d = np.where(cav, d, np.inf)
        center = int(np.argmin(d))  # argmin takes the lowest id on ties
        ids = _sphere(mesh.points, mesh.points[center], e.radius)
    else:
        raise ValueError(f"unknown electrode kind {kind!r}")
    ids = np.unique(ids)
    if ids.size == 0:
        raise EmptyElectrode(f"electrode {getattr(e, 'name', '')!s} matched no mesh nodes")
    return NodeSet(ids, e)


# -- region partition ------------------------------------------------------

@dataclass
class Partition:
    groups: dict  # function name -> element ids (scar included under SCAR)
    element_function: np.ndarray  # (m,) function name per element
    node_function: np.ndarray  # (n,) function name per node, SCAR when excluded
    active: np.ndarray = field(default=None)  # (n,) bool

    @property
    def excluded_nodes(self) -> np.ndarray:
        return np.nonzero(~self.active)[0]

    @property
    def active_elements(self) -> np.ndarray:
        return np.nonzero(self.element_function != SCAR)[0]


def tag_partition(mesh: Mesh, configurations) -> Partition:
    """Map element tags to functions; nodes touching only scar are excluded.

    ``configurations`` is an iterable of objects with ``tags`` and ``func``.
    A node shared by several functions takes the function of its incident
    non-scar element with the smallest tag.
    """
    tag_to_func = {}
    for c in configurations:
        for t in c.tags:
            tag_to_func[int(t)] = c.func
    uncovered = mesh.tag_set - set(tag_to_func)
    if uncovered:
        raise UncoveredTag(uncovered)
    efunc = np.array([tag_to_func[int(t)] for t in mesh.tags], dtype=object)
    groups = {}
    for f in dict.fromkeys(efunc):
        groups[f] = np.nonzero(efunc == f)[0]

    node_function = np.full(mesh.n_points, SCAR, dtype=object)
    best_tag = np.full(mesh.n_points, np.iinfo(np.int64).max)
    order = np.argsort(mesh.tags, kind="stable")[::-1]
    for e in order:
        if efunc[e] == SCAR:
            continue
        nodes = mesh.element_nodes(e)
        t = mesh.tags[e]
        upd = nodes[t <= best_tag[nodes]]
        node_function[upd] = efunc[e]
        best_tag[upd] = t
    active = node_function != SCAR
    return Partition(groups, efunc, node_function, active)


# -- structured generators ---------------------------------------------------

def fiber_from_angle(angle_deg) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([np.cos(a), np.sin(a), 0.0])


def strand(length, h, tag=1, name="strand", tags_fn=None) -> Mesh:
    """1D cable along x with line elements of size ~h (mm)."""
    n = int(round(length / h))
    x = np.linspace(0.0, length, n + 1)
    pts = np.column_stack([x, np.zeros_like(x), np.zeros_like(x)])
    elems = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    centers = 0.5 * (x[:-1] + x[1:])
    tags = np.full(n, tag) if tags_fn is None else np.array([tags_fn(c) for c in centers])
    fib = np.tile([1.0, 0.0, 0.0], (n, 1))
    return make_mesh(pts, elems, tags, fib, name=name, kinds=["line"] * n)


def sheet(lx, ly, h, fiber_angle=0.0, tags_fn=None, name="sheet") -> Mesh:
    """Structured quad sheet in the z=0 plane; ``tags_fn(xc, yc)`` labels elements."""
    nx = int(round(lx / h))
    ny = int(round(ly / h))
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row j = y index
    pts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v0 = j * (nx + 1) + i
    elems = np.column_stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1])
    xc = 0.5 * (xs[i] + xs[i + 1])
    yc = 0.5 * (ys[j] + ys[j + 1])
    tags = np.ones(len(elems), dtype=np.int64) if tags_fn is None else np.asarray(tags_fn(xc, yc))
    fib = np.tile(fiber_from_angle(fiber_angle), (len(elems), 1))
    return make_mesh(pts, elems, tags, fib, name=name, kinds=["quad"] * len(elems))


def grid_node(mesh_lx, h, x, y) -> int:
    """Vertex id nearest to (x, y) on a :func:`sheet` grid."""
    nx = int(round(mesh_lx / h))
    return int(round(y / h)) * (nx + 1) + int(round(x / h))
