"""Isthmus slab geometry for the desk-scale inducibility cohort.

A square sheet with a rectangular scar split by a straight channel (the
isthmus).  Tissue within ``bz_width`` of the scar is border zone: tag 3
inside the channel, tag 2 elsewhere.  Healthy tissue is tag 1, scar tag 4.
Fibers run at ``fiber_angle`` degrees from the x axis (90 = along the
isthmus).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from pathlib import Path

from .mesh import Mesh, save_mesh, sheet
from .plan import atomic_write_text, dumps

HEALTHY, BZ_RIM, BZ_ISTHMUS, SCAR_TAG = 1, 2, 3, 4

# clock positions used for the peripheral electrodes, labelled as HHMM
CLOCK_LABELS = ("S1200", "S0130", "S0300", "S0430", "S0600", "S0730", "S0900", "S1030")


@dataclass(frozen=True)
class SlabGeometry:
    size: float = 40.0  # mm, square side
    resolution: float = 0.3  # mm
    scar_width: float = 28.0  # along x
    scar_height: float = 20.0  # along y, also the isthmus length
    isthmus_width: float = 2.0
    bz_width: float = 1.0
    fiber_angle: float = 90.0
    electrode_radius: float = 1.0
    electrode_offset: float = 3.0  # clearance between electrodes and the scar box

    @property
    def name(self) -> str:
        return f"{self.bz_width:g}mmbz.{round(self.resolution * 1000)}um.f{self.fiber_angle:g}"

    @property
    def center(self) -> float:
        return 0.5 * self.size

    def scar_blocks(self):
        c, hw, hh, hi = self.center, 0.5 * self.scar_width, 0.5 * self.scar_height, 0.5 * self.isthmus_width
        return [(c - hw, c - hi, c - hh, c + hh), (c + hi, c + hw, c - hh, c + hh)]

    def tags(self, xc, yc) -> np.ndarray:
        xc, yc = np.asarray(xc), np.asarray(yc)
        dist = np.full(xc.shape, np.inf)
        for x0, x1, y0, y1 in self.scar_blocks():
            dx = np.maximum(np.maximum(x0 - xc, xc - x1), 0.0)
            dy = np.maximum(np.maximum(y0 - yc, yc - y1), 0.0)
            dist = np.minimum(dist, np.hypot(dx, dy))
        c, hh, hi = self.center, 0.5 * self.scar_height, 0.5 * self.isthmus_width
        in_channel = (np.abs(xc - c) < hi) & (np.abs(yc - c) <= hh)
        out = np.full(xc.shape, HEALTHY, dtype=np.int64)
        out[dist <= self.bz_width] = BZ_RIM
        out[(dist <= self.bz_width) & in_channel] = BZ_ISTHMUS
        out[dist == 0.0] = SCAR_TAG
        return out

    def electrode_centers(self) -> dict:
        """Eight electrodes clockwise from 12 o'clock (+y, the isthmus axis).

        Each sits where the ray at its clock angle leaves a box enlarged by
        ``electrode_offset`` around the scar.
        """
        hx = 0.5 * self.scar_width + self.electrode_offset
        hy = 0.5 * self.scar_height + self.electrode_offset
        out = {}
        for k, label in enumerate(CLOCK_LABELS):
            a = np.pi / 2 - k * np.pi / 4
            ca, sa = np.cos(a), np.sin(a)
            r = min(hx / abs(ca) if abs(ca) > 1e-12 else np.inf,
                    hy / abs(sa) if abs(sa) > 1e-12 else np.inf)
            out[f"{label}-RAD"] = (round(self.center + r * ca, 6), round(self.center + r * sa, 6), 0.0)
        return out


def isthmus_slab(geom: SlabGeometry = SlabGeometry()) -> Mesh:
    return sheet(geom.size, geom.size, geom.resolution, fiber_angle=geom.fiber_angle,
                 tags_fn=geom.tags, name=geom.name)


# Conductivities tuned at 0.3 mm to 0.6/0.2 m/s (healthy) and 0.2/0.0667 m/s
# (border zone); see scripts/calibrate_cells.py.
SLAB_FUNCTIONS = {
    "ht_tissue": {"reference": (0.6, 0.2, 0.2),
                  "conductivity": (0.582243, 2.091389, 0.067911, 0.243933, 0.067911, 0.243933),
                  "measured": (0.6062, 0.2003, 0.2003)},
    "bz_tissue": {"reference": (0.2, 0.066667, 0.066667),
                  "conductivity": (0.067681, 0.243109, 0.009378, 0.033687, 0.009378, 0.033687),
                  "measured": (0.2003, 0.0663, 0.0663)},
}
SURF2VOL = 0.14


def _function_entry(name, f):
    v = lambda t: dict(zip(("vf", "vs", "vn"), t))
    return {
        name: {"model": "MitchellSchaeffer", "model_par": name, "plugins": None,
               "plugins_par": None,
               "initialization": {"num_cycles": 100, "bcl": 600.0, "init": None,
                                  "apdres_file": None, "apdres_protocol": None}},
        "conductivity": dict(zip(("gil", "gel", "git", "get", "gin", "gen"), f["conductivity"]),
                             surf2vol=SURF2VOL),
        "conduction_velocity": {"reference": v(f["reference"]), "measured": v(f["measured"])},
    }


def slab_protocols(geom: SlabGeometry = SlabGeometry(), bcl=600.0) -> dict:
    return {"version": 2, "prepacing": {
        f"prepace-{el}": {"propagation": "rd", "num_cycles": 100, "bcl": bcl, "electrodes": el,
                          "rel_timings": None, "lat_file": None, "restart": None}
        for el in geom.electrode_centers()}}


def slab_plan(geom: SlabGeometry = SlabGeometry(), strength=40.0, output_interval=5.0) -> dict:
    """Plan dictionary for the slab cohort (one placeholder protocol; the
    study protocols live in a separate protocols file)."""
    electrodes = {name: {"type": "cartesian_sphere", "center": list(c),
                         "radius": geom.electrode_radius}
                  for name, c in geom.electrode_centers().items()}
    first = next(iter(electrodes))
    return {
        "functions": {"version": 2, "definitions": {
            **{n: _function_entry(n, f) for n, f in SLAB_FUNCTIONS.items()}, "scar": {}}},
        "protocols": {"version": 2, "prepacing": {"protocol_1": {
            "propagation": "rd", "num_cycles": 100, "bcl": 600.0, "electrodes": first,
            "rel_timings": None, "lat_file": None, "restart": None}}},
        "electrodes": {"version": 2, "definitions": electrodes},
        "configurations": {"version": 2, "definitions": {
            "healthy": {"tags": [HEALTHY], "func": "ht_tissue"},
            "borderzone": {"tags": [BZ_RIM, BZ_ISTHMUS], "func": "bz_tissue"},
            "scar": {"tags": [SCAR_TAG], "func": "scar"}}},
        "solver_setup": {"dt": 0.05, "output_interval": output_interval,
                         "diffusion_scheme": "implicit_euler", "linear_solver": "cg",
                         "linear_tolerance": 1e-8,
                         "stimulus": {"strength": strength, "duration": 2.0},
                         "sentinel": {"upstroke_threshold": -20.0, "quiescence_window": 150.0,
                                      "poll_interval": 1.0}},
    }


def write_slab_cohort(root, geom: SlabGeometry = SlabGeometry(), **plan_kw) -> dict:
    """Write ``planfile.json``, ``varp_protocols.json`` and ``cohort/<mesh>/`` under ``root``."""
    root = Path(root)
    (root / "cohort").mkdir(parents=True, exist_ok=True)
    plan_path = root / "planfile.json"
    prot_path = root / "varp_protocols.json"
    atomic_write_text(plan_path, dumps(slab_plan(geom, **plan_kw)))
    # protocol order is execution order, so this file keeps insertion order
    atomic_write_text(prot_path, json.dumps(slab_protocols(geom), indent=2) + "\n")
    mesh = isthmus_slab(geom)
    save_mesh(mesh, root / "cohort" / geom.name)
    return {"plan": plan_path, "protocols": prot_path, "subject": root / "cohort" / geom.name}
