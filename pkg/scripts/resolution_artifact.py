"""Conduction velocity of fixed conductivities across mesh resolutions."""
import argparse

from autovarp.experiments import slab_function
from autovarp.tissue import measure_cv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])
    args = ap.parse_args()
    for name in ("ht_tissue", "bz_tissue"):
        f = slab_function(name)
        for axis in ("fiber", "sheet"):
            cvs = " ".join(f"{measure_cv(f, h, axis):.4f}" for h in args.h)
            print(f"{name} {axis:5s} CV (m/s) at h={args.h}: {cvs}")


if __name__ == "__main__":
    main()
