"""Cycles and wall time to the tissue limit cycle: lat-1 prepacing vs pacing from rest."""
import argparse

from autovarp.experiments import prepace_efficiency


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tol", type=float, default=1.0, help="node-wise Vm tolerance in mV")
    ap.add_argument("--metric", choices=("repolarization", "full"), default="repolarization")
    ap.add_argument("--healthy-only", action="store_true",
                    help="homogeneous healthy sheet; it settles within one beat from rest, "
                         "so the border-zone half is what makes the comparison informative")
    args = ap.parse_args()
    r = prepace_efficiency(tol=args.tol, metric=args.metric, mix=not args.healthy_only)
    print("naive errors (mV):", " ".join(f"{e:.3f}" for e in r.naive_errors))
    print("lat-1 errors (mV):", " ".join(f"{e:.3f}" for e in r.lat1_errors))
    print(f"cycles to {r.tolerance:g} mV: naive {r.naive_cycles}, lat-1 {r.lat1_cycles}")
    print(f"wall: naive {r.naive_seconds:.1f} s, lat-1 {r.lat1_seconds:.1f} s, "
          f"ratio {r.speedup:.2f}x")


if __name__ == "__main__":
    main()
