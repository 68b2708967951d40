"""Eikonal versus reaction-diffusion activation maps on a strand and a sheet."""
import argparse

from autovarp.experiments import sheet_lat_agreement, strand_lat_agreement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.3, help="mesh resolution in mm")
    args = ap.parse_args()
    for label, r in (("strand", strand_lat_agreement(args.h)),
                     ("sheet", sheet_lat_agreement(h=args.h))):
        print(f"{label:6s} max|dT| {r.max_abs_diff:6.2f} ms of {r.total_time:6.1f} ms "
              f"({r.relative:.1%}), time origin offset {r.offset:.2f} ms")


if __name__ == "__main__":
    main()
