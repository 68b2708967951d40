"""S1-S2 responses on a healthy|border-zone strand across coupling intervals.

    python scripts/strand_window.py --ci 250 260 280 300 330 360 400
"""
import argparse

from autovarp.cellmodel import estimate_erp, make_model
from autovarp.experiments import strand_s1s2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ci", type=float, nargs="+", default=[260.0, 300.0, 330.0, 360.0, 400.0])
    ap.add_argument("--pcl", type=float, default=600.0)
    args = ap.parse_args()
    for name in ("ht_tissue", "bz_tissue"):
        print(f"cell ERP {name}: {estimate_erp(make_model('MitchellSchaeffer', name), args.pcl):g} ms")
    print("  CI   healthy  border-zone  outcome")
    for r in strand_s1s2(sorted(args.ci), pcl=args.pcl):
        print(f"{r.ci:5.0f}  {r.healthy_fraction:7.2f}  {r.bz_fraction:11.2f}  {r.outcome}")


if __name__ == "__main__":
    main()
