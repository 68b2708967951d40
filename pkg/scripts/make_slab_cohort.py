"""Write the desk-scale slab cohort (plan, protocols file and mesh).

    python scripts/make_slab_cohort.py runs/slab
"""
import argparse
import json
from pathlib import Path

from autovarp.slab import SlabGeometry, write_slab_cohort

DATA = Path(__file__).resolve().parents[1] / "data" / "slab"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--resolution", type=float, default=0.3, help="mm")
    args = ap.parse_args()
    geom = SlabGeometry(resolution=args.resolution)
    paths = write_slab_cohort(args.out, geom)
    print(f"plan      {paths['plan']}")
    print(f"protocols {paths['protocols']}")
    print(f"subject   {paths['subject']}")
    if geom == SlabGeometry():
        same = all(json.loads((args.out / n).read_text()) == json.loads((DATA / n).read_text())
                   for n in ("planfile.json", "varp_protocols.json"))
        print(f"matches shipped reference files: {same}")


if __name__ == "__main__":
    main()
