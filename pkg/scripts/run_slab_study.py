"""Run the slab study, print its status table and compare with the golden outcomes.

    python scripts/make_slab_cohort.py runs/slab
    python scripts/run_slab_study.py runs/slab
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

from autovarp.engine import StudySpec, run_study
from autovarp.plan import load_plan, load_protocols
from autovarp.postproc import status

GOLDEN = Path(__file__).resolve().parents[1] / "data" / "slab" / "golden_outcomes.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path, help="directory written by make_slab_cohort.py")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    golden = json.loads(GOLDEN.read_text())
    plan = load_plan(args.root / "planfile.json")
    spec = StudySpec(plan, args.root / "cohort", plan_path=args.root / "planfile.json",
                     protocols_path=args.root / "varp_protocols.json",
                     protocols=tuple(load_protocols(args.root / "varp_protocols.json", plan)),
                     ci_array=tuple(golden["ci_array"]), mt_duration=golden["mt_duration"],
                     workers=args.workers, root=args.root)
    t0 = time.perf_counter()
    report = run_study(spec)
    print(f"simulations {report.simulations} in {time.perf_counter() - t0:.0f} s")
    if not report.ok:
        print(report.failures, file=sys.stderr)
        return 1
    (table,) = status(spec, golden["mt_threshold"])
    print(table.render())
    mismatches = [(o.electrode, o.ci, o.mt_exit) for o in table.outcomes
                  if golden["mt_exit"][o.electrode][f"{o.ci:g}"] != o.mt_exit]
    print("golden outcomes reproduced" if not mismatches else f"mismatches: {mismatches}")
    return 0 if not mismatches else 1


if __name__ == "__main__":
    sys.exit(main())
