"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import STAGES, StudySpec, gen_param_files, plan_execution, run_study, task_counts
from .errors import AutoVarpError, ValidationError
from .plan import load_plan, load_protocols
from .prepace import PrepaceMode

log = logging.getLogger("autovarp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3


def _ci_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="autovarp", allow_abbrev=False,
                                 description="Staged S1-S2 induction testing on cardiac meshes.")
    ap.add_argument("--plan", required=True, type=Path, help="plan file (JSON)")
    ap.add_argument("--cohort-dir", required=True, type=Path,
                    help="directory holding one folder per subject")
    ap.add_argument("--case-ID", dest="case_id", help="restrict processing to one subject")
    ap.add_argument("--protocols", type=Path, help="protocols file replacing the plan's protocols")
    ap.add_argument("--configurations", default="configurations.json",
                    help="per-subject configurations override file name")
    ap.add_argument("--electrodes", default="electrodes.json",
                    help="per-subject electrodes override file name")
    ap.add_argument("--stage", choices=STAGES,
                    help="execute only this stage (default: run every stage up to MT)")
    ap.add_argument("--gen-lat", choices=("ek", "rd"))
    ap.add_argument("--lim-cyc", choices=("lat-0", "lat-1"))
    ap.add_argument("--S1-cycles", dest="s1_cycles", type=int, default=1)
    ap.add_argument("--CI-array", dest="ci_array", type=_ci_list, default=(330.0,),
                    help="comma-separated coupling intervals in ms")
    ap.add_argument("--S2-cycles", dest="s2_cycles", type=int, default=1)
    ap.add_argument("--decrement-S2", dest="decrement_s2", type=float, default=0.0,
                    help="decrement in ms between successive S2 intervals")
    ap.add_argument("--MT-duration", dest="mt_duration", type=float, default=2000.0)
    ap.add_argument("--overwrite", action="store_true")
    ap.add_argument("--tissue-tuning", action="store_true")
    ap.add_argument("--plot-restitution", action="store_true")
    ap.add_argument("--gen-param-files", action="store_true",
                    help="write per-task parameter files without simulating")
    ap.add_argument("--status", action="store_true", help="write status tables")
    ap.add_argument("--mt-thr", "--mt-threshold", dest="mt_thr", type=float, default=1000.0,
                    help="MT exit time (ms) counted as sustained")
    ap.add_argument("--movies", action="store_true", help="export voltage frames")
    ap.add_argument("--bundle", action="store_true", help="write reproducibility archives")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _prepace_mode(args, postprocess_only):
    explicit_stage = args.stage is not None and args.stage != "PP"
    if args.gen_lat is None and args.lim_cyc is None:
        # at an explicit downstream stage the prepacing history must be stated
        return None if explicit_stage and not postprocess_only else PrepaceMode()
    default = PrepaceMode()
    return PrepaceMode(gen_lat=args.gen_lat or default.gen_lat,
                       lim_cyc=args.lim_cyc or default.lim_cyc)


def spec_from_args(args) -> StudySpec:
    postprocess_only = args.status or args.movies or args.bundle or args.gen_param_files
    plan = load_plan(args.plan)
    protocols = ()
    if args.protocols is not None:
        protocols = tuple(load_protocols(args.protocols, plan))
    return StudySpec(
        plan=plan, cohort_dir=args.cohort_dir, plan_path=args.plan,
        protocols_path=args.protocols, case_id=args.case_id, protocols=protocols,
        stage=args.stage or "MT", run_upstream=args.stage is None,
        prepace=_prepace_mode(args, postprocess_only),
        s1_cycles=args.s1_cycles, ci_array=args.ci_array, s2_cycles=args.s2_cycles,
        decrement_s2=args.decrement_s2, mt_duration=args.mt_duration,
        overwrite=args.overwrite, tissue_tuning=args.tissue_tuning,
        gen_param_files=args.gen_param_files, plot_restitution=args.plot_restitution,
        electrodes_file=args.electrodes, configurations_file=args.configurations,
        workers=args.workers)


def _report(kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)


def _postprocess(spec, args):
    from . import postproc
    if args.status:
        for table in postproc.status(spec, args.mt_thr):
            print(table.render())
    if args.movies:
        for manifest in postproc.export_all_frames(spec):
            print(f"frames: {manifest}")
    if args.bundle:
        for archive in postproc.bundle(spec, spec.stage):
            print(f"bundle: {archive}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        if not spec.cohort_dir.is_dir():
            raise ValidationError(f"cohort directory {spec.cohort_dir} does not exist")
        if args.gen_param_files:
            files = gen_param_files(spec)
            counts = task_counts(plan_execution(spec))
            print(f"parameter files: {len(files)}; tasks: {json.dumps(counts)}")
        post = args.status or args.movies or args.bundle
        if not (post or args.gen_param_files):
            report = run_study(spec)
            counts = task_counts(report.tasks)
            print(f"tasks: {json.dumps(counts)}; simulations: {report.simulations}")
            for rec in report.records:
                print(f"{rec.label}  {rec.path.name}")
            if not report.ok:
                for subject, message in report.failures:
                    print(json.dumps({"error": "runtime", "subject": subject,
                                      "message": message}), file=sys.stderr)
                return EXIT_RUNTIME
        if post:
            _postprocess(spec, args)
    except ValidationError as exc:
        _report("validation", exc)
        return EXIT_VALIDATION
    except (AutoVarpError, OSError) as exc:
        _report("runtime", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
