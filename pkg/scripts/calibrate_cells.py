"""Bisect the gate closing time of each cell parameter set to a target ERP.

    python scripts/calibrate_cells.py                    # report current ERPs
    python scripts/calibrate_cells.py --fit bz_tissue --target 360
"""
import argparse

from autovarp.cellmodel import PARAMETER_SETS, cell_limit_cycle, estimate_erp, make_model


def erp_for(params, pcl):
    return estimate_erp(make_model("MitchellSchaeffer", params), pcl)


def fit_tau_close(base, target, pcl, lo=60.0, hi=400.0, tol=0.01):
    """Smallest tau_close (to ``tol`` ms) whose ERP reaches ``target``; ERP grows with tau_close."""
    if erp_for({**base, "tau_close": hi}, pcl) < target:
        raise SystemExit(f"target {target} ms not reachable with tau_close <= {hi}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if erp_for({**base, "tau_close": mid}, pcl) >= target:
            hi = mid
        else:
            lo = mid
    return round(hi, 2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pcl", type=float, default=600.0)
    ap.add_argument("--fit", choices=sorted(PARAMETER_SETS))
    ap.add_argument("--target", type=float, help="ERP target in ms")
    args = ap.parse_args()
    if args.fit:
        if args.target is None:
            ap.error("--fit needs --target")
        base = dict(PARAMETER_SETS[args.fit])
        tau = fit_tau_close(base, args.target, args.pcl)
        print(f"{args.fit}: tau_close = {tau} (tau_open {base['tau_open']})")
        return
    for name, params in PARAMETER_SETS.items():
        lc = cell_limit_cycle(make_model("MitchellSchaeffer", params), args.pcl, 100)
        print(f"{name:10s} {params}  APD {lc.apd:6.1f} ms  ERP {erp_for(params, args.pcl):g} ms")


if __name__ == "__main__":
    main()
