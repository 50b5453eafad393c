"""Run one study plan and emit the power table plus a compact pivot view.

Usage:
    python scripts/run_power_study.py plans/desk_mvn.json --out results/desk_mvn
    python scripts/run_power_study.py plans/full_mvn.json --workers 8
"""

import argparse
import time
from collections import defaultdict
from pathlib import Path

from psprsim.engine import StudyPlan, prepare_auxiliaries, run_study


def pivot_text(table):
    """scenario x method grid per scheme, power to three decimals."""
    by_scheme = defaultdict(lambda: defaultdict(dict))
    methods = []
    for r in table.rows:
        by_scheme[r.scheme][r.scenario][r.method] = r.rejection_rate
        if r.method not in methods:
            methods.append(r.method)
    lines = []
    for scheme, grid in by_scheme.items():
        lines.append(f"== scheme: {scheme} ==")
        lines.append("scenario  " + "  ".join(f"{m:>11s}" for m in methods))
        for scen, row in grid.items():
            cells = "  ".join(f"{row.get(m, float('nan')):11.3f}" for m in methods)
            lines.append(f"{scen:8s}  {cells}")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("plan")
    ap.add_argument("--out", default=None)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--cache-dir", default=".calibration-cache")
    args = ap.parse_args()

    plan = StudyPlan.load(args.plan)
    out = Path(args.out or f"results/{Path(args.plan).stem}")
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    aux = prepare_auxiliaries(plan, cache_dir=args.cache_dir)
    print(f"auxiliaries ready in {time.time() - t0:.1f}s")
    t0 = time.time()
    table = run_study(plan, aux=aux, workers=args.workers)
    print(f"{plan.n_reps} reps x {len(plan.scenarios)} scenarios in {time.time() - t0:.1f}s")

    table.save_csv(out / "power_table.csv")
    table.save_json(out / "power_table.json")
    (out / "power_pivot.txt").write_text(pivot_text(table))
    plan.save(out / "plan_echo.json")
    print(pivot_text(table))
    print(f"results in {out}/")


if __name__ == "__main__":
    main()
