#!/usr/bin/env python3
"""Quick verification of a finished run.

Prints the manifest status, lists missing artifacts and checks the headline
desk-scale numbers (clean accuracy, FGSM trend, PGD separation).

Usage:
  python scripts/verify_run.py runs/            # follows runs/LATEST
  python scripts/verify_run.py runs/run-20260101T000000Z-1a2b3c4d
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from demineuq.pipeline import RunManifest, resolve_run_dir  # noqa: E402

MIN_CLEAN_ACCURACY = 0.90
MIN_PGD_FACTOR = 2.0
MIN_FLAG_MARGIN = 0.3


def main() -> int:
    parser = argparse.ArgumentParser(description="verify a DemineUQ run directory")
    parser.add_argument("run_dir", nargs="?", default="runs")
    parser.add_argument("--pgd-eps", default="0.03", help="PGD budget used for the separation checks")
    args = parser.parse_args()

    manifest = RunManifest.load(resolve_run_dir(args.run_dir))
    s = manifest.summary
    print(f"[verify] run={manifest.run_id} status={manifest.status}")
    missing = manifest.missing_artifacts()
    print(f"[verify] artifacts={len(manifest.artifacts)} missing={missing or 'none'}")

    failures = [] if manifest.complete and not missing else ["manifest"]
    checks = []
    if "clean_accuracy" in s:
        checks.append(("clean_accuracy", s["clean_accuracy"], s["clean_accuracy"] >= MIN_CLEAN_ACCURACY))
    if "fgsm" in s.get("trends", {}):
        t = s["trends"]["fgsm"]
        checks.append(("fgsm_monotone", t["medians"], t["monotone"]))
        checks.append(("fgsm_spearman", t["spearman"], t["spearman"] > 0))
    pgd_dir = f"pgd/eps-{args.pgd_eps}"
    if pgd_dir in s.get("scenarios", {}) and "clean_median_uncertainty" in s:
        ratio = s["scenarios"][pgd_dir]["median_uncertainty"] / max(s["clean_median_uncertainty"], 1e-12)
        checks.append(("pgd_over_clean", round(ratio, 3), ratio > MIN_PGD_FACTOR))
        flag = next((c for c in s.get("flagging", []) if c["scenario_dir"] == pgd_dir), None)
        if flag is not None:
            checks.append(("pgd_flag_margin", round(flag["margin"], 3), flag["margin"] >= MIN_FLAG_MARGIN))
            checks.append(("pgd_mann_whitney_p", flag["mann_whitney_p"], flag["mann_whitney_p"] < 0.01))

    for name, value, ok in checks:
        print(f"  {name:20s} : {value} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(name)
    print("\nVerify Summary: PASS" if not failures else f"Verify Summary: FAIL -> {failures}")
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
