"""Smoke test runner for DemineUQ.
Runs configs/smoke.yaml end to end in a temporary directory and checks the
artifacts a complete run must leave behind.
Usage:
  source .venv/bin/activate && python scripts/run_smoke.py [--keep]
"""
import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from demineuq.experiment import load_config  # noqa: E402
from demineuq.logs import configure_logging  # noqa: E402
from demineuq.pipeline import RunManifest, run_experiment  # noqa: E402

load_dotenv()
SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.yaml"

REQUIRED = ["config", "model", "history", "clean/report", "fgsm/eps-0.01/report", "fgsm/eps-0.05/report",
            "pgd/eps-0.03/report", "pgd/eps-0.03/attacks", "noisy/gaussian-0.1/report", "trend/fgsm", "flagging"]


def check(manifest: RunManifest) -> list[tuple[str, bool, dict]]:
    results = [("status", manifest.complete, {"status": manifest.status})]
    for name in REQUIRED:
        ok = name in manifest.artifacts and manifest.artifact(name).is_file()
        results.append((name, ok, {"path": manifest.artifacts.get(name)}))
    clean = json.loads(manifest.artifact("clean/report").read_text(encoding="utf-8"))
    finite = all(r["uncertainty"] == r["uncertainty"] and r["uncertainty"] >= 0 for r in clean["records"])
    results.append(("clean_uncertainty_finite", finite, {"samples": clean["sample_count"]}))
    linf_ok = True
    for rel in ("fgsm/eps-0.01/report", "pgd/eps-0.03/report"):
        report = json.loads(manifest.artifact(rel).read_text(encoding="utf-8"))
        linf_ok &= all(r["linf"] <= report["strength"] + 1e-9 for r in report["records"])
    results.append(("attack_budget", linf_ok, {}))
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--keep", action="store_true", help="keep the run directory")
    args = parser.parse_args()
    configure_logging("WARNING")

    out = tempfile.mkdtemp(prefix="demineuq-smoke-")
    manifest = run_experiment(load_config(SMOKE_CONFIG, output_dir=out))
    failures = []
    for name, ok, info in check(manifest):
        print(f"[smoke] {name}: {'ok' if ok else 'FAIL'} {json.dumps(info)}")
        if not ok:
            failures.append(name)
    print(f"[smoke] run_dir={manifest.run_dir}" if args.keep else "[smoke] (run directory is temporary)")
    print("\nSmoke Summary: PASS" if not failures else f"Smoke Summary: FAIL -> {failures}")
    if not args.keep:
        shutil.rmtree(out, ignore_errors=True)
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
