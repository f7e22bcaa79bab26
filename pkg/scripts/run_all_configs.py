"""Run every bundled config through the CLI and summarise the verdicts.

    python scripts/run_all_configs.py --out runs/
"""

import argparse
import json
import time
from pathlib import Path

from relaxpa.cli import main

CONFIGS = ("lq_benchmark", "bsde_xt", "bsde_linear", "bsde_mixed", "constrained", "degenerate", "zero_contract")


def run(out_root, seed=None):
    rows = []
    for name in CONFIGS:
        out = Path(out_root) / name
        argv = ["run", "--config", name, "--out", str(out)]
        if seed is not None:
            argv += ["--seed", str(seed)]
        t0 = time.perf_counter()
        code = main(argv)
        rep = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else {}
        failed = [k for k, ok in rep.get("verdicts", {}).items() if not ok]
        rows.append((name, code, time.perf_counter() - t0, failed))
    print()
    for name, code, secs, failed in rows:
        print(f"{name:<15} exit {code}  {secs:6.1f}s  {'failed: ' + ', '.join(failed) if failed else 'all verdicts pass'}")
    return rows


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int)
    a = p.parse_args()
    run(a.out, a.seed)
