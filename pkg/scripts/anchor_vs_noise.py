"""Train anchored and anchor-frozen models on the 4-mode synthetic set and compare.

    python scripts/anchor_vs_noise.py [--seeds 0 1 2 3 4] [--out results.json]
"""
import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from stars.config import RunConfig
from stars.data import SyntheticSpec
from stars.experiment import run_experiment, summarize

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.ini"))
    ap.add_argument("--spec", default=str(ROOT / "configs" / "synthetic_4mode.ini"))
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    overrides = {"train": {"epochs": str(args.epochs)}} if args.epochs else None
    cfg = RunConfig.from_file(args.config, overrides=overrides)
    spec = SyntheticSpec.from_file(args.spec)

    t0 = time.perf_counter()

    def log(row):
        tag = "anchored" if row["anchored"] else "frozen  "
        rate = " ".join(f"{x:.2f}" for x in row["mode_hit_rate"])
        print(f"seed {row['seed']} {tag} apd={row['apd']:.4f} ade={row['ade']:.4f} mmade={row['mmade']:.4f} "
              f"hits=[{rate}] covered={row['modes_covered']} ({row['wall_seconds']:.0f}s)", flush=True)

    pairs = run_experiment(cfg, spec, args.data_seed, args.seeds, log=log)
    summary = summarize(pairs)
    summary["elapsed_seconds"] = time.perf_counter() - t0
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps({"summary": summary,
                                              "runs": [asdict(r) for p in pairs for r in p]}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
