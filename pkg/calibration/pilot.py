"""Pilot calibration of the planted-benchmark margin.

Runs every method on pilot seeds that are disjoint from the acceptance seeds
and fixes the margin ``delta`` required of ``full`` over ``vanilla_ft``:

    delta = max(1 / n_test, z_95 * sd(full - vanilla_ft) / sqrt(n_seeds))

where the standard deviation is taken over the paired per-seed differences.
``delta`` is the smallest mean margin that seed noise of the size seen in the
pilot would produce less than 5% of the time, floored at one test example.

Usage::

    python calibration/pilot.py [--out calibration/pilot.json]
"""

from __future__ import annotations

import argparse
import json
import math
import time
from pathlib import Path

import numpy as np
from scipy import stats

from patchtune.harness.config import METHODS, TrainConfig
from patchtune.harness.train import run_matrix
from patchtune.io import atomic_write_text

PILOT_SEEDS = (100, 101, 102, 103, 104)


def calibrate(seeds=PILOT_SEEDS, cfg: TrainConfig | None = None) -> dict:
    cfg = cfg or TrainConfig()
    start = time.perf_counter()
    records = [r for r in run_matrix(list(METHODS), list(seeds), cfg) if r.method != "pretrain"]
    table = {m: {r.seed: {"test": r.final_test_accuracy, "masked": r.final_masked_accuracy}
                 for r in records if r.method == m} for m in METHODS}
    diffs = np.array([table["full"][s]["test"] - table["vanilla_ft"][s]["test"] for s in seeds])
    z = float(stats.norm.ppf(0.95))
    sd = float(diffs.std(ddof=1)) if len(seeds) > 1 else 0.0
    floor = 1.0 / cfg.bench.n_test
    delta = max(floor, z * sd / math.sqrt(len(seeds)))
    return {
        "seeds": list(seeds),
        "config": cfg.to_dict(),
        "per_seed": {m: {str(s): v for s, v in rows.items()} for m, rows in table.items()},
        "mean_test": {m: float(np.mean([v["test"] for v in rows.values()])) for m, rows in table.items()},
        "mean_masked": {m: float(np.mean([v["masked"] for v in rows.values()])) for m, rows in table.items()},
        "full_minus_vanilla": {"per_seed": diffs.tolist(), "mean": float(diffs.mean()), "sd": sd},
        "delta_rule": "max(1/n_test, z_0.95 * sd(full - vanilla_ft) / sqrt(n_seeds))",
        "delta": delta,
        "wall_clock_seconds": time.perf_counter() - start,
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default=str(Path(__file__).with_name("pilot.json")))
    args = parser.parse_args()
    result = calibrate()
    atomic_write_text(args.out, json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: result[k] for k in ("mean_test", "mean_masked", "delta")}, indent=2))


if __name__ == "__main__":
    main()
