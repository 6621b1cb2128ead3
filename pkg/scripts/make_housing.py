#!/usr/bin/env python3
"""Regenerate the bundled synthetic housing-style regression benchmark.

496 rows, 13 numeric features with realistic correlations and skew, and a
nonlinear noisy target. The file is committed at
src/robustcoresets/bundled/housing.csv; run this script only to rebuild it.
"""

import csv
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "src" / "robustcoresets" / "bundled" / "housing.csv"
N = 496
SEED = 20260810


def main():
    rng = np.random.default_rng(SEED)
    # latent neighborhood factors
    wealth = rng.normal(0.0, 1.0, N)
    density = 0.6 * -wealth + 0.8 * rng.normal(0.0, 1.0, N)
    age = rng.uniform(0.0, 1.0, N)

    cols = {
        "crime_rate": np.exp(0.9 * density + rng.normal(0, 0.7, N) - 1.5),
        "zoned_lots": np.clip(18.0 * wealth + rng.normal(12, 10, N), 0, 100),
        "industry": np.clip(9.0 + 5.0 * density + rng.normal(0, 2.5, N), 0.5, 28),
        "riverside": (rng.random(N) < 0.07).astype(float),
        "pollution": np.clip(0.55 + 0.09 * density + rng.normal(0, 0.05, N), 0.38, 0.87),
        "rooms": np.clip(6.3 + 0.55 * wealth + rng.normal(0, 0.45, N), 3.8, 8.8),
        "built_before": np.clip(100 * age + 8 * density + rng.normal(0, 8, N), 3, 100),
        "work_distance": np.exp(0.45 * -density + rng.normal(1.0, 0.35, N)),
        "highway_access": np.rint(np.clip(5 + 6 * density + rng.normal(0, 3, N), 1, 24)),
        "tax_rate": np.clip(400 + 120 * density + rng.normal(0, 70, N), 180, 720),
        "pupil_teacher": np.clip(18.5 + 1.6 * density + rng.normal(0, 1.6, N), 12.5, 22),
        "minority_index": np.clip(380 - 25 * density + rng.normal(0, 35, N), 1, 397),
        "lower_status": np.clip(12 - 5.5 * wealth + rng.normal(0, 3.2, N), 1.7, 38),
    }
    target = (
        21.5
        + 5.2 * wealth
        - 2.6 * density
        + 2.4 * np.maximum(cols["rooms"] - 6.5, 0.0)
        - 0.12 * cols["lower_status"]
        + 1.8 * cols["riverside"]
        + rng.normal(0, 1.9, N)
    )
    cols["target"] = np.clip(target, 5.0, 50.0)

    with open(OUT, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(cols))
        for i in range(N):
            writer.writerow([f"{cols[name][i]:.5g}" for name in cols])
    print(f"wrote {OUT} ({N} rows)")


if __name__ == "__main__":
    main()
