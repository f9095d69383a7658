"""Regenerate the archived synthetic blood-pressure dataset.

200 adults aged 18-60 with two systolic readings each. The residual spread
peaks in middle age and shrinks towards both ends of the age range, so the
homoscedastic standard errors overstate the uncertainty of the intercept and
the age slope.

    python3 scripts/make_synthetic_sbp.py [output.csv]
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np

SEED = 20171018
N = 200
DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "bayes_sandwich" / "data" / "synthetic_sbp.csv"


def simulate(seed: int = SEED, n: int = N) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    age = rng.integers(18, 61, n)
    male = rng.binomial(1, 0.5, n)
    centred = (age - 39.0) / 21.0
    person_sd = 10.5 - 7.0 * centred ** 2
    level = 94.0 + 4.8 * male + 0.57 * age + person_sd * rng.standard_normal(n)
    sbp1 = np.round(level + 3.0 * rng.standard_normal(n))
    sbp2 = np.round(level + 3.0 * rng.standard_normal(n))
    return {"sbp1": sbp1, "sbp2": sbp2, "sbp": (sbp1 + sbp2) / 2, "male": male, "age": age}


def main(argv: list[str]) -> None:
    out = Path(argv[0]) if argv else DEFAULT_OUT
    cols = simulate()
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *cols])
        for i in range(N):
            writer.writerow([i + 1, *(f"{cols[k][i]:g}" for k in cols)])


if __name__ == "__main__":
    main(sys.argv[1:])
