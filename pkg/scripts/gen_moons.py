#!/usr/bin/env python3
"""Generate the two-moons CSV used by examples/moons_mlp.nsk.

Two interleaving half-circles with Gaussian noise; deterministic under a
fixed seed. Rewriting examples/moons.csv with the default arguments
reproduces the committed file byte for byte.
"""

import argparse
import os

import numpy as np


def make_moons(rows: int, noise: float, seed: int):
    rng = np.random.default_rng(seed)
    n0 = rows // 2
    n1 = rows - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    x = x + rng.normal(scale=noise, size=x.shape)
    order = rng.permutation(rows)
    return x[order], y[order]


def write_csv(path: str, x: np.ndarray, y: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x1,x2,label\n")
        for (a, b), label in zip(x, y):
            fh.write(f"{a:.6f},{b:.6f},{int(label)}\n")


def main() -> None:
    default_out = os.path.join(os.path.dirname(__file__), "..", "examples", "moons.csv")
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=1000)
    parser.add_argument("--noise", type=float, default=0.12)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=os.path.normpath(default_out))
    args = parser.parse_args()
    x, y = make_moons(args.rows, args.noise, args.seed)
    write_csv(args.out, x, y)
    print(f"wrote {args.rows} rows to {args.out}")


if __name__ == "__main__":
    main()
