#!/usr/bin/env python3
"""Ablation grid: retrain without one conditioning pathway and re-run the evals.

Three rows, matching the claims the full model is compared against:
  no-k         task model never sees the instruction text
  no-xy        decoder loses its (x, y) condition pair
  no-indirect  induction optimizes z directly instead of through the encoder
The first two retrain; the third reuses the full checkpoint.

    python3 scripts/ablations.py --out runs/ablate --full runs/repro/seed0/checkpoint.bin
"""
from __future__ import annotations

import argparse
import pathlib
import subprocess
import sys

CLI = [sys.executable, "-m", "ship.cli"]


def run(args: list[str]) -> None:
    print("+", " ".join(args), flush=True)
    subprocess.run(args, check=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--full", required=True,
                    help="checkpoint of the fully conditioned model (for no-indirect)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    corpus = out / "corpus.json"
    run(CLI + ["gen", "--out-dir", str(out), "--seed", "0"])

    for name, flag in (("no-k", "--no-k-cond"), ("no-xy", "--no-xy-cond")):
        rdir = out / name
        run(CLI + ["train", "--corpus", str(corpus), "--out-dir", str(rdir),
                   "--seed", str(args.seed), "--epochs", str(args.epochs), flag])
        kind = "deduction" if name == "no-k" else "induction"
        run(CLI + ["eval", kind, "--corpus", str(corpus),
                   "--checkpoint", str(rdir / "checkpoint.bin"),
                   "--out-dir", str(rdir), "--seed", str(args.seed)])

    rdir = out / "no-indirect"
    run(CLI + ["eval", "induction", "--corpus", str(corpus),
               "--checkpoint", args.full, "--out-dir", str(rdir),
               "--seed", str(args.seed), "--no-indirect"])

    for name, kind in (("no-k", "deduction"), ("no-xy", "induction"),
                       ("no-indirect", "induction")):
        print(f"\n== {name} / {kind} ==")
        print((out / name / f"{kind}.txt").read_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
