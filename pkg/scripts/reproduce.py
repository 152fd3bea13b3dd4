#!/usr/bin/env python3
"""End-to-end reproduction: corpus -> training -> all evals -> latent analysis.

Chains the ``ship`` CLI exactly as a user would, one training run per seed,
and aggregates the per-seed summary tables into ``<out>/summary.txt``.

    python3 scripts/reproduce.py --out runs/repro --seeds 0 1 2
    python3 scripts/reproduce.py --out runs/smoke --quick   # ~1 min pipeline check
"""
from __future__ import annotations

import argparse
import pathlib
import subprocess
import sys
import time

CLI = [sys.executable, "-m", "ship.cli"]


def run(args: list[str]) -> None:
    print("+", " ".join(args), flush=True)
    subprocess.run(args, check=True)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/repro")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--quick", action="store_true",
                    help="tiny model, 1 seed, 3 epochs: checks the pipeline, not the claims")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    seeds = args.seeds[:1] if args.quick else args.seeds
    epochs = 3 if args.quick else args.epochs
    shape = ["--d-model", "16", "--m-soft", "2", "--n-layers", "1",
             "--n-heads", "2", "--d-ff", "32"] if args.quick else []

    t0 = time.time()
    corpus = out / "corpus.json"
    run(CLI + ["gen", "--out-dir", str(out), "--seed", "0"])

    tables: list[tuple[str, pathlib.Path]] = []
    for seed in seeds:
        rdir = out / f"seed{seed}"
        ckpt = rdir / "checkpoint.bin"
        run(CLI + ["train", "--corpus", str(corpus), "--out-dir", str(rdir),
                   "--seed", str(seed), "--epochs", str(epochs)] + shape)
        for kind in ("deduction", "induction", "reasoning"):
            run(CLI + ["eval", kind, "--corpus", str(corpus), "--checkpoint", str(ckpt),
                       "--out-dir", str(rdir), "--seed", str(seed),
                       "--jobs", str(args.jobs)])
            tables.append((f"seed {seed} {kind}", rdir / f"{kind}.txt"))
        if seed == seeds[0]:
            run(CLI + ["analyze", "--corpus", str(corpus), "--checkpoint", str(ckpt),
                       "--out-dir", str(rdir), "--seed", str(seed)])
            tables.append((f"seed {seed} latent distances", rdir / "distance-report.txt"))

    parts = [f"reproduction finished in {time.time() - t0:.0f} s\n"]
    for title, path in tables:
        parts.append(f"== {title} ==\n{path.read_text()}")
    (out / "summary.txt").write_text("\n".join(parts))
    print(f"\nwrote {out / 'summary.txt'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
