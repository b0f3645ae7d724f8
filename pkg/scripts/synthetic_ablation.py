"""Segment-length and input-mode ablation on the synthetic flicker corpus."""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def vod(*args):
    subprocess.run([sys.executable, "-m", "vod.cli", *map(str, args)], check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/synthetic_ablation"))
    ap.add_argument("--c-sl", type=int, nargs="+", default=[5, 9, 17])
    ap.add_argument("--modes", nargs="+", default=["cfd", "ssff", "raw"])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = args.out / "data"
    if not (data / "manifest.json").exists():
        vod("synth", "--out", data, "--seed", args.seed)
    grid = args.out / "grid.json"
    grid.parent.mkdir(parents=True, exist_ok=True)
    grid.write_text(json.dumps({"c_sl": args.c_sl, "mode": args.modes}))
    vod("ablate", "--manifest", data / "manifest.json", "--out", args.out / "cells", "--grid", grid,
        "--detector", "synthetic", "--toy-scale", 0.25, "--out-size", 32, "--epochs", args.epochs,
        "--seed", args.seed)
    print((args.out / "cells" / "ablation.md").read_text())


if __name__ == "__main__":
    main()
