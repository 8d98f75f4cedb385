"""Discovery on the hand-wired recall model over several seeds.

Prints the recovered component set per seed next to the known ground truth.
"""

import argparse
import json
from pathlib import Path

from circuitseek.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/planted")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    hits = 0
    for seed in range(args.seeds):
        root = Path(args.out) / f"seed{seed}"
        assert main(["--seed", str(seed), "--out", str(root), "build-planted"]) == 0
        io = ["--checkpoint", str(root / "planted.ckpt"), "--data", str(root / "data")]
        assert main(["--seed", str(seed), "--out", str(root / "run"), "discover", *io]) == 0
        assert main(["--seed", str(seed), "--out", str(root / "run"), "eval", *io,
                     "--mask", str(root / "run" / "mask_binary.json")]) == 0
        truth = json.loads((root / "ground_truth.json").read_text())["components"]
        found = json.loads((root / "run" / "discover.json").read_text())["patched"]
        acc = json.loads((root / "run" / "eval.json").read_text())["vd_acc"]
        hits += found == truth
        print(f"seed {seed}: found {found} truth {truth} vd_acc {acc:.3f}")
    print(f"exact recovery in {hits}/{args.seeds} seeds")
