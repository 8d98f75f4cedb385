"""Clean baseline, full-desiderata and VD-only masks on the toy model, then one report.

    python scripts/run_table1.py --out runs/table1 [--checkpoint model.ckpt] [--config cfg.json]
"""

import argparse
import sys
from pathlib import Path

from circuitseek.cli import main


def step(*argv):
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/table1")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--checkpoint", help="skip training and use this model")
    args = ap.parse_args()
    out = Path(args.out)
    flags = ["--seed", args.seed] + (["--config", args.config] if args.config else [])

    step(*flags, "--out", out / "data", "gen-data")
    ckpt = args.checkpoint
    if ckpt is None:
        step(*flags, "--out", out / "model", "train-model")
        ckpt = out / "model" / "model.ckpt"
    io = ["--checkpoint", ckpt, "--data", out / "data"]
    step(*flags, "--out", out / "runs" / "original", "eval", *io, "--mask", "identity")
    for label, desiderata in (("full", "vd,oi"), ("vd-only", "vd")):
        run = out / "runs" / label
        step(*flags, "--out", run, "discover", *io, "--desiderata", desiderata, "--label", label)
        step(*flags, "--out", run, "eval", *io, "--mask", run / "mask_binary.json")
    step(*flags, "--out", out, "report", "--runs", out / "runs")
