"""Lambda sweep on the toy model: patched count and accuracies per lambda.

    python scripts/run_sweep.py --checkpoint runs/table1/model/model.ckpt --data runs/table1/data
"""

import argparse
import sys

from circuitseek.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--lambdas", default="0,0.01,0.03,0.1,0.3,1000")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--config")
    args = ap.parse_args()
    cfg = ["--config", args.config] if args.config else []
    sys.exit(main([*cfg, "--out", args.out, "sweep", "--checkpoint", args.checkpoint, "--data", args.data,
                   "--lambdas", args.lambdas, "--jobs", str(args.jobs)]))
