"""``circuitseek`` command line: data, training, discovery, evaluation, sweeps, reports.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 threshold unmet (always for failed training, otherwise only with ``--strict``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .desiderata import NumericalAbort, optimize, prepare
from .experiment import (
    TABLE_COLUMNS,
    ConfigError,
    DataDir,
    ExperimentConfig,
    approximate_minimum,
    desideratum_for,
    eval_row,
    generate_sets,
    render_report,
    spearman,
    write_rows_csv,
    write_sets,
)
from .patching import BinaryMask, load_mask, save_mask
from .tasks.planted import build_planted_model
from .tasks.training import TrainingFailure, train_toy_model
from .transformer import CheckpointFormatError, ConfigMismatchError, load_checkpoint, read_manifest, save_checkpoint

log = logging.getLogger("circuitseek")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 2, 3, 4


class ThresholdUnmet(RuntimeError):
    pass


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _checkpoint(args, cfg: ExperimentConfig):
    path = args.checkpoint or cfg.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or config 'checkpoint')")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _data(args, cfg: ExperimentConfig) -> DataDir:
    path = args.data or cfg.data_dir
    if not path:
        raise ConfigError("no dataset directory given (--data or config 'data_dir')")
    return DataDir.open(path)


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> int:
    rng = np.random.default_rng(cfg.seed)
    manifest = write_sets(generate_sets(cfg.data, rng), out, cfg.stamp())
    for name, e in sorted(manifest["files"].items()):
        print(f"{name}: {e['count']} tuples -> {out / e['file']}")
    return EXIT_OK


def cmd_train_model(args, cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    init, start, opt_state = None, 0, None
    if args.resume:
        init = load_checkpoint(args.resume, expected_config=cfg.model)
        start = int(read_manifest(args.resume).get("extra", {}).get("step", 0))
        with np.load(Path(args.resume).with_suffix(".optim.npz")) as z:
            n = int(z["n"])
            opt_state = {"t": int(z["t"]), "m": [z[f"m{i}"] for i in range(n)], "v": [z[f"v{i}"] for i in range(n)]}
    try:
        params, report = train_toy_model(cfg.model, cfg.training, cfg.seed, init, start, opt_state, until=args.until)
    except TrainingFailure as e:
        write_rows_csv(e.curve, out / "training_curve.csv", ("step", "loss", "heldout_acc"), cfg.stamp())
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    ckpt = out / "model.ckpt"
    save_checkpoint(params, ckpt, extra={**cfg.stamp(), "step": report.steps, "heldout_acc": report.heldout_acc})
    st = report.optimizer_state
    np.savez(ckpt.with_suffix(".optim.npz"), t=st["t"], n=len(st["m"]),
             **{f"m{i}": m for i, m in enumerate(st["m"])}, **{f"v{i}": v for i, v in enumerate(st["v"])})
    write_rows_csv(report.curve, out / "training_curve.csv", ("step", "loss", "heldout_acc"), cfg.stamp())
    _dump(out / "training.json", {**cfg.stamp(), "steps": report.steps, "heldout_acc": report.heldout_acc,
                                  "train_acc": report.train_acc, "n_train": report.n_train,
                                  "n_heldout": report.n_heldout, "config": cfg.to_dict()})
    print(f"held-out first-digit accuracy {report.heldout_acc:.4f} after {report.steps} steps -> {ckpt}")
    paused = args.until is not None and report.steps < cfg.training.max_steps
    if report.heldout_acc < cfg.training.target_acc and not paused:
        if args.strict:
            raise ThresholdUnmet(f"held-out accuracy {report.heldout_acc:.4f} < {cfg.training.target_acc}")
        log.warning("held-out accuracy below target %.2f", cfg.training.target_acc)
    return EXIT_OK


def cmd_build_planted(args, cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    s_train, s_test = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    spec = build_planted_model(cfg.data.n_train, s_train)
    test = build_planted_model(cfg.data.n_test, s_test).tuples
    stamp = cfg.stamp()
    save_checkpoint(spec.params, out / "planted.ckpt", extra=stamp)
    _dump(out / "ground_truth.json", {**stamp, "components": sorted(str(c) for c in spec.ground_truth),
                                      "checks": spec.checks})
    write_sets({"vd_train": spec.tuples, "vd_test": test}, out / "data", stamp)
    print(f"planted model ok: accuracy {spec.checks['accuracy']:.2f}, "
          f"ablating ground truth -> {spec.checks['ablate_designated']:.2f}; "
          f"ground truth {sorted(map(str, spec.ground_truth))}")
    return EXIT_OK


def _discover(params, data: DataDir, cfg: ExperimentConfig, desiderata: tuple[str, ...], lam: float,
              out: Path, label: str):
    out.mkdir(parents=True, exist_ok=True)
    sets = [f"{d}_train" for d in desiderata]
    prepared = [prepare(params, desideratum_for(n.rsplit("_", 1)[0], data.load(n, "train"))) for n in sets]
    dcfg = dataclasses.replace(cfg.discovery, lam=lam, seed=cfg.seed)
    result = optimize(params, prepared, dcfg)
    stamp = {**cfg.stamp(), "lam": lam, "desiderata": list(desiderata), "label": label}
    save_mask(result.mask, out / "mask_continuous.json", dcfg.threshold, stamp)
    save_mask(result.binary, out / "mask_binary.json", dcfg.threshold, stamp)
    cols = list(result.trajectory[0]) if result.trajectory else ["step"]
    write_rows_csv(result.trajectory, out / "trajectory.csv", cols, cfg.stamp())
    _dump(out / "discover.json", {**stamp, "patched": [str(c) for c in result.binary.sorted()],
                                  "n_patched": len(result.binary), "discovery": dcfg.to_dict()})
    return result


def _label(desiderata: tuple[str, ...]) -> str:
    return "full" if set(desiderata) == {"vd", "oi"} else f"{'-'.join(desiderata)}-only"


def _desiderata(args, cfg: ExperimentConfig, data: DataDir) -> tuple[str, ...]:
    chosen = tuple(args.desiderata.split(",")) if args.desiderata else cfg.desiderata
    available = {n.rsplit("_", 1)[0] for n in data.names("train")}
    missing = set(chosen) - available
    if missing:
        if not args.desiderata and available:
            chosen = tuple(d for d in chosen if d in available)
        else:
            raise ConfigError(f"no training data for desiderata {sorted(missing)} in {data.root}")
    return chosen


def cmd_discover(args, cfg: ExperimentConfig, out: Path) -> int:
    params, data = _checkpoint(args, cfg), _data(args, cfg)
    desiderata = _desiderata(args, cfg, data)
    lam = cfg.discovery.lam if args.lam is None else args.lam
    label = args.label or _label(desiderata)
    result = _discover(params, data, cfg, desiderata, lam, out, label)
    print(f"{label}: {len(result.binary)} of {params.config.n_components} components patched: "
          f"{[str(c) for c in result.binary.sorted()]}")
    return EXIT_OK


def _evaluate(params, data: DataDir, cfg: ExperimentConfig, mask_path: str, label: str, out: Path) -> dict:
    if mask_path == "identity":
        mask = BinaryMask(params.config, frozenset())
    else:
        if not Path(mask_path).exists():
            raise ConfigError(f"mask file not found: {mask_path}")
        mask = load_mask(mask_path, params.config)
    row = eval_row(params, mask, data, label)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "eval.json", {**cfg.stamp(), "mask": mask_path, **row})
    write_rows_csv([row], out / "eval.csv", TABLE_COLUMNS, cfg.stamp())
    return row


def _mask_label(path: str) -> str:
    try:
        return json.loads(Path(path).read_text()).get("label") or Path(path).parent.name
    except (OSError, json.JSONDecodeError):
        return Path(path).parent.name


def cmd_eval(args, cfg: ExperimentConfig, out: Path) -> int:
    params, data = _checkpoint(args, cfg), _data(args, cfg)
    label = args.label
    if label is None:
        label = "original" if args.mask == "identity" else _mask_label(args.mask)
    row = _evaluate(params, data, cfg, args.mask, label, out)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()
                   if k in TABLE_COLUMNS))
    if args.strict and args.mask != "identity":
        low = {k: row[k] for k in ("vd_acc", "oi_acc") if row[k] is not None and row[k] < cfg.min_acc}
        if low:
            raise ThresholdUnmet(f"accuracy below {cfg.min_acc}: {low}")
    return EXIT_OK


def _sweep_arm(job):
    ckpt, data_root, cfg_doc, desiderata, lam, out = job
    cfg = ExperimentConfig.from_dict(cfg_doc)
    params, data = load_checkpoint(ckpt), DataDir.open(data_root)
    _discover(params, data, cfg, desiderata, lam, Path(out), f"lam={lam:g}")
    row = _evaluate(params, data, cfg, str(Path(out) / "mask_binary.json"), f"lam={lam:g}", Path(out))
    return {"lam": lam, **row}


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> int:
    lambdas = tuple(float(x) for x in args.lambdas.split(",")) if args.lambdas else cfg.lambdas
    if len(lambdas) < 2:
        raise ConfigError("a sweep needs at least two lambda values")
    ckpt = args.checkpoint or cfg.checkpoint
    params, data = _checkpoint(args, cfg), _data(args, cfg)
    desiderata = _desiderata(args, cfg, data)
    del params
    jobs = [(ckpt, str(data.root), cfg.to_dict(), desiderata, lam, str(out / f"lam_{lam:g}")) for lam in lambdas]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_arm, jobs))
    else:
        rows = [_sweep_arm(j) for j in jobs]
    rows.sort(key=lambda r: r["lam"])
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out / "sweep.csv", ("lam",) + TABLE_COLUMNS[1:], cfg.stamp())
    rho = spearman([r["lam"] for r in rows], [r["n_patched"] for r in rows])
    best = approximate_minimum(rows, cfg.min_acc)
    summary = {**cfg.stamp(), "lambdas": list(lambdas), "spearman_rho": rho,
               "approximate_minimum": None if best is None else {"lam": best["lam"], "n_patched": best["n_patched"],
                                                                 "vd_acc": best["vd_acc"]}}
    _dump(out / "sweep_summary.json", summary)
    for r in rows:
        print(f"lam={r['lam']:g} patched={r['n_patched']} vd={r['vd_acc']} oi={r['oi_acc']}")
    print(f"spearman(lam, patched) = {rho:.3f}")
    if args.strict and rho > 0:
        raise ThresholdUnmet(f"patched count increases with lambda (rho={rho:.3f})")
    return EXIT_OK


def cmd_report(args, cfg: ExperimentConfig, out: Path) -> int:
    root = Path(args.runs) if args.runs else out
    rows: dict = {label: None for label in cfg.report_runs}
    for path in sorted(root.rglob("eval.json")):
        doc = json.loads(path.read_text())
        rows[doc["label"]] = doc
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(render_report(rows, cfg.stamp()))
    ordered = [rows[k] or {"label": k} for k in sorted(rows)]
    write_rows_csv(ordered, out / "report.csv", TABLE_COLUMNS, cfg.stamp())
    print((out / "report.md").read_text(), end="")
    missing = sorted(k for k, v in rows.items() if v is None)
    if missing and args.strict:
        raise ThresholdUnmet(f"missing runs: {missing}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--strict", action="store_true", default=d if suppress else False,
                   help="exit 4 when a threshold is unmet or a run is missing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitseek", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint")
    model.add_argument("--data", help="dataset directory containing manifest.json")

    p = sub.add_parser("gen-data", parents=[common], help="write train/test tuple sets")
    p.set_defaults(fn=cmd_gen_data)
    p = sub.add_parser("train-model", parents=[common], help="train the toy arithmetic model")
    p.add_argument("--resume", help="checkpoint written by an earlier (paused) run")
    p.add_argument("--until", type=int, help="pause after this many total steps")
    p.set_defaults(fn=cmd_train_model)
    p = sub.add_parser("build-planted", parents=[common], help="write the hand-wired model and its data")
    p.set_defaults(fn=cmd_build_planted)
    p = sub.add_parser("discover", parents=[common, model], help="learn a patching mask")
    p.add_argument("--desiderata", help="comma list, e.g. vd,oi or vd")
    p.add_argument("--lam", type=float)
    p.add_argument("--label")
    p.set_defaults(fn=cmd_discover)
    p = sub.add_parser("eval", parents=[common, model], help="held-out accuracies of a mask")
    p.add_argument("--mask", required=True, help="mask JSON, or 'identity' for the clean model")
    p.add_argument("--label")
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("sweep", parents=[common, model], help="discover and evaluate over lambda values")
    p.add_argument("--lambdas", help="comma list of lambda values")
    p.add_argument("--desiderata")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("report", parents=[common], help="collect eval results into one table")
    p.add_argument("--runs", help="directory searched for eval.json (default: --out)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        cfg = cfg.with_seed(cfg.seed if args.seed is None else args.seed)
        out = Path(args.out or "runs")
        return args.fn(args, cfg, out)
    except (ConfigError, ConfigMismatchError, CheckpointFormatError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ThresholdUnmet as e:
        print(f"threshold unmet: {e}", file=sys.stderr)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
