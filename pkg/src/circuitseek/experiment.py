"""Experiment configuration, dataset splits with manifests, and result tables.

Everything the CLI writes passes through here so that each artifact carries
the experiment hash and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .desiderata import DesiderataTuple, Desideratum, DiscoveryConfig, evaluate_accuracy, prepare
from .patching import BinaryMask, Mask, round_mask
from .tasks.arithmetic import (
    gen_oi_tuples,
    gen_vd_tuples,
    oi_desideratum,
    read_jsonl,
    vd_desideratum,
    write_jsonl,
)
from .tasks.training import CorpusSpec, default_model_config
from .transformer import ModelConfig, ModelParams

TABLE_COLUMNS = ("label", "vd_acc", "oi_acc", "vd_x_acc", "oi_px_acc", "n_patched")
SET_COLUMN = {"vd": "vd_acc", "oi": "oi_acc", "vd_x": "vd_x_acc", "oi_px": "oi_px_acc"}
GAP = "MISSING"


class ConfigError(ValueError):
    """Bad or inconsistent experiment configuration (CLI exit code 2)."""


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class DataSpec:
    n_train: int = 90
    n_test: int = 90
    vd_ops: tuple[str, ...] = ("+", "-")
    oi_pairs: tuple[tuple[str, str], ...] = (("+", "-"),)
    transfer_vd_ops: tuple[str, ...] = ("*",)
    transfer_oi_pairs: tuple[tuple[str, str], ...] = (("+", "*"),)

    def __post_init__(self):
        self.vd_ops = tuple(self.vd_ops)
        self.transfer_vd_ops = tuple(self.transfer_vd_ops)
        self.oi_pairs = tuple(tuple(p) for p in self.oi_pairs)
        self.transfer_oi_pairs = tuple(tuple(p) for p in self.transfer_oi_pairs)
        if self.n_train < 9 or self.n_test < 9:
            raise ConfigError("n_train and n_test must be at least 9")


def _build(cls, doc: dict | None, where: str):
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=default_model_config)
    training: CorpusSpec = field(default_factory=CorpusSpec)
    data: DataSpec = field(default_factory=DataSpec)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    desiderata: tuple[str, ...] = ("vd", "oi")
    lambdas: tuple[float, ...] = (0.0, 0.01, 0.03, 0.1, 0.3, 1000.0)
    min_acc: float = 0.8
    checkpoint: str | None = None
    data_dir: str | None = None
    report_runs: tuple[str, ...] = ("original", "full", "vd-only")

    SECTIONS = {"model": ModelConfig, "training": CorpusSpec, "data": DataSpec, "discovery": DiscoveryConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        doc = dict(doc)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        kw = {}
        for key, value in doc.items():
            if key in cls.SECTIONS:
                base = dataclasses.asdict(getattr(cls(), key)) if key == "model" else {}
                kw[key] = _build(cls.SECTIONS[key], {**base, **value}, key)
            elif key in ("desiderata", "lambdas", "report_runs"):
                kw[key] = tuple(value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> ExperimentConfig:
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    def validate(self) -> None:
        bad = set(self.desiderata) - {"vd", "oi"}
        if not self.desiderata or bad:
            raise ConfigError(f"desiderata must be drawn from vd, oi: {self.desiderata}")
        if not 0.0 <= self.min_acc <= 1.0:
            raise ConfigError("min_acc must lie in [0, 1]")

    def with_seed(self, seed: int) -> ExperimentConfig:
        return dataclasses.replace(
            self,
            seed=seed,
            model=dataclasses.replace(self.model, seed=seed),
            discovery=dataclasses.replace(self.discovery, seed=seed),
        )

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in self.SECTIONS:
                v = v.to_dict() if hasattr(v, "to_dict") else dataclasses.asdict(v)
            out[f.name] = v
        return json.loads(json.dumps(out))

    def hash(self) -> str:
        return _sha(json.dumps(self.to_dict(), sort_keys=True).encode())[:16]

    def stamp(self) -> dict:
        return {"experiment_hash": self.hash(), "seed": self.seed}


# ---------------------------------------------------------------------------
# datasets


def _key(t: DesiderataTuple) -> tuple:
    return (t.orig, t.alt)


def _disjoint_sample(pool: list[DesiderataTuple], taken: set, count: int) -> list[DesiderataTuple]:
    """Take ``count`` tuples not in ``taken``, round-robin over target digits."""
    by_target = defaultdict(list)
    seen = set(taken)
    for t in pool:
        if _key(t) not in seen:
            seen.add(_key(t))
            by_target[t.target].append(t)
    out = []
    while len(out) < count and any(by_target.values()):
        for tgt in sorted(by_target):
            if by_target[tgt] and len(out) < count:
                out.append(by_target[tgt].pop(0))
    if len(out) < count:
        raise ConfigError(f"could only draw {len(out)} of {count} held-out tuples disjoint from training")
    return out


def generate_sets(spec: DataSpec, rng: np.random.Generator) -> dict[str, list[DesiderataTuple]]:
    """Train/test sets for both desiderata plus the two transfer test sets."""
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=6)]
    vd_train = gen_vd_tuples(spec.n_train, spec.vd_ops, seeds[0])
    oi_train = gen_oi_tuples(spec.n_train, spec.oi_pairs, seeds[1])
    taken = {_key(t) for t in vd_train + oi_train}
    return {
        "vd_train": vd_train,
        "oi_train": oi_train,
        "vd_test": _disjoint_sample(gen_vd_tuples(3 * spec.n_test, spec.vd_ops, seeds[2]), taken, spec.n_test),
        "oi_test": _disjoint_sample(gen_oi_tuples(3 * spec.n_test, spec.oi_pairs, seeds[3]), taken, spec.n_test),
        "vd_x_test": gen_vd_tuples(spec.n_test, spec.transfer_vd_ops, seeds[4]),
        "oi_px_test": gen_oi_tuples(spec.n_test, spec.transfer_oi_pairs, seeds[5]),
    }


def write_sets(sets: dict[str, list[DesiderataTuple]], out_dir: Path, stamp: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(sets):
        path = out_dir / f"{name}.jsonl"
        write_jsonl(sets[name], path, header={**stamp, "set": name})
        stem, split = name.rsplit("_", 1)
        files[name] = {"file": path.name, "set": stem, "split": split, "count": len(sets[name]),
                       "sha256": _sha(path.read_bytes())}
    manifest = {**stamp, "files": files}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class DataDir:
    root: Path
    manifest: dict

    @classmethod
    def open(cls, root: str | Path) -> DataDir:
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise ConfigError(f"no dataset manifest at {path}")
        return cls(root, json.loads(path.read_text()))

    def names(self, split: str) -> list[str]:
        return sorted(n for n, e in self.manifest["files"].items() if e["split"] == split)

    def load(self, name: str, split: str) -> list[DesiderataTuple]:
        entry = self.manifest["files"].get(name)
        if entry is None:
            raise ConfigError(f"dataset {name!r} not listed in {self.root / 'manifest.json'}")
        if entry["split"] != split:
            raise ConfigError(f"{name} is a {entry['split']} split; refusing to use it as {split}")
        path = self.root / entry["file"]
        if not path.exists():
            raise ConfigError(f"dataset file missing: {path}")
        if _sha(path.read_bytes()) != entry["sha256"]:
            raise ConfigError(f"{path} does not match its manifest checksum")
        tuples = read_jsonl(path)
        if split == "test":
            train = {_key(t) for n in self.names("train") for t in read_jsonl(self.root / self.manifest["files"][n]["file"])}
            leaked = sum(_key(t) in train for t in tuples)
            if leaked:
                raise ConfigError(f"{name} shares {leaked} tuples with training data")
        return tuples


def desideratum_for(set_name: str, tuples: list[DesiderataTuple]) -> Desideratum:
    kind = set_name.split("_", 1)[0]
    return vd_desideratum(tuples, set_name) if kind == "vd" else oi_desideratum(tuples, set_name)


# ---------------------------------------------------------------------------
# results


def eval_row(params: ModelParams, mask: Mask | BinaryMask, data: DataDir, label: str) -> dict:
    """Held-out accuracies for every test set present; absent columns are ``None``."""
    binary = round_mask(mask) if isinstance(mask, Mask) else mask
    row: dict = {c: None for c in TABLE_COLUMNS}
    row.update(label=label, n_patched=len(binary), n_components=params.config.n_components)
    continuous: dict = {}
    for name in data.names("test"):
        stem = name.rsplit("_", 1)[0]
        if stem not in SET_COLUMN:
            continue
        prepared = prepare(params, desideratum_for(name, data.load(name, "test")))
        row[SET_COLUMN[stem]] = evaluate_accuracy(params, binary, prepared)
        if isinstance(mask, Mask):
            continuous[SET_COLUMN[stem]] = evaluate_accuracy(params, mask, prepared)
    if continuous:
        row["continuous"] = continuous
    return row


def _fmt(v, spec: str = ".4f") -> str:
    if v is None:
        return GAP
    if isinstance(v, float):
        return format(v, spec)
    return str(v)


def write_rows_csv(rows: Iterable[dict], path: Path, columns: Iterable[str], stamp: dict) -> None:
    columns = list(columns) + ["experiment_hash", "seed"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            full = {**r, **stamp}
            w.writerow([_fmt(full.get(c), ".10g") for c in columns])


def spearman(xs: list[float], ys: list[float]) -> float:
    from scipy.stats import spearmanr

    if len(set(ys)) < 2:
        return 0.0
    return float(spearmanr(xs, ys).statistic)


def approximate_minimum(rows: list[dict], min_acc: float) -> dict | None:
    """Sweep arm with the fewest patched components whose VD accuracy clears ``min_acc``."""
    ok = [r for r in rows if r.get("vd_acc") is not None and r["vd_acc"] >= min_acc]
    return min(ok, key=lambda r: (r["n_patched"], -r["vd_acc"])) if ok else None


def render_report(rows: dict[str, dict | None], stamp: dict, oi_gap_ref: float = 0.2,
                  transfer_ref: float = 0.7) -> str:
    """Markdown table plus comparison notes; ``None`` rows become gap markers."""
    lines = [
        "# Patching results",
        "",
        f"experiment hash `{stamp['experiment_hash']}`, seed {stamp['seed']}",
        "",
        "| run | VD acc | OI acc | VD-x acc | OI-(+,x) acc | # patched |",
        "|---|---|---|---|---|---|",
    ]
    for label in sorted(rows):
        r = rows[label] or {}
        cells = [_fmt(r.get(c)) for c in TABLE_COLUMNS[1:]]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    full, vd_only = rows.get("full"), rows.get("vd-only")
    lines += ["", "## Incomplete desiderata"]
    if full and vd_only and full.get("oi_acc") is not None and vd_only.get("oi_acc") is not None:
        gap = full["oi_acc"] - vd_only["oi_acc"]
        lines.append(f"OI accuracy, full minus vd-only: {100 * gap:.1f} pp "
                     f"(VD {_fmt(full.get('vd_acc'))} vs {_fmt(vd_only.get('vd_acc'))})")
        if gap < oi_gap_ref:
            lines.append(f"Divergence note: the OI gap is below the {100 * oi_gap_ref:.0f} pp reference; "
                         "on this model VD-only masks already preserve the operation.")
    else:
        lines.append(f"comparison unavailable: {GAP} run")
    if full:
        lines += ["", "## Transfer"]
        for col, name in (("vd_x_acc", "VD-x"), ("oi_px_acc", "OI-(+,x)")):
            v = full.get(col)
            if v is None:
                lines.append(f"{name}: {GAP}")
            else:
                verdict = "meets" if v >= transfer_ref else "below"
                lines.append(f"{name}: {v:.4f} ({verdict} the {transfer_ref:.0%} soft target)")
    return "\n".join(lines) + "\n"
