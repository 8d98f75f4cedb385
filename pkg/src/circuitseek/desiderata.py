"""Desiderata, their losses, and the alternating mask optimizer."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .patching import (
    AlternateCache,
    BinaryMask,
    Mask,
    binary_forward,
    cache_alternate,
    masked_forward,
    round_mask,
)
from .optim import Adam
from .tensor import ContractError, Tensor
from .transformer import ModelParams

log = logging.getLogger(__name__)

CHANGE = "change-to-alternate"
PRESERVE = "preserve-original"


class NumericalAbort(RuntimeError):
    """The mask objective became non-finite."""


@dataclass(frozen=True)
class DesiderataTuple:
    orig: tuple[int, ...]
    alt: tuple[int, ...]
    target: int
    competing: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "orig", tuple(int(t) for t in self.orig))
        object.__setattr__(self, "alt", tuple(int(t) for t in self.alt))
        if len(self.orig) != len(self.alt):
            raise ValueError(f"orig and alt lengths differ: {len(self.orig)} vs {len(self.alt)}")
        if self.orig[-1] != self.alt[-1]:
            raise ValueError("orig and alt must share their final token")
        if self.target == self.competing:
            raise ValueError(f"target and competing token coincide ({self.target})")


@dataclass
class Desideratum:
    name: str
    tuples: list[DesiderataTuple]
    direction: str = CHANGE
    positions: tuple[int, ...] = (-1,)

    def __post_init__(self):
        if self.direction not in (CHANGE, PRESERVE):
            raise ValueError(f"unknown direction {self.direction!r}")

    def __len__(self) -> int:
        return len(self.tuples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if not self.tuples:
            raise ContractError(f"desideratum {self.name!r} has no tuples")
        o = np.array([t.orig for t in self.tuples], dtype=np.int64)
        a = np.array([t.alt for t in self.tuples], dtype=np.int64)
        tgt = np.array([t.target for t in self.tuples], dtype=np.int64)
        comp = np.array([t.competing for t in self.tuples], dtype=np.int64)
        return o, a, tgt, comp


@dataclass
class Prepared:
    """A desideratum with its alternate caches built (one batched cache)."""

    desideratum: Desideratum
    orig: np.ndarray
    targets: np.ndarray
    competing: np.ndarray
    cache: AlternateCache

    @property
    def name(self) -> str:
        return self.desideratum.name

    def subset(self, idx: np.ndarray) -> Prepared:
        c = self.cache
        sub_cache = AlternateCache(
            c.alt_tokens[idx], c.positions, [h[idx] for h in c.heads], [m[idx] for m in c.mlps],
            c.alt_logits[idx], c.components,
        )
        return Prepared(self.desideratum, self.orig[idx], self.targets[idx], self.competing[idx], sub_cache)


def prepare(params: ModelParams, d: Desideratum) -> Prepared:
    o, a, tgt, comp = d.arrays()
    V = params.config.vocab_size
    if tgt.max() >= V or comp.max() >= V or min(tgt.min(), comp.min()) < 0:
        raise IndexError(f"target/competing token outside vocabulary of size {V}")
    cache = cache_alternate(params, a, d.positions, orig_tokens=o)
    return Prepared(d, o, tgt, comp, cache)


@dataclass
class DiscoveryConfig:
    lam: float = 0.03
    lr: float = 0.01
    steps_per_desideratum: int = 1
    rounds: int = 400
    init_weight: float = 0.95
    clamp: tuple[float, float] = (0.0, 1.0)
    reg_eps: float = 1e-6
    threshold: float = 0.5
    seed: int = 0
    alternate: bool = True  # False: one step on the summed objective
    batch_size: int | None = None  # None: every tuple in every step
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 < self.init_weight <= 1.0:
            raise ValueError("init_weight must lie in (0, 1]")
        if self.reg_eps <= 0:
            raise ValueError("reg_eps must be positive")
        self.clamp = tuple(self.clamp)
        self.betas = tuple(self.betas)

    @classmethod
    def from_json(cls, path) -> DiscoveryConfig:
        doc = json.loads(Path(path).read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown discovery config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["clamp"], d["betas"] = list(self.clamp), list(self.betas)
        return d


# ---------------------------------------------------------------------------
# losses


def _logit_gap(logits: Tensor, targets: np.ndarray, competing: np.ndarray) -> Tensor:
    rows = np.arange(logits.shape[0])
    return logits[rows, competing] - logits[rows, targets]


def tuple_loss(params: ModelParams, mask: Mask, tup: DesiderataTuple, cache: AlternateCache | None = None) -> Tensor:
    """``logit(competing) - logit(target)`` at the final position under ``mask``."""
    V = params.config.vocab_size
    if not (0 <= tup.target < V and 0 <= tup.competing < V):
        raise IndexError(f"target/competing token outside vocabulary of size {V}")
    if cache is None:
        cache = cache_alternate(params, [tup.alt], mask.positions, orig_tokens=[tup.orig])
    logits = masked_forward(params, [tup.orig], cache, mask)
    return _logit_gap(logits, np.array([tup.target]), np.array([tup.competing])).sum()


def desideratum_loss(params: ModelParams, mask: Mask, prepared: Prepared | Desideratum) -> Tensor:
    """Mean tuple loss over the desideratum."""
    if isinstance(prepared, Desideratum):
        prepared = prepare(params, prepared)
    if prepared.orig.shape[0] == 0:
        raise ContractError("desideratum has no tuples")
    logits = masked_forward(params, prepared.orig, prepared.cache, mask)
    return _logit_gap(logits, prepared.targets, prepared.competing).mean()


def regularizer(weights: Tensor, lam: float, eps: float = 1e-6) -> Tensor:
    """``lam * sum(sqrt(1 - w + eps)) - lam * N * sqrt(eps)``: zero when nothing is patched."""
    if lam < 0 or eps <= 0:
        raise ValueError("need lam >= 0 and eps > 0")
    n = weights.size
    root = T.power((1.0 - weights) + eps, 0.5)
    return T.scale(root.sum(), lam) - lam * n * math.sqrt(eps)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class DiscoveryResult:
    mask: Mask
    binary: BinaryMask
    trajectory: list[dict]
    config: DiscoveryConfig

    def write_trajectory(self, path) -> None:
        write_trajectory(self.trajectory, path)


def write_trajectory(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def optimize(
    params: ModelParams,
    desiderata: Sequence[Desideratum | Prepared],
    config: DiscoveryConfig | None = None,
    check_clamp: bool = True,
) -> DiscoveryResult:
    """Learn a sparse patching mask satisfying every desideratum.

    Each round takes ``steps_per_desideratum`` Adam steps on each desideratum
    in turn, each step minimizing that desideratum's loss plus the sparsity
    penalty; weights are clamped to ``config.clamp`` after every step.
    """
    config = config or DiscoveryConfig()
    if not desiderata:
        raise ContractError("optimize needs at least one desideratum")
    params.requires_grad_(False)
    prepared = [d if isinstance(d, Prepared) else prepare(params, d) for d in desiderata]
    positions = {p.cache.positions for p in prepared}
    if len(positions) != 1:
        raise ContractError(f"desiderata disagree on patch positions: {positions}")
    (pos,) = positions
    rng = np.random.default_rng(config.seed)

    mask = Mask.full(params.config, config.init_weight, positions=pos, requires_grad=True)
    opt = Adam([mask.weights], config.lr, config.betas, config.adam_eps)
    lo, hi = config.clamp
    latest = {p.name: float("nan") for p in prepared}
    rows: list[dict] = []
    last_ok = None

    def batch_of(p: Prepared) -> Prepared:
        if config.batch_size is None or config.batch_size >= p.orig.shape[0]:
            return p
        return p.subset(np.sort(rng.choice(p.orig.shape[0], config.batch_size, replace=False)))

    schedule = (
        [[p] for p in prepared for _ in range(config.steps_per_desideratum)]
        if config.alternate
        else [prepared] * config.steps_per_desideratum
    )
    step = 0
    for _ in range(config.rounds):
        for group in schedule:
            mask.weights.grad = None
            losses = [desideratum_loss(params, mask, batch_of(p)) for p in group]
            reg = regularizer(mask.weights, config.lam, config.reg_eps)
            total = reg
            for loss in losses:
                total = total + loss
            if not np.isfinite(total.data).all():
                raise NumericalAbort(
                    f"non-finite objective at step {step}; last finite step: {last_ok}"
                )
            for p, loss in zip(group, losses):
                latest[p.name] = float(loss.data)
            reg_value = float(reg.data)
            T.backward(total)
            opt.step()
            mask.clamp_(lo, hi)
            if check_clamp:
                assert lo <= mask.weights.data.min() and mask.weights.data.max() <= hi
            row = {"step": step, "desideratum": "+".join(p.name for p in group)}
            row.update({f"loss_{k}": v for k, v in latest.items()})
            row["regularizer"] = reg_value
            row["n_below_half"] = int((mask.weights.data < 0.5).sum())
            rows.append(row)
            last_ok = {"step": step, **{k: v for k, v in row.items() if k != "step"}}
            step += 1

    mask.weights.requires_grad = False
    mask.weights.grad = None
    binary = round_mask(mask, config.threshold)
    log.info("discovery finished: %d components patched", len(binary))
    return DiscoveryResult(mask, binary, rows, config)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_accuracy(params: ModelParams, mask: BinaryMask | Mask, tuples: Prepared | Desideratum) -> float:
    """Fraction of tuples whose patched final-position argmax equals the target."""
    prepared = tuples if isinstance(tuples, Prepared) else prepare(params, tuples)
    with T.no_grad():
        if isinstance(mask, BinaryMask):
            logits = binary_forward(params, prepared.orig, prepared.cache, mask)
        else:
            plain = Mask(mask.config, Tensor(mask.weights.data), mask.positions)
            logits = masked_forward(params, prepared.orig, prepared.cache, plain).data
    return float((logits.argmax(axis=-1) == prepared.targets).mean())
