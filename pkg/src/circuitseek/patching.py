"""Masked activation patching.

At each patched position every component's freshly computed write ``v`` is
replaced by ``w * v + (1 - w) * v_alt`` before it joins the residual stream,
so later components see the already-intervened residual. ``v_alt`` comes from
a clean run on the alternate sequence and is cached once per tuple.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .transformer import (
    ComponentId,
    ModelConfig,
    ModelParams,
    component_index,
    enumerate_components,
    forward_traced,
    run,
)


class AlignmentError(ValueError):
    """Original and alternate sequences cannot be patched position-by-position."""


def _normalize_positions(positions, n: int) -> tuple[int, ...]:
    out = []
    for p in positions:
        if not -n <= p < n:
            raise AlignmentError(f"patch position {p} outside sequence of length {n}")
        out.append(int(p) % n)
    return tuple(sorted(set(out)))


@dataclass
class AlternateCache:
    """Clean alternate-run writes at the patched positions, batched over tuples."""

    alt_tokens: np.ndarray  # [B, T]
    positions: tuple[int, ...]
    heads: list[np.ndarray]  # per layer [B, H, P, d]
    mlps: list[np.ndarray]  # per layer [B, P, d]
    alt_logits: np.ndarray  # [B, V] at the final position
    components: frozenset = field(default_factory=frozenset)

    @property
    def batch(self) -> int:
        return self.alt_tokens.shape[0]

    def get(self, c: ComponentId) -> np.ndarray:
        """``[B, P, d]`` cached write of ``c``."""
        if c not in self.components:
            raise KeyError(c)
        return self.heads[c.layer][:, c.head] if c.kind == "head" else self.mlps[c.layer]

    def as_dict(self, batch: int = 0) -> dict[ComponentId, np.ndarray]:
        return {c: self.get(c)[batch] for c in sorted(self.components, key=lambda c: (c.layer, c.kind != "head", c.head or 0))}

    @classmethod
    def zeros(cls, config: ModelConfig, alt_tokens, positions=(-1,)) -> AlternateCache:
        """All-zero writes; patching with it at w=0 is zero-ablation."""
        ids = np.atleast_2d(np.asarray(alt_tokens, dtype=np.int64))
        B, n = ids.shape
        pos = _normalize_positions(positions, n)
        d, H, P = config.d_model, config.n_heads, len(pos)
        return cls(
            ids,
            pos,
            [np.zeros((B, H, P, d), np.float32) for _ in range(config.n_layers)],
            [np.zeros((B, P, d), np.float32) for _ in range(config.n_layers)],
            np.zeros((B, config.vocab_size), np.float32),
            frozenset(enumerate_components(config)),
        )


def check_alignment(orig_tokens, alt_tokens, positions) -> tuple[int, ...]:
    o = np.atleast_2d(np.asarray(orig_tokens))
    a = np.atleast_2d(np.asarray(alt_tokens))
    if o.shape != a.shape:
        raise AlignmentError(f"original {o.shape} and alternate {a.shape} token arrays differ in shape")
    pos = _normalize_positions(positions, o.shape[1])
    bad = np.nonzero((o[:, list(pos)] != a[:, list(pos)]).any(axis=1))[0]
    if bad.size:
        raise AlignmentError(f"tokens differ at patched positions {pos} for tuple(s) {bad[:5].tolist()}")
    return pos


def cache_alternate(params: ModelParams, alt_tokens, positions=(-1,), orig_tokens=None) -> AlternateCache:
    ids = np.atleast_2d(np.asarray(alt_tokens, dtype=np.int64))
    if orig_tokens is not None:
        pos = check_alignment(orig_tokens, ids, positions)
    else:
        pos = _normalize_positions(positions, ids.shape[1])
    trace = forward_traced(params, ids, pos)
    cfg = params.config
    heads, mlps = [], []
    for layer in range(cfg.n_layers):
        heads.append(np.stack([trace.contributions[ComponentId(layer, "head", h)] for h in range(cfg.n_heads)], axis=1))
        mlps.append(trace.contributions[ComponentId(layer, "mlp")])
    return AlternateCache(ids, pos, heads, mlps, trace.logits[:, -1].copy(), frozenset(trace.contributions))


@dataclass
class Mask:
    """Continuous per-component weights; 1 keeps the component, 0 fully patches it."""

    config: ModelConfig
    weights: Tensor  # [n_components], ordered as enumerate_components
    positions: tuple[int, ...] = (-1,)

    @classmethod
    def full(cls, config: ModelConfig, value: float = 1.0, positions=(-1,), requires_grad: bool = False) -> Mask:
        w = Tensor(np.full(config.n_components, value, np.float32), requires_grad=requires_grad)
        return cls(config, w, tuple(positions))

    @classmethod
    def from_dict(cls, config: ModelConfig, weights: dict[ComponentId, float], default: float = 1.0, positions=(-1,)) -> Mask:
        m = cls.full(config, default, positions)
        for c, w in weights.items():
            m.weights.data[component_index(config, c)] = w
        return m

    @property
    def components(self) -> list[ComponentId]:
        return enumerate_components(self.config)

    def as_dict(self) -> dict[ComponentId, float]:
        return {c: float(w) for c, w in zip(self.components, self.weights.data)}

    def clamp_(self, lo: float = 0.0, hi: float = 1.0) -> None:
        np.clip(self.weights.data, lo, hi, out=self.weights.data)


@dataclass(frozen=True)
class BinaryMask:
    config: ModelConfig
    patched: frozenset  # ComponentIds with w = 0
    positions: tuple[int, ...] = (-1,)

    def __post_init__(self):
        known = set(enumerate_components(self.config))
        extra = set(self.patched) - known
        if extra:
            raise ValueError(f"patched set contains unknown components: {sorted(map(str, extra))}")

    def to_mask(self) -> Mask:
        return Mask.from_dict(self.config, {c: 0.0 for c in self.patched}, positions=self.positions)

    def sorted(self) -> list[ComponentId]:
        order = enumerate_components(self.config)
        return [c for c in order if c in self.patched]

    def __len__(self) -> int:
        return len(self.patched)


def round_mask(mask: Mask, threshold: float = 0.5) -> BinaryMask:
    """Strictly-below-threshold weights become patched (0); the rest become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    patched = frozenset(c for c, w in zip(mask.components, mask.weights.data) if w < threshold)
    return BinaryMask(mask.config, patched, mask.positions)


class _Blend:
    """Replace ``w*v + (1-w)*v_alt`` at the patched positions, leaving the rest as is."""

    def __init__(self, cfg: ModelConfig, weights: Tensor, cache: AlternateCache):
        self.cfg, self.w, self.cache = cfg, weights, cache
        self.pos = list(cache.positions)

    def heads(self, layer: int, out: Tensor) -> Tensor:
        H = self.cfg.n_heads
        start = layer * (H + 1)
        patch_amt = (1.0 - self.w[start : start + H]).reshape(1, H, 1, 1)
        return T.blend_positions(out, self.cache.heads[layer], patch_amt, self.pos)

    def mlp(self, layer: int, out: Tensor) -> Tensor:
        i = layer * (self.cfg.n_heads + 1) + self.cfg.n_heads
        patch_amt = (1.0 - self.w[i : i + 1]).reshape(1, 1, 1)
        return T.blend_positions(out, self.cache.mlps[layer], patch_amt, self.pos)


def masked_forward(params: ModelParams, orig_tokens, cache: AlternateCache, mask: Mask) -> Tensor:
    """Final-position logits ``[B, V]`` of the original run under ``mask``.

    Gradients flow into ``mask.weights`` when it requires grad.
    """
    ids = np.atleast_2d(np.asarray(orig_tokens, dtype=np.int64))
    if ids.shape[0] != cache.batch:
        raise AlignmentError(f"{ids.shape[0]} original sequences but cache holds {cache.batch}")
    pos = check_alignment(ids, cache.alt_tokens, cache.positions)
    mpos = _normalize_positions(mask.positions, ids.shape[1])
    if pos != mpos:
        raise AlignmentError(f"cache positions {pos} differ from mask positions {mpos}")
    w = mask.weights
    wdata = w.data
    if np.any(wdata < 0) or np.any(wdata > 1):
        raise ContractError("mask weights must lie in [0, 1]")
    missing = [c for c, x in zip(mask.components, wdata) if x < 1 and c not in cache.components]
    if missing:
        raise ContractError(f"no cached alternate value for patched component(s) {[str(c) for c in missing]}")
    blend = _Blend(params.config, w, cache)
    logits, _ = run(params, ids, intervention=blend)
    return logits[:, -1, :]


def binary_forward(params: ModelParams, orig_tokens, cache: AlternateCache, binary: BinaryMask) -> np.ndarray:
    with T.no_grad():
        return masked_forward(params, orig_tokens, cache, binary.to_mask()).data


# ---------------------------------------------------------------------------
# mask files


def mask_to_json(mask: Mask | BinaryMask, threshold: float = 0.5, extra: dict | None = None) -> dict:
    if isinstance(mask, BinaryMask):
        cfg = mask.config
        weights = [0.0 if c in mask.patched else 1.0 for c in enumerate_components(cfg)]
        kind = "binary"
    else:
        cfg = mask.config
        weights = [float(x) for x in mask.weights.data]
        kind = "continuous"
    entries = []
    for c, x in zip(enumerate_components(cfg), weights):
        entries.append({**c.to_dict(), "weight": x})
    doc = {"config_hash": cfg.hash(), "kind": kind, "threshold": threshold, "positions": list(mask.positions), "entries": entries}
    if extra:
        doc.update(extra)
    return doc


def save_mask(mask: Mask | BinaryMask, path, threshold: float = 0.5, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(mask_to_json(mask, threshold, extra), indent=1, sort_keys=True) + "\n")


def load_mask(path, config: ModelConfig) -> Mask | BinaryMask:
    doc = json.loads(Path(path).read_text())
    if doc.get("config_hash") != config.hash():
        raise ValueError(f"mask {path} was learned for config {doc.get('config_hash')}, not {config.hash()}")
    weights = {}
    for e in doc["entries"]:
        c = ComponentId(e["layer"], e["kind"], e.get("head"))
        weights[c] = e["weight"]
    positions = tuple(doc.get("positions", (-1,)))
    if doc.get("kind") == "binary":
        return BinaryMask(config, frozenset(c for c, x in weights.items() if x == 0.0), positions)
    return Mask.from_dict(config, weights, positions=positions)
