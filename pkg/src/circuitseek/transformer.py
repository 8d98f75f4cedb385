"""Pre-norm decoder-only transformer with per-component residual writes.

Every attention head and every MLP block is a component. A forward pass can
record each component's write into the residual stream at chosen positions,
and it can hand those writes to an intervention hook before they are summed
into the residual; :mod:`circuitseek.patching` uses that hook.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

from . import tensor as T
from .tensor import Tensor

RMS_EPS = 1e-5
MAGIC = b"CSEEK001"


class CheckpointFormatError(ValueError):
    """The checkpoint file is malformed."""


class ConfigMismatchError(ValueError):
    """A checkpoint's manifest disagrees with the expected configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 128
    d_mlp: int = 512
    vocab_size: int = 18
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_mlp", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_components(self) -> int:
        return self.n_layers * (self.n_heads + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, order=True)
class ComponentId:
    layer: int
    kind: str  # "head" or "mlp"
    head: int | None = None

    def __str__(self) -> str:
        return f"h{self.layer}.{self.head}" if self.kind == "head" else f"mlp{self.layer}"

    @classmethod
    def parse(cls, s: str) -> ComponentId:
        if s.startswith("mlp"):
            return cls(int(s[3:]), "mlp")
        layer, head = s[1:].split(".")
        return cls(int(layer), "head", int(head))

    def to_dict(self) -> dict:
        d = {"layer": self.layer, "kind": self.kind}
        if self.kind == "head":
            d["head"] = self.head
        return d


def enumerate_components(config: ModelConfig) -> list[ComponentId]:
    """Layer-major order, heads before the MLP within a layer."""
    out = []
    for layer in range(config.n_layers):
        out.extend(ComponentId(layer, "head", h) for h in range(config.n_heads))
        out.append(ComponentId(layer, "mlp"))
    return out


def component_index(config: ModelConfig, c: ComponentId) -> int:
    if not 0 <= c.layer < config.n_layers:
        raise IndexError(f"layer {c.layer} out of range")
    if c.kind == "mlp":
        return c.layer * (config.n_heads + 1) + config.n_heads
    if c.head is None or not 0 <= c.head < config.n_heads:
        raise IndexError(f"head {c.head} out of range")
    return c.layer * (config.n_heads + 1) + c.head


@dataclass
class LayerParams:
    ln1: Tensor  # [d]
    w_q: Tensor  # [d, H*dh]
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # [H, dh, d]
    ln2: Tensor
    w_gate: Tensor  # [d, d_mlp]
    w_up: Tensor
    w_down: Tensor  # [d_mlp, d]


LAYER_FIELDS = tuple(f.name for f in dataclasses.fields(LayerParams))


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    ln_f: Tensor
    unembed: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for f in LAYER_FIELDS:
                yield f"layers.{i}.{f}", getattr(layer, f)
        yield "ln_f", self.ln_f
        yield "unembed", self.unembed

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def requires_grad_(self, flag: bool = True) -> ModelParams:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None
        return self

    def astype(self, dtype) -> ModelParams:
        """Copy with every array cast to ``dtype`` (used for float64 gradient checks)."""
        return _from_arrays(self.config, {n: t.data.astype(dtype) for n, t in self.named()}, dtype)

    def copy(self) -> ModelParams:
        return self.astype(T.DTYPE)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, dh, m = config.d_model, config.n_heads, config.d_head, config.d_mlp
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_seq_len, d)}
    per_layer = {
        "ln1": (d,), "w_q": (d, H * dh), "w_k": (d, H * dh), "w_v": (d, H * dh),
        "w_o": (H, dh, d), "ln2": (d,), "w_gate": (d, m), "w_up": (d, m), "w_down": (m, d),
    }
    for i in range(config.n_layers):
        for f in LAYER_FIELDS:
            shapes[f"layers.{i}.{f}"] = per_layer[f]
    shapes["ln_f"] = (d,)
    shapes["unembed"] = (d, config.vocab_size)
    return shapes


def _from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray], dtype=None) -> ModelParams:
    t = lambda name: Tensor(arrays[name], dtype=dtype)  # noqa: E731
    layers = [
        LayerParams(**{f: t(f"layers.{i}.{f}") for f in LAYER_FIELDS}) for i in range(config.n_layers)
    ]
    return ModelParams(config, t("tok_emb"), t("pos_emb"), layers, t("ln_f"), t("unembed"))


def init_params(config: ModelConfig, seed: int | None = None, zero_outputs: bool = False) -> ModelParams:
    """Scaled-normal init (std 0.02; output projections additionally / sqrt(2 L)).

    ``zero_outputs`` zeroes every attention output and MLP down projection so
    that all component writes vanish.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    std = 0.02
    out_std = std / math.sqrt(2 * config.n_layers)
    arrays = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("ln1", "ln2", "ln_f"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("w_o", "w_down"):
            a = rng.normal(0.0, out_std, shape).astype(np.float32)
            arrays[name] = np.zeros_like(a) if zero_outputs else a
        else:
            arrays[name] = rng.normal(0.0, std, shape).astype(np.float32)
    return _from_arrays(config, arrays)


# ---------------------------------------------------------------------------
# forward


class Intervention(Protocol):
    """Hook receiving component writes before they enter the residual stream."""

    def heads(self, layer: int, out: Tensor) -> Tensor:  # out: [B, H, T, d]
        ...

    def mlp(self, layer: int, out: Tensor) -> Tensor:  # out: [B, T, d]
        ...


@dataclass
class ForwardTrace:
    logits: np.ndarray  # [B, T, V]
    positions: tuple[int, ...]
    contributions: dict[ComponentId, np.ndarray]  # each [B, P, d]
    base: np.ndarray  # embed + pos at recorded positions, [B, P, d]
    resid_final: np.ndarray  # residual before final norm, [B, P, d]

    def contribution(self, c: ComponentId, batch: int = 0) -> np.ndarray:
        return self.contributions[c][batch]


def _as_batch(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    return ids


def _causal_bias(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), -1e9, dtype=dtype), k=1)


def run(
    params: ModelParams,
    tokens,
    intervention: Intervention | None = None,
    record: tuple[int, ...] | None = None,
):
    """Shared forward path. Returns ``(logits Tensor [B,T,V], records | None)``."""
    cfg = params.config
    ids = _as_batch(tokens)
    B, n = ids.shape
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len={cfg.max_seq_len}")
    H, dh = cfg.n_heads, cfg.d_head
    dtype = params.tok_emb.data.dtype

    resid = T.embed(params.tok_emb, ids) + params.pos_emb[:n]
    bias = _causal_bias(n, dtype)
    inv_sqrt = 1.0 / math.sqrt(dh)
    rec = None
    if record is not None:
        pos = list(record)
        rec = {"base": resid.data[:, pos].copy(), "contrib": {}}

    for i, lp in enumerate(params.layers):
        h = T.rmsnorm(resid, lp.ln1, RMS_EPS)
        q = (h @ lp.w_q).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        k = (h @ lp.w_k).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        v = (h @ lp.w_v).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), inv_sqrt) + bias
        z = T.softmax_lastdim(scores) @ v  # [B, H, T, dh]
        heads = z @ lp.w_o  # [B, H, T, d]; w_o broadcasts over batch
        if intervention is not None:
            heads = intervention.heads(i, heads)
        if rec is not None:
            for hh in range(H):
                rec["contrib"][ComponentId(i, "head", hh)] = heads.data[:, hh][:, pos].copy()
        resid = resid + heads.sum(axis=1)

        h2 = T.rmsnorm(resid, lp.ln2, RMS_EPS)
        mlp = (T.silu(h2 @ lp.w_gate) * (h2 @ lp.w_up)) @ lp.w_down
        if intervention is not None:
            mlp = intervention.mlp(i, mlp)
        if rec is not None:
            rec["contrib"][ComponentId(i, "mlp")] = mlp.data[:, pos].copy()
        resid = resid + mlp

    if rec is not None:
        rec["resid"] = resid.data[:, pos].copy()
    logits = T.rmsnorm(resid, params.ln_f, RMS_EPS) @ params.unembed
    return logits, rec


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Logits ``[T, V]`` for a 1-D token list, ``[B, T, V]`` for a batch."""
    with T.no_grad():
        logits, _ = run(params, tokens)
    return logits.data[0] if np.ndim(tokens) == 1 else logits.data


def forward_traced(params: ModelParams, tokens, record_positions=None) -> ForwardTrace:
    ids = _as_batch(tokens)
    n = ids.shape[1]
    if record_positions is None:
        record_positions = (n - 1,)
    pos = tuple(int(p) % n if -n <= p < n else _bad_pos(p, n) for p in record_positions)
    with T.no_grad():
        logits, rec = run(params, ids, record=pos)
    order = enumerate_components(params.config)
    contributions = {c: rec["contrib"][c] for c in order}
    return ForwardTrace(logits.data, pos, contributions, rec["base"], rec["resid"])


def _bad_pos(p, n):
    raise IndexError(f"record position {p} outside sequence of length {n}")


def fused_attention_output(params: ModelParams, tokens, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """(per-head-sum, fused) attention-block outputs of ``layer`` on a clean run.

    The fused path multiplies the concatenated head outputs by the flattened
    output projection in a single matmul; the two must agree.
    """
    cfg = params.config
    ids = _as_batch(tokens)
    captured = {}

    class _Grab:
        def heads(self, i, out):
            if i == layer:
                captured["heads"] = out.data
            return out

        def mlp(self, i, out):
            return out

    # recompute z for the fused product from the same pre-norm residual
    with T.no_grad():
        run(params, ids, intervention=_Grab())
        B, n = ids.shape
        H, dh = cfg.n_heads, cfg.d_head
        resid = T.embed(params.tok_emb, ids) + params.pos_emb[:n]
        for i, lp in enumerate(params.layers):
            h = T.rmsnorm(resid, lp.ln1, RMS_EPS)
            q = (h @ lp.w_q).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            k = (h @ lp.w_k).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            v = (h @ lp.w_v).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            s = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh)) + _causal_bias(n, resid.data.dtype)
            z = T.softmax_lastdim(s) @ v
            concat = z.transpose(0, 2, 1, 3).reshape(B, n, H * dh)
            fused = concat @ lp.w_o.reshape(H * dh, cfg.d_model)
            if i == layer:
                return captured["heads"].sum(axis=1), fused.data
            resid = resid + fused
            h2 = T.rmsnorm(resid, lp.ln2, RMS_EPS)
            resid = resid + (T.silu(h2 @ lp.w_gate) * (h2 @ lp.w_up)) @ lp.w_down
    raise IndexError(f"layer {layer} out of range")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Magic, u64 manifest length, JSON manifest, then raw little-endian float32 arrays."""
    entries, blobs, offset = [], [], 0
    for name, t in params.named():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"config": params.config.to_dict(), "config_hash": params.config.hash(), "params": entries}
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_manifest(path) -> dict:
    return _read(Path(path))[0]


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelParams:
    manifest, body, body_start = _read(Path(path))
    try:
        config = ModelConfig(**manifest["config"])
    except (TypeError, ValueError, KeyError) as e:
        raise CheckpointFormatError(f"bad config block in manifest: {e}") from e
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint config {config} != expected {expected_config}")
    shapes = expected_shapes(config)
    entries = {e["name"]: e for e in manifest.get("params", [])}
    if set(entries) != set(shapes):
        missing = sorted(set(shapes) ^ set(entries))
        raise ConfigMismatchError(f"manifest parameter names disagree with config: {missing[:5]}")
    arrays = {}
    for name, shape in shapes.items():
        e = entries[name]
        if tuple(e["shape"]) != shape:
            raise ConfigMismatchError(f"{name}: manifest shape {tuple(e['shape'])} but config implies {shape}")
        nbytes = 4 * int(np.prod(shape))
        lo = e["offset"]
        if lo < 0 or lo + nbytes > len(body):
            raise CheckpointFormatError(
                f"{name}: data at byte offset {body_start + lo} runs past end of file "
                f"({body_start + len(body)} bytes)"
            )
        arrays[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=lo).reshape(shape).astype(np.float32)
    return _from_arrays(config, arrays)


def _read(path: Path) -> tuple[dict, bytes, int]:
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointFormatError(f"bad magic at offset 0: {blob[:8]!r}")
    if len(blob) < 16:
        raise CheckpointFormatError(f"truncated header at offset 8 (file is {len(blob)} bytes)")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise CheckpointFormatError(f"manifest of {n} bytes at offset 16 runs past end of file ({len(blob)} bytes)")
    try:
        manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"manifest at offset 16 is not valid JSON: {e}") from e
    return manifest, blob[16 + n :], 16 + n
