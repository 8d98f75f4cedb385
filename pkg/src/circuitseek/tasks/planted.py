"""Hand-wired two-layer attention-only model with a single copying head.

Task: ``x = d1 d2 ; y = e1 e2 ; x = ?`` -> ``d1``. Residual layout (d_model 96):

    [0, 18)   token one-hot
    [18, 34)  position one-hot
    [34, 44)  answer subspace, one dim per digit; the unembedding reads only this
    [44, 60)  scratch subspace that nothing reads

Head ``h1.2`` queries from the final position to position 2 (``d1``) with
positional keys and copies the token one-hot into the answer subspace. Every
other head is a distractor: it attends elsewhere from the final position and
either writes a weak copy of a ``y`` digit into the answer subspace or writes
into scratch. One distractor reads ``d1`` itself but writes only to scratch, so
discovery has to tell "depends on x" apart from "matters for the output".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..desiderata import DesiderataTuple
from ..patching import AlternateCache, Mask, masked_forward
from ..tensor import no_grad
from ..transformer import ComponentId, ModelConfig, ModelParams, _from_arrays, expected_shapes, forward
from .arithmetic import RECALL_LEN, VOCAB_SIZE, digit_token, gen_recall_tuples, render_recall, tokenize

TOK0, POS0, ANS0, SCRATCH0 = 0, 18, 34, 44
FINAL = RECALL_LEN - 1
D1_POS, D2_POS, E1_POS, E2_POS = 2, 3, 7, 8
DESIGNATED = ComponentId(1, "head", 2)

# (layer, head) -> (attended position, destination, output scale)
DISTRACTORS = {
    (0, 0): (E1_POS, "answer", 0.2),
    (0, 1): (D1_POS, "scratch", 1.0),
    (0, 2): (D2_POS, "scratch", 1.0),
    (0, 3): (E2_POS, "answer", 0.15),
    (0, 4): (5, "scratch", 0.5),
    (0, 5): (E1_POS, "scratch", 0.7),
    (1, 0): (E2_POS, "scratch", 0.6),
    (1, 1): (E1_POS, "answer", 0.25),
    (1, 3): (D2_POS, "answer", 0.1),
    (1, 4): (10, "scratch", 0.5),
    (1, 5): (0, "scratch", 0.3),
}


class ConstructionError(RuntimeError):
    """The planted model failed one of its self-checks."""


@dataclass
class PlantedSpec:
    params: ModelParams
    ground_truth: frozenset
    tuples: list[DesiderataTuple]
    checks: dict = field(default_factory=dict)


def planted_config() -> ModelConfig:
    return ModelConfig(n_layers=2, n_heads=6, d_model=96, d_mlp=4, vocab_size=VOCAB_SIZE, max_seq_len=16, seed=0)


def _wire_head(arrays, cfg: ModelConfig, layer: int, head: int, src: int, dest: str, scale: float,
               qk: float = 6.0) -> None:
    dh = cfg.d_head
    cols = slice(head * dh, (head + 1) * dh)
    wq = arrays[f"layers.{layer}.w_q"][:, cols]
    wk = arrays[f"layers.{layer}.w_k"][:, cols]
    wv = arrays[f"layers.{layer}.w_v"][:, cols]
    wo = arrays[f"layers.{layer}.w_o"][head]
    wq[POS0 + FINAL, 0] = qk
    wk[POS0 + src, 0] = qk
    base = ANS0 if dest == "answer" else SCRATCH0
    # rmsnorm inflates a two-hot embedding row to sqrt(d_model / 2) per active dim
    unit = 1.0 / np.sqrt(cfg.d_model / 2)
    for digit in range(10):
        wv[TOK0 + digit, digit] = unit
        wo[digit, base + digit] = scale


def _build_params() -> ModelParams:
    cfg = planted_config()
    arrays = {name: np.zeros(shape, np.float32) for name, shape in expected_shapes(cfg).items()}
    for v in range(cfg.vocab_size):
        arrays["tok_emb"][v, TOK0 + v] = 1.0
    for p in range(cfg.max_seq_len):
        arrays["pos_emb"][p, POS0 + p] = 1.0
    for name in ("ln_f", "layers.0.ln1", "layers.0.ln2", "layers.1.ln1", "layers.1.ln2"):
        arrays[name][:] = 1.0
    for digit in range(10):
        arrays["unembed"][ANS0 + digit, digit_token(digit)] = 1.0
    _wire_head(arrays, cfg, DESIGNATED.layer, DESIGNATED.head, D1_POS, "answer", 1.0)
    for (layer, head), (src, dest, scale) in DISTRACTORS.items():
        _wire_head(arrays, cfg, layer, head, src, dest, scale)
    return _from_arrays(cfg, arrays)


def recall_grid() -> tuple[np.ndarray, np.ndarray]:
    """All 81 ``d1 d2`` with digits in 1..9; ``y`` is fixed per row so that ``e1 != d1``."""
    seqs, answers = [], []
    for d1 in range(1, 10):
        for d2 in range(1, 10):
            y = 10 * (d1 % 9 + 1) + d2
            seqs.append(tokenize(render_recall(10 * d1 + d2, y)))
            answers.append(digit_token(d1))
    return np.array(seqs), np.array(answers)


def recall_accuracy(params: ModelParams, ablate: frozenset = frozenset()) -> float:
    """Accuracy on :func:`recall_grid`, with ``ablate`` zeroed at every position."""
    seqs, answers = recall_grid()
    if not ablate:
        logits = forward(params, seqs)[:, -1]
    else:
        positions = tuple(range(seqs.shape[1]))
        cache = AlternateCache.zeros(params.config, seqs, positions)
        mask = Mask.from_dict(params.config, {c: 0.0 for c in ablate}, positions=positions)
        with no_grad():
            logits = masked_forward(params, seqs, cache, mask).data
    return float((logits.argmax(-1) == answers).mean())


def build_planted_model(n_tuples: int = 90, seed: int = 0) -> PlantedSpec:
    params = _build_params()
    components = [c for c in _heads(params.config)]
    checks = {"accuracy": recall_accuracy(params), "ablate_designated": recall_accuracy(params, frozenset({DESIGNATED}))}
    checks["ablate_distractors"] = {
        str(c): recall_accuracy(params, frozenset({c})) for c in components if c != DESIGNATED
    }
    if checks["accuracy"] < 1.0:
        raise ConstructionError(f"planted model solves only {checks['accuracy']:.2%} of the recall grid")
    if checks["ablate_designated"] > 0.2:
        raise ConstructionError(f"ablating {DESIGNATED} leaves accuracy at {checks['ablate_designated']:.2%}")
    broken = {k: v for k, v in checks["ablate_distractors"].items() if v != checks["accuracy"]}
    if broken:
        raise ConstructionError(f"ablating distractors changed accuracy: {broken}")
    return PlantedSpec(params, frozenset({DESIGNATED}), gen_recall_tuples(n_tuples, seed), checks)


def _heads(cfg: ModelConfig):
    for layer in range(cfg.n_layers):
        for head in range(cfg.n_heads):
            yield ComponentId(layer, "head", head)
