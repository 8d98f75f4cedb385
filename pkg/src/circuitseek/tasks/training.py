"""Training the toy arithmetic model on leading-digit prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..optim import Adam
from ..transformer import ModelConfig, ModelParams, init_params, run
from .arithmetic import OPS, VOCAB_SIZE, ArithmeticProblem, all_problems

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, msg: str, curve: list[dict]):
        super().__init__(msg)
        self.curve = curve


@dataclass
class CorpusSpec:
    ops: tuple[str, ...] = OPS
    heldout_fraction: float = 0.1
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.1
    warmup: int = 200
    max_steps: int = 12000
    eval_every: int = 250
    target_acc: float = 0.95
    min_acc: float = 0.80


@dataclass
class TrainingReport:
    steps: int
    heldout_acc: float
    train_acc: float
    curve: list[dict] = field(default_factory=list)
    n_train: int = 0
    n_heldout: int = 0


def default_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(n_layers=4, n_heads=8, d_model=128, d_mlp=512, vocab_size=VOCAB_SIZE, max_seq_len=16, seed=seed)


def split_problems(spec: CorpusSpec, seed: int) -> tuple[list[ArithmeticProblem], list[ArithmeticProblem]]:
    probs = all_problems(spec.ops)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(probs))
    n_held = int(round(spec.heldout_fraction * len(probs)))
    held = [probs[i] for i in perm[:n_held]]
    train = [probs[i] for i in perm[n_held:]]
    return train, held


def _encode(problems: list[ArithmeticProblem]) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([p.tokens() for p in problems], dtype=np.int64)
    y = np.array([p.answer_token for p in problems], dtype=np.int64)
    return x, y


def first_digit_accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray, batch: int = 1024) -> float:
    hits = 0
    with T.no_grad():
        for i in range(0, len(x), batch):
            logits, _ = run(params, x[i : i + batch])
            hits += int((logits.data[:, -1].argmax(-1) == y[i : i + batch]).sum())
    return hits / max(len(x), 1)


def train_toy_model(
    config: ModelConfig | None = None,
    spec: CorpusSpec | None = None,
    seed: int = 0,
    init: ModelParams | None = None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    until: int | None = None,
) -> tuple[ModelParams, TrainingReport]:
    """Train on problem renderings with cross-entropy on the token after ``=``.

    Stops once held-out accuracy reaches ``spec.target_acc`` or after
    ``spec.max_steps``; raises :class:`TrainingFailure` below ``spec.min_acc``.
    Passing ``init``/``start_step``/``optimizer_state`` resumes a run; ``until``
    pauses one early without changing the learning-rate horizon.
    """
    config = config or default_model_config(seed)
    spec = spec or CorpusSpec()
    train, held = split_problems(spec, seed)
    xtr, ytr = _encode(train)
    xhe, yhe = _encode(held)
    params = init if init is not None else init_params(config, seed)
    params.requires_grad_(True)
    opt = Adam(params.parameters(), spec.lr, weight_decay=spec.weight_decay)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    rng = np.random.default_rng(seed + 1)
    for _ in range(start_step):  # replay the batch stream so resumed runs see the same data
        rng.integers(0, len(xtr), size=spec.batch_size)

    curve: list[dict] = []
    acc = 0.0
    step = start_step
    stop = spec.max_steps if until is None else min(until, spec.max_steps)
    while step < stop:
        idx = rng.integers(0, len(xtr), size=spec.batch_size)
        lr = spec.lr * min(1.0, (step + 1) / spec.warmup)
        lr *= 0.5 * (1 + math.cos(math.pi * min(step / spec.max_steps, 1.0))) * 0.9 + 0.1
        opt.zero_grad()
        logits, _ = run(params, xtr[idx])
        loss = T.cross_entropy(logits[:, -1, :], ytr[idx])
        T.backward(loss)
        opt.step(lr)
        step += 1
        if step % spec.eval_every == 0 or step == stop:
            acc = first_digit_accuracy(params, xhe, yhe)
            curve.append({"step": step, "loss": float(loss.data), "heldout_acc": acc})
            log.info("step %d loss %.4f held-out acc %.4f", step, float(loss.data), acc)
            if acc >= spec.target_acc:
                break
    params.requires_grad_(False)
    report = TrainingReport(step, acc, first_digit_accuracy(params, xtr, ytr), curve, len(xtr), len(xhe))
    report.optimizer_state = opt.state()  # type: ignore[attr-defined]
    if acc < spec.min_acc and step >= spec.max_steps:
        raise TrainingFailure(f"held-out accuracy {acc:.3f} below {spec.min_acc} after {step} steps", curve)
    return params, report
