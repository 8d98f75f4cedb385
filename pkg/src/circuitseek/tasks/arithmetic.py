"""Symbolic vocabulary, arithmetic problems and (orig, alt, target) tuple generators.

Problems render as ``x = d1 d2 ; y = e1 e2 ; x op y =`` (14 tokens); the
recall task used by the planted model renders as ``x = d1 d2 ; y = e1 e2 ; x = ?``
(13 tokens). The model only ever predicts the answer's leading digit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..desiderata import CHANGE, PRESERVE, DesiderataTuple, Desideratum

TOKENS = ("0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "x", "y", "+", "-", "*", "=", ";", "?")
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
OPS = ("+", "-", "*")
PROBLEM_LEN = 14
RECALL_LEN = 13


class GenerationError(RuntimeError):
    """Tuple constraints could not be satisfied."""


def tokenize(text: str | Sequence[str]) -> list[int]:
    parts = text.split() if isinstance(text, str) else list(text)
    try:
        return [TOKEN_ID[p] for p in parts]
    except KeyError as e:
        raise ValueError(f"unknown token {e.args[0]!r}") from None


def detokenize(ids: Iterable[int]) -> str:
    return " ".join(TOKENS[i] for i in ids)


def digit_token(d: int) -> int:
    return TOKEN_ID[str(d)]


@dataclass(frozen=True)
class ArithmeticProblem:
    x: int
    y: int
    op: str

    def __post_init__(self):
        if not (10 <= self.x <= 99 and 10 <= self.y <= 99):
            raise ValueError("operands must be two-digit")
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.op == "-" and self.x <= self.y:
            raise ValueError("subtraction needs x > y")

    @property
    def answer(self) -> int:
        return {"+": self.x + self.y, "-": self.x - self.y, "*": self.x * self.y}[self.op]

    @property
    def first_digit(self) -> int:
        return int(str(self.answer)[0])

    @property
    def answer_token(self) -> int:
        return digit_token(self.first_digit)

    def render(self) -> str:
        d1, d2 = divmod(self.x, 10)
        e1, e2 = divmod(self.y, 10)
        return f"x = {d1} {d2} ; y = {e1} {e2} ; x {self.op} y ="

    def tokens(self) -> list[int]:
        return tokenize(self.render())

    @classmethod
    def parse(cls, ids: Sequence[int]) -> ArithmeticProblem:
        s = detokenize(ids).split()
        if len(s) != PROBLEM_LEN:
            raise ValueError(f"expected {PROBLEM_LEN} tokens, got {len(s)}")
        return cls(int(s[2] + s[3]), int(s[7] + s[8]), s[11])


def valid(x: int, y: int, op: str) -> bool:
    return 10 <= x <= 99 and 10 <= y <= 99 and (op != "-" or x > y)


def all_problems(ops: Sequence[str] = OPS) -> list[ArithmeticProblem]:
    return [ArithmeticProblem(x, y, op) for op in ops for x in range(10, 100) for y in range(10, 100) if valid(x, y, op)]


def _balanced_digits(count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 9:
        raise GenerationError(f"count={count} cannot cover digits 1-9 uniformly (need >= 9)")
    digits = np.tile(np.arange(1, 10), count // 9 + 1)[:count]
    return rng.permutation(digits)


def _first(x: int, y: int, op: str) -> int:
    return ArithmeticProblem(x, y, op).first_digit


MAX_TRIES = 20000


def vd_tuple(orig: ArithmeticProblem, alt: ArithmeticProblem) -> DesiderataTuple:
    """Tuple asking the patched model to emit the alternate's answer."""
    if (orig.y, orig.op) != (alt.y, alt.op):
        raise GenerationError("VD alternates may only change x")
    if orig.first_digit == alt.first_digit:
        raise GenerationError(f"answers {orig.answer} and {alt.answer} share their first digit")
    return DesiderataTuple(orig.tokens(), alt.tokens(), alt.answer_token, orig.answer_token,
                           meta={"kind": "vd", "x": orig.x, "y": orig.y, "op": orig.op, "alt_x": alt.x})


def oi_tuple(orig: ArithmeticProblem, alt: ArithmeticProblem) -> DesiderataTuple:
    """Tuple asking the patched model to keep the original's answer."""
    if (orig.x, orig.y) != (alt.x, alt.y) or orig.op == alt.op:
        raise GenerationError("OI alternates must keep x, y and flip the op")
    if orig.first_digit == alt.first_digit:
        raise GenerationError(f"answers {orig.answer} and {alt.answer} share their first digit")
    return DesiderataTuple(orig.tokens(), alt.tokens(), orig.answer_token, alt.answer_token,
                           meta={"kind": "oi", "x": orig.x, "y": orig.y, "op": orig.op, "alt_op": alt.op})


def gen_vd_tuples(count: int, ops: Sequence[str] = ("+", "-"), seed: int = 0) -> list[DesiderataTuple]:
    """Value-dependence tuples: alternates change only x's digits."""
    ops = tuple(ops)
    if not ops or set(ops) - set(OPS):
        raise GenerationError(f"ops must be a non-empty subset of {OPS}")
    rng = np.random.default_rng(seed)
    out = []
    for t in _balanced_digits(count, rng):
        for _ in range(MAX_TRIES):
            op = ops[rng.integers(len(ops))]
            y = int(rng.integers(10, 100))
            xa, xo = (int(v) for v in rng.integers(10, 100, size=2))
            if not (valid(xa, y, op) and valid(xo, y, op)):
                continue
            fa, fo = _first(xa, y, op), _first(xo, y, op)
            if fa == t and fo != t:
                break
        else:
            raise GenerationError(f"could not build a VD tuple with target digit {t} from ops {ops}")
        out.append(vd_tuple(ArithmeticProblem(xo, y, op), ArithmeticProblem(xa, y, op)))
    return out


def gen_oi_tuples(count: int, op_pairs: Sequence[tuple[str, str]] = (("+", "-"),), seed: int = 0) -> list[DesiderataTuple]:
    """Operation-invariance tuples: alternates flip the operation, target stays the original answer.

    Each pair is used in both directions (either member may be the original).
    """
    pairs = [tuple(p) for p in op_pairs]
    if not pairs or any(len(p) != 2 or p[0] == p[1] or set(p) - set(OPS) for p in pairs):
        raise GenerationError(f"op pairs must be distinct ops from {OPS}: {op_pairs}")
    rng = np.random.default_rng(seed)
    out = []
    for t in _balanced_digits(count, rng):
        for _ in range(MAX_TRIES):
            p = pairs[rng.integers(len(pairs))]
            op_o, op_a = (p if rng.integers(2) == 0 else p[::-1])
            x, y = (int(v) for v in rng.integers(10, 100, size=2))
            if not (valid(x, y, op_o) and valid(x, y, op_a)):
                continue
            fo, fa = _first(x, y, op_o), _first(x, y, op_a)
            if fo == t and fa != t:
                break
        else:
            raise GenerationError(f"could not build an OI tuple with target digit {t} from pairs {pairs}")
        out.append(oi_tuple(ArithmeticProblem(x, y, op_o), ArithmeticProblem(x, y, op_a)))
    return out


def render_recall(x: int, y: int) -> str:
    d1, d2 = divmod(x, 10)
    e1, e2 = divmod(y, 10)
    return f"x = {d1} {d2} ; y = {e1} {e2} ; x = ?"


def gen_recall_tuples(count: int, seed: int = 0) -> list[DesiderataTuple]:
    """Recall tuples ``x = d1 d2 ; y = e1 e2 ; x = ?`` whose alternates differ only in d1."""
    rng = np.random.default_rng(seed)
    out = []
    for t in _balanced_digits(count, rng):
        d1o = int(rng.choice([d for d in range(1, 10) if d != t]))
        d2 = int(rng.integers(0, 10))
        y = int(rng.integers(10, 100))
        xo, xa = 10 * d1o + d2, 10 * int(t) + d2
        out.append(
            DesiderataTuple(tokenize(render_recall(xo, y)), tokenize(render_recall(xa, y)),
                            digit_token(int(t)), digit_token(d1o),
                            meta={"kind": "recall", "x": xo, "y": y, "alt_x": xa})
        )
    return out


def vd_desideratum(tuples: list[DesiderataTuple], name: str = "vd") -> Desideratum:
    return Desideratum(name, tuples, CHANGE)


def oi_desideratum(tuples: list[DesiderataTuple], name: str = "oi") -> Desideratum:
    return Desideratum(name, tuples, PRESERVE)


# ---------------------------------------------------------------------------
# dataset files (JSON lines)


def tuple_to_record(t: DesiderataTuple) -> dict:
    meta = dict(t.meta)
    kind = meta.pop("kind", "vd")
    return {
        "kind": kind,
        "orig_ids": list(t.orig),
        "alt_ids": list(t.alt),
        "target_id": int(t.target),
        "competing_id": int(t.competing),
        "meta": meta,
    }


def record_to_tuple(rec: dict) -> DesiderataTuple:
    meta = {"kind": rec["kind"], **rec.get("meta", {})}
    return DesiderataTuple(rec["orig_ids"], rec["alt_ids"], rec["target_id"], rec["competing_id"], meta=meta)


def write_jsonl(tuples: Iterable[DesiderataTuple], path, header: dict | None = None) -> None:
    """One record per line; an optional leading ``{"header": ...}`` line carries provenance."""
    with open(path, "w") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for t in tuples:
            f.write(json.dumps(tuple_to_record(t), sort_keys=True) + "\n")


def read_jsonl(path) -> list[DesiderataTuple]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if "header" in rec:
                continue
            out.append(record_to_tuple(rec))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}:{n}: bad dataset record: {e}") from e
    return out
