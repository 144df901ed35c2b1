"""Synthetic token corpus with a planted task label and protected attribute.

Token layout for a vocabulary of size V with k indicator tokens per class:

    0                       MASK (never emitted)
    1 .. 2k                 task indicators (class c owns 1 + c*k .. (c+1)*k)
    2k+1 .. 4k              attribute indicators, same layout
    4k+1 .. V-1             background, zipf-distributed

Each example draws ``seq_len`` background tokens, then with probability
``task_signal_strength`` overwrites one random position with an indicator of
``y`` and with probability ``attr_signal_strength`` overwrites a different
position with an indicator of ``a``. ``y`` alternates 0/1 so every split is
exactly balanced; ``a`` is drawn from P(a | y) chosen so that
corr(y, a) = ``task_attr_correlation`` with P(a = 1) = ``attr_positive_rate``.

Every example is generated from its own counter-keyed stream, using only
integer comparisons, so the output is identical across platforms.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MetricError, SpecError

_SCALE = 1 << 32
_SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 64
    seq_len: int = 16
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 1000
    task_signal_strength: float = 0.9
    attr_signal_strength: float = 0.9
    task_attr_correlation: float = 0.0
    attr_positive_rate: float = 0.5
    indicators_per_class: int = 2
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_dev", "n_test", "seq_len", "indicators_per_class"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.seq_len < 2:
            raise SpecError("seq_len must be >= 2 to hold both indicators")
        if self.vocab_size < 4 * self.indicators_per_class + 3:
            raise SpecError("vocab_size too small for the indicator layout")
        for name in ("task_signal_strength", "attr_signal_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.attr_positive_rate < 1.0:
            raise SpecError("attr_positive_rate must lie in (0, 1)")
        if not -1.0 <= self.task_attr_correlation <= 1.0:
            raise SpecError("task_attr_correlation must lie in [-1, 1]")
        attr_given_task(self)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    y: int
    a: int

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "y": self.y, "a": self.a}, separators=(",", ":"))


def attr_given_task(spec: SynthSpec) -> tuple[float, float]:
    """(P(a=1 | y=0), P(a=1 | y=1)) realizing the requested correlation with balanced y."""
    pa, rho = spec.attr_positive_rate, spec.task_attr_correlation
    p11 = 0.5 * pa + rho * 0.5 * math.sqrt(pa * (1.0 - pa))
    p01 = pa - p11
    tol = 1e-12
    if not (-tol <= p11 <= 0.5 + tol and -tol <= p01 <= 0.5 + tol):
        raise SpecError(
            f"correlation {rho} is unattainable with P(a=1)={pa} and balanced task labels"
        )
    return min(max(2.0 * p01, 0.0), 1.0), min(max(2.0 * p11, 0.0), 1.0)


def token_layout(spec: SynthSpec) -> dict[str, np.ndarray]:
    k = spec.indicators_per_class
    task = np.arange(1, 1 + 2 * k).reshape(2, k)
    attr = np.arange(1 + 2 * k, 1 + 4 * k).reshape(2, k)
    background = np.arange(1 + 4 * k, spec.vocab_size)
    return {"task": task, "attr": attr, "background": background}


def _threshold(p: float) -> int:
    return int(round(p * _SCALE))


def _background_table(spec: SynthSpec, n_background: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n_background + 1) ** spec.zipf_exponent
    cum = np.cumsum(w) / w.sum()
    return np.round(cum * _SCALE).astype(np.int64)


def _example_rng(spec: SynthSpec, split: int, index: int, attempt: int) -> np.random.Generator:
    ss = np.random.SeedSequence(spec.seed, spawn_key=(split, index, attempt))
    return np.random.Generator(np.random.PCG64(ss))


def _draw(spec, layout, table, thresholds, split, index, attempt) -> Example:
    g = _example_rng(spec, split, index, attempt)
    t_task, t_attr, t_a0, t_a1 = thresholds
    k = spec.indicators_per_class
    y = index % 2
    a = int(g.integers(0, _SCALE) < (t_a1 if y else t_a0))
    r = g.integers(0, _SCALE, size=spec.seq_len)
    tokens = layout["background"][np.searchsorted(table, r, side="right").clip(max=len(table) - 1)]
    pos = g.permutation(spec.seq_len)[:2]
    if g.integers(0, _SCALE) < t_task:
        tokens[pos[0]] = layout["task"][y, g.integers(0, k)]
    if g.integers(0, _SCALE) < t_attr:
        tokens[pos[1]] = layout["attr"][a, g.integers(0, k)]
    return Example(tuple(int(t) for t in tokens), y, a)


def generate(spec: SynthSpec, max_attempts: int = 1000) -> tuple[list[Example], list[Example], list[Example]]:
    """Train, dev and test splits; token sequences never repeat across or within splits."""
    layout = token_layout(spec)
    table = _background_table(spec, len(layout["background"]))
    pa0, pa1 = attr_given_task(spec)
    thresholds = (_threshold(spec.task_signal_strength), _threshold(spec.attr_signal_strength),
                  _threshold(pa0), _threshold(pa1))
    seen: set[tuple[int, ...]] = set()
    splits = []
    for s, n in enumerate((spec.n_train, spec.n_dev, spec.n_test)):
        out = []
        for i in range(n):
            for attempt in range(max_attempts):
                ex = _draw(spec, layout, table, thresholds, s, i, attempt)
                if ex.tokens not in seen:
                    break
            else:
                raise SpecError(f"could not draw a fresh sequence for {_SPLITS[s]}[{i}]")
            seen.add(ex.tokens)
            out.append(ex)
        splits.append(out)
    return tuple(splits)


def as_arrays(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tokens = np.array([e.tokens for e in examples], dtype=np.int64)
    y = np.array([e.y for e in examples], dtype=np.int64)
    a = np.array([e.a for e in examples], dtype=np.int64)
    return tokens, y, a


def write_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")


def read_jsonl(path) -> list[Example]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(Example(tuple(int(t) for t in d["tokens"]), int(d["y"]), int(d["a"])))
    return out


def metrics(predictions, labels, num_classes: int | None = None) -> tuple[float, float]:
    """(accuracy, balanced accuracy).

    Balanced accuracy is the unweighted mean of per-class recall over the
    classes present in ``labels``. A class that appears only in the
    predictions, or below ``num_classes`` but never in the labels, is left
    out of the mean with a warning.
    """
    pred = np.asarray(predictions).reshape(-1)
    lab = np.asarray(labels).reshape(-1)
    if pred.shape != lab.shape:
        raise MetricError(f"{pred.size} predictions for {lab.size} labels")
    if lab.size == 0:
        raise MetricError("metrics need at least one example")
    acc = float(np.mean(pred == lab))
    present = np.unique(lab)
    candidates = set(np.unique(pred).tolist())
    if num_classes is not None:
        candidates |= set(range(num_classes))
    absent = sorted(candidates - set(present.tolist()))
    if absent:
        warnings.warn(f"classes {absent} absent from labels; excluded from balanced accuracy", stacklevel=2)
    recalls = [float(np.mean(pred[lab == c] == c)) for c in present]
    return acc, float(np.mean(recalls))
