"""Adversarial attribute removal: task head, attribute head behind a gradient
reversal layer, and the linear probe used to measure what remains."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import metrics
from .encoder import Head, head_forward
from .errors import ConfigError, MetricError
from .optim import Adam
from .rng import RngState


@dataclass(eq=False)
class AdversarialObjective:
    lambda_adv: float
    task_head: Head
    adv_head: Head
    include_task_loss: bool = True

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv must be >= 0")
        task_ids = {id(p) for p in self.task_head.parameters()}
        if any(id(p) in task_ids for p in self.adv_head.parameters()):
            raise ConfigError("task and adversarial heads must not share parameters")


def adversarial_loss(obj: AdversarialObjective, h: T.Tensor, task_labels, attr_labels):
    """Task CE plus attribute CE seen through a gradient reversal layer.

    The attribute head trains normally on ``h``; the encoder behind ``h``
    receives ``-lambda_adv`` times the attribute gradient. Returns
    ``(total, task_loss, adv_loss)`` with the two parts as floats.
    """
    task_labels = np.asarray(task_labels)
    attr_labels = np.asarray(attr_labels)
    if len(task_labels) != h.shape[0] or len(attr_labels) != h.shape[0]:
        raise ValueError(
            f"batch of {h.shape[0]} features with {len(task_labels)} task and {len(attr_labels)} attribute labels"
        )
    task = T.softmax_cross_entropy(head_forward(obj.task_head, h), task_labels)
    adv = T.softmax_cross_entropy(head_forward(obj.adv_head, T.grad_reverse(h, obj.lambda_adv)), attr_labels)
    total = T.add(task, adv) if obj.include_task_loss else adv
    return total, task.item(), adv.item()


def fit_linear_probe(features: np.ndarray, labels: np.ndarray, epochs: int, rng: RngState,
                     lr: float = 0.05, classes: int | None = None) -> tuple[Head, np.ndarray, np.ndarray]:
    """Full-batch logistic regression on standardized features.

    Returns the head and the standardization (mean, scale) to apply at test time.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = classes or int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise MetricError("probe training split contains a single class")
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-8
    x = T.Tensor((features - mu) / sd)
    head = Head.random("probe", features.shape[1], max(classes, 2), rng, std=0.01)
    opt = Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        T.softmax_cross_entropy(head_forward(head, x), labels).backward()
        opt.step()
    return head, mu, sd


def probe_attribute(producer: Callable[[np.ndarray], np.ndarray], train, test, probe_epochs: int = 300,
                    rng: RngState | None = None) -> float:
    """Balanced accuracy of a fresh linear probe predicting the attribute from h.

    ``producer`` maps a token matrix to features and is only evaluated, never
    trained. ``train`` and ``test`` are ``(tokens, attr_labels)`` pairs.
    """
    rng = rng or RngState(0, "probe")
    (tr_tok, tr_a), (te_tok, te_a) = train, test
    te_a = np.asarray(te_a)
    if len(np.unique(te_a)) < 2:
        raise MetricError("probe evaluation split contains a single class")
    with T.no_grad():
        tr_h = np.asarray(producer(tr_tok))
        te_h = np.asarray(producer(te_tok))
    return probe_features(tr_h, tr_a, te_h, te_a, probe_epochs, rng)[1]


def probe_features(tr_h, tr_a, te_h, te_a, epochs: int, rng: RngState) -> tuple[float, float]:
    """(accuracy, balanced accuracy) of a linear probe fitted on train features."""
    te_a = np.asarray(te_a)
    if len(np.unique(te_a)) < 2:
        raise MetricError("probe evaluation split contains a single class")
    head, mu, sd = fit_linear_probe(np.asarray(tr_h), tr_a, epochs, rng)
    pred = np.argmax(((te_h - mu) / sd) @ head.weights.data + head.bias.data, axis=1)
    return metrics(pred, te_a)
