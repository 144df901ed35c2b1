"""Hard concrete gates: a binary concrete variable stretched to (gamma, zeta)
and rectified into [0, 1], giving exact zeros and ones while staying
reparametrizable through ``log_alpha``.

Sampling chain, for u ~ U(0, 1)::

    s    = sigmoid((log u - log(1 - u) + log_alpha) / beta)
    sbar = s * (zeta - gamma) + gamma
    z    = min(1, max(0, sbar))

The expected L0 norm is P(z > 0) = sigmoid(log_alpha - beta * log(-gamma / zeta)).

Note on the CDF of ``sbar``. Inverting the chain gives
``P(sbar <= x) = sigmoid(beta * logit((x - gamma) / (zeta - gamma)) - log_alpha)``,
with ``beta`` *multiplying* the logit. A commonly reproduced form divides the
logit by ``beta`` instead; the two agree only at ``beta = 1``. The
multiplying form is the one consistent with the sampler and with the penalty
above (``1 - cdf_sbar(0)`` equals the per-gate penalty exactly), so it is the
one implemented here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ContractError
from .rng import RngState

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"


@dataclass(eq=False)
class HardConcreteGate:
    log_alpha: T.Tensor
    beta: float = 1.0
    gamma: float = -0.1
    zeta: float = 1.1
    mode: str = STOCHASTIC

    def __post_init__(self):
        if not (self.gamma < 0.0 and self.zeta > 1.0):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.mode not in (STOCHASTIC, DETERMINISTIC):
            raise ValueError(f"unknown gate mode {self.mode!r}")

    @classmethod
    def init(cls, shape, rng: RngState, std: float = 0.01, mean: float = 0.0, **kw) -> HardConcreteGate:
        la = T.Tensor(rng.normal(shape, std=std, mean=mean), requires_grad=True)
        return cls(la, **kw)

    @property
    def shape(self):
        return self.log_alpha.shape

    @property
    def penalty_shift(self) -> float:
        """beta * log(-gamma / zeta), the logit offset of P(z > 0)."""
        return self.beta * math.log(-self.gamma / self.zeta)


def sample_gate_from_uniform(gate: HardConcreteGate, u) -> T.Tensor:
    """Gate sample for a given uniform draw ``u`` (common random numbers)."""
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    noise = np.log(u) - np.log1p(-u)
    s = T.sigmoid(T.scale(T.add(gate.log_alpha, noise), 1.0 / gate.beta))
    return T.clamp_hard(T.lerp(s, gate.gamma, gate.zeta))


def sample_gate(gate: HardConcreteGate, rng: RngState) -> T.Tensor:
    if gate.mode != STOCHASTIC:
        raise ContractError("sample_gate called on a deterministic gate")
    return sample_gate_from_uniform(gate, rng.uniform_open(gate.shape))


def deterministic_gate(gate: HardConcreteGate) -> T.Tensor:
    return T.clamp_hard(T.lerp(T.sigmoid(gate.log_alpha), gate.gamma, gate.zeta))


def gate_values(gate: HardConcreteGate, rng: RngState | None) -> T.Tensor:
    """Sample in stochastic mode, collapse in deterministic mode or when ``rng`` is None."""
    if gate.mode == DETERMINISTIC or rng is None:
        return deterministic_gate(gate)
    return sample_gate(gate, rng)


def open_probability(gate: HardConcreteGate) -> T.Tensor:
    """Elementwise P(z > 0)."""
    return T.sigmoid(T.add(gate.log_alpha, -gate.penalty_shift))


def l0_penalty(gate: HardConcreteGate) -> T.Tensor:
    return T.tsum(open_probability(gate))


def cdf_sbar(gate: HardConcreteGate, sbar):
    """P(sbar <= x) for x in (gamma, zeta); elementwise over ``log_alpha``."""
    x = np.asarray(sbar, dtype=np.float64)
    if np.any(x <= gate.gamma) or np.any(x >= gate.zeta):
        raise ValueError(f"sbar must lie strictly inside ({gate.gamma}, {gate.zeta})")
    p = (x - gate.gamma) / (gate.zeta - gate.gamma)
    out = expit(gate.beta * (np.log(p) - np.log1p(-p)) - gate.log_alpha.data)
    return float(out) if out.ndim == 0 else out

