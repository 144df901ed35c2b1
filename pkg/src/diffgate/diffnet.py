"""Sparse additive diffs over frozen pretrained parameters.

A ``DiffSubnetwork`` holds, per parameter group, a dense diff ``w`` and a
hard concrete gate over it, so the task parameters are
``theta + z * w``. The structured variant multiplies in one scalar gate per
group. After magnitude pruning the gates are replaced by a frozen binary
mask and the diff becomes ``mask * w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .hardconcrete import HardConcreteGate, deterministic_gate, gate_values, open_probability
from .rng import RngState

MULTIPLICATIVE = "multiplicative"
ADDITIVE = "additive"


@dataclass(eq=False)
class GroupDiff:
    w: T.Tensor
    gate: HardConcreteGate | None = None
    group_gate: HardConcreteGate | None = None


@dataclass
class SparsityReport:
    total_params: int
    nonzero_diff: int
    sparsity_rate: float
    per_group: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "nonzero_diff": self.nonzero_diff,
            "sparsity_rate": self.sparsity_rate,
            "per_group": dict(self.per_group),
        }


class DiffSubnetwork:
    def __init__(
        self,
        groups: dict[str, GroupDiff],
        frozen_mask: dict[str, np.ndarray] | None = None,
        structured: bool = False,
        penalty_combination: str = ADDITIVE,
        excluded: tuple[str, ...] = (),
    ):
        if penalty_combination not in (ADDITIVE, MULTIPLICATIVE):
            raise ConfigError(f"unknown penalty_combination {penalty_combination!r}")
        self.groups = dict(sorted(groups.items()))
        self.frozen_mask = None if frozen_mask is None else dict(sorted(frozen_mask.items()))
        self.structured = structured
        self.penalty_combination = penalty_combination
        self.excluded = tuple(sorted(excluded))
        for gid, gd in self.groups.items():
            if not structured and gd.group_gate is not None:
                raise ConfigError(f"group gate on {gid} but the network is unstructured")
            if self.frozen_mask is not None:
                if gid not in self.frozen_mask:
                    raise ConfigError(f"frozen mask has no entry for group {gid}")
                if self.frozen_mask[gid].shape != gd.w.shape:
                    raise ConfigError(f"mask shape {self.frozen_mask[gid].shape} != w shape {gd.w.shape} for {gid}")

    @classmethod
    def create(
        cls,
        shapes: Mapping[str, tuple[int, ...]],
        rng: RngState,
        *,
        structured: bool = False,
        penalty_combination: str = ADDITIVE,
        exclude: tuple[str, ...] = (),
        w_std: float = 0.01,
        log_alpha_std: float = 0.01,
        log_alpha_mean: float = 0.0,
        beta: float = 1.0,
        gamma: float = -0.1,
        zeta: float = 1.1,
    ) -> DiffSubnetwork:
        groups = {}
        excluded = tuple(g for g in shapes if g in set(exclude))
        for gid in sorted(shapes):
            if gid in excluded:
                continue
            shape = tuple(shapes[gid])
            r = rng.stream(gid)
            w = T.Tensor(r.normal(shape, std=w_std), requires_grad=True)
            gate = HardConcreteGate.init(shape, r.stream("gate"), std=log_alpha_std, mean=log_alpha_mean,
                                         beta=beta, gamma=gamma, zeta=zeta)
            group_gate = None
            if structured:
                group_gate = HardConcreteGate.init((), r.stream("group_gate"), std=log_alpha_std,
                                                   mean=log_alpha_mean, beta=beta, gamma=gamma, zeta=zeta)
            groups[gid] = GroupDiff(w, gate, group_gate)
        return cls(groups, structured=structured, penalty_combination=penalty_combination, excluded=excluded)

    @property
    def frozen(self) -> bool:
        return self.frozen_mask is not None

    @property
    def total_params(self) -> int:
        return sum(gd.w.data.size for gd in self.groups.values())

    def parameters(self) -> list[T.Tensor]:
        """Trainable leaves: every w, plus gate logits while gates are active."""
        out = []
        for gd in self.groups.values():
            out.append(gd.w)
            if not self.frozen:
                out.append(gd.gate.log_alpha)
                if gd.group_gate is not None:
                    out.append(gd.group_gate.log_alpha)
        return out

    def gate_parameters(self) -> list[T.Tensor]:
        if self.frozen:
            return []
        out = [gd.gate.log_alpha for gd in self.groups.values()]
        out += [gd.group_gate.log_alpha for gd in self.groups.values() if gd.group_gate is not None]
        return out

    def diff_parameters(self) -> list[T.Tensor]:
        return [gd.w for gd in self.groups.values()]

    def deltas(self, rng: RngState | None = None) -> dict[str, T.Tensor]:
        """Per-group delta; stochastic gates when ``rng`` is given, deterministic otherwise."""
        out = {}
        for gid, gd in self.groups.items():
            if self.frozen:
                out[gid] = T.mul(self.frozen_mask[gid], gd.w)
                continue
            # draws are consumed in sorted group order, so the stream position is reproducible
            z = gate_values(gd.gate, rng)
            if gd.group_gate is not None:
                z = T.mul(gate_values(gd.group_gate, rng), z)
            out[gid] = T.mul(z, gd.w)
        return out

    def delta_arrays(self) -> dict[str, np.ndarray]:
        with T.no_grad():
            return {gid: d.data for gid, d in self.deltas(None).items()}


def effective_params(
    net: DiffSubnetwork | None,
    pretrained: Mapping[str, np.ndarray | T.Tensor],
    rng: RngState | None = None,
) -> dict[str, T.Tensor]:
    """theta + delta per group. ``rng=None`` selects the deterministic gates."""
    base = {gid: T.as_tensor(v) for gid, v in pretrained.items()}
    if net is None:
        return base
    for gid in net.groups:
        if gid not in base:
            raise ConfigError(f"diff group {gid!r} has no pretrained parameter")
    for gid in base:
        if gid not in net.groups and gid not in net.excluded:
            raise ConfigError(f"pretrained group {gid!r} is missing from the diff network")
    out = dict(base)
    for gid, d in net.deltas(rng).items():
        out[gid] = T.add(base[gid], d)
    return out


def stack_params(
    pretrained: Mapping[str, np.ndarray],
    nets: list[DiffSubnetwork],
    rngs: list[RngState | None] | None = None,
) -> dict[str, T.Tensor]:
    """theta + delta_1 + delta_2 + ..., added left to right."""
    params: Mapping = pretrained
    rngs = rngs or [None] * len(nets)
    for net, r in zip(nets, rngs):
        params = effective_params(net, params, r)
    return {gid: T.as_tensor(v) for gid, v in params.items()}


def diff_l0_loss(net: DiffSubnetwork, lambda_sparsity: float) -> T.Tensor:
    """lambda times the expected number of open gates.

    Structured, multiplicative: sum_j sum_{i in g(j)} P_j * P_i.
    Structured, additive: sum_j (P_j + sum_{i in g(j)} P_i), i.e. the group
    gate is charged once per group rather than once per element.
    """
    if net.frozen:
        raise ContractError("diff_l0_loss is undefined once the mask is frozen")
    terms = []
    for gd in net.groups.values():
        p = open_probability(gd.gate)
        if gd.group_gate is None:
            terms.append(T.tsum(p))
            continue
        pg = open_probability(gd.group_gate)
        if net.penalty_combination == MULTIPLICATIVE:
            terms.append(T.mul(pg, T.tsum(p)))
        else:
            terms.append(T.add(pg, T.tsum(p)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, lambda_sparsity)


def kept_count(target_sparsity: float, total: int) -> int:
    """ceil(target * total), evaluated on the decimal value of ``target``."""
    return math.ceil(Fraction(repr(float(target_sparsity))) * total)


def pruning_scores(net: DiffSubnetwork) -> dict[str, np.ndarray]:
    """Deterministic z * w per scalar (structured: times the group gate)."""
    with T.no_grad():
        if net.frozen:
            return {gid: net.frozen_mask[gid] * gd.w.data for gid, gd in net.groups.items()}
        out = {}
        for gid, gd in net.groups.items():
            z = deterministic_gate(gd.gate).data
            if gd.group_gate is not None:
                z = deterministic_gate(gd.group_gate).data * z
            out[gid] = z * gd.w.data
        return out


def magnitude_prune(net: DiffSubnetwork, target_sparsity: float) -> tuple[DiffSubnetwork, SparsityReport]:
    """Keep the ceil(target * total) largest |z * w| globally; freeze the rest to zero.

    Ties are broken by group id, then flat index, both ascending. The kept
    entries carry their current effective diff z * w, so the pruned network
    computes the same delta as before at every kept position.
    """
    if not (0.0 < target_sparsity <= 1.0):
        raise ValueError(f"target_sparsity must lie in (0, 1], got {target_sparsity}")
    if net.frozen:
        raise ContractError("network is already pruned")
    scores = pruning_scores(net)
    gids = list(scores)
    flat = np.concatenate([scores[g].reshape(-1) for g in gids])
    group_rank = np.concatenate([np.full(scores[g].size, i) for i, g in enumerate(gids)])
    flat_idx = np.concatenate([np.arange(scores[g].size) for g in gids])
    total = flat.size
    k = kept_count(target_sparsity, total)
    order = np.lexsort((flat_idx, group_rank, -np.abs(flat)))
    keep = np.zeros(total, dtype=bool)
    keep[order[:k]] = True

    groups, masks, per_group = {}, {}, {}
    offset = 0
    for gid in gids:
        n = scores[gid].size
        m = keep[offset:offset + n].reshape(scores[gid].shape).astype(np.float64)
        offset += n
        masks[gid] = m
        groups[gid] = GroupDiff(T.Tensor(m * scores[gid], requires_grad=True))
        per_group[gid] = int(m.sum())
    pruned = DiffSubnetwork(groups, frozen_mask=masks, structured=net.structured,
                            penalty_combination=net.penalty_combination, excluded=net.excluded)
    return pruned, SparsityReport(total, k, k / total, per_group)


def sparsity_report(net: DiffSubnetwork) -> SparsityReport:
    if not net.frozen:
        raise ContractError("sparsity_report needs a pruned network")
    per_group = {gid: int(m.sum()) for gid, m in net.frozen_mask.items()}
    total = net.total_params
    kept = sum(per_group.values())
    return SparsityReport(total, kept, kept / total, per_group)


def closed_group_fraction(net: DiffSubnetwork) -> float:
    """Fraction of group gates whose deterministic value is exactly 0."""
    if not net.structured:
        raise ContractError("closed_group_fraction needs a structured network")
    with T.no_grad():
        z = [float(deterministic_gate(gd.group_gate).data) for gd in net.groups.values()]
    return sum(v == 0.0 for v in z) / len(z)


def zero_diff(shapes: Mapping[str, tuple[int, ...]]) -> DiffSubnetwork:
    """A frozen network whose delta is identically zero."""
    groups = {g: GroupDiff(T.Tensor(np.zeros(s), requires_grad=True)) for g, s in shapes.items()}
    masks = {g: np.zeros(s) for g, s in shapes.items()}
    return DiffSubnetwork(groups, frozen_mask=masks)
