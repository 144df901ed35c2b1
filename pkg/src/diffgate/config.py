"""Experiment configuration: dataclasses, canonical JSON, and config hashes.

A stored config always carries every field; loading fills defaults, and
``canonical_json`` (sorted keys, no whitespace) of the materialized config is
what gets hashed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SynthSpec
from .encoder import EncoderConfig, param_count
from .errors import ConfigError

PHASE_KINDS = ("pretrain", "diff_train", "magnitude_prune", "diff_finetune", "adv_diff_train", "evaluate")
SUBNETWORKS = ("E_t", "E_d")
SEED_STREAMS = ("init", "gates", "data_order", "heads", "probe")

# reference scale for the sparsity weight: 1.25e-7 on a ~110M-parameter encoder
REFERENCE_LAMBDA = 1.25e-7
REFERENCE_PARAMS = 110e6


def default_lambda_sparsity(n_params: int) -> float:
    """Keep the penalty-to-task-loss ratio of the reference setting at ``n_params``."""
    return REFERENCE_LAMBDA * REFERENCE_PARAMS / n_params


@dataclass(frozen=True)
class Phase:
    kind: str
    epochs: int = 0
    which_subnetwork: str = "E_t"

    def __post_init__(self):
        if self.kind not in PHASE_KINDS:
            raise ConfigError(f"unknown phase kind {self.kind!r}")
        if self.which_subnetwork not in SUBNETWORKS:
            raise ConfigError(f"unknown subnetwork {self.which_subnetwork!r}")
        if self.epochs < 0:
            raise ConfigError("phase epochs must be >= 0")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 5e-4
    gate_lr: float = 5e-4
    head_lr: float = 1e-3
    dense_lr: float = 1e-4
    # E_d moves slowly against a fast attribute head; a slow head lets the
    # encoder dodge it by flipping the attribute direction
    debias_lr: float = 1e-4
    adv_head_lr: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")


@dataclass(frozen=True)
class GateConfig:
    beta: float = 1.0
    gamma: float = -0.1
    zeta: float = 1.1
    log_alpha_init_mean: float = 0.0
    log_alpha_init_std: float = 0.01
    w_init_std: float = 0.01


def _default_phases() -> tuple[Phase, ...]:
    return (
        Phase("pretrain", 8),
        Phase("diff_train", 6, "E_t"),
        Phase("magnitude_prune", 0, "E_t"),
        Phase("diff_finetune", 4, "E_t"),
        Phase("evaluate"),
    )


def debias_phases(task_epochs=(6, 4), debias_epochs=(10, 1), pretrain_epochs: int = 8) -> tuple[Phase, ...]:
    return (
        Phase("pretrain", pretrain_epochs),
        Phase("diff_train", task_epochs[0], "E_t"),
        Phase("magnitude_prune", 0, "E_t"),
        Phase("diff_finetune", task_epochs[1], "E_t"),
        Phase("adv_diff_train", debias_epochs[0], "E_d"),
        Phase("magnitude_prune", 0, "E_d"),
        Phase("diff_finetune", debias_epochs[1], "E_d"),
        Phase("evaluate"),
    )


@dataclass(frozen=True)
class TrainPlan:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    phases: tuple[Phase, ...] = field(default_factory=_default_phases)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    # None means default_lambda_sparsity(encoder parameter count); materialized on load
    lambda_sparsity: float | None = None
    lambda_adv: float = 1.0
    target_sparsity: float = 0.05
    debias_target_sparsity: float | None = None
    structured: bool = False
    penalty_combination: str = "additive"
    exclude_groups: tuple[str, ...] = ()
    adv_include_task_loss: bool = True
    debias_rounds: int = 1
    batch_size: int = 32
    pretrain_lr: float = 1e-3
    probe_epochs: int = 300
    seeds: dict = field(default_factory=lambda: {name: 0 for name in SEED_STREAMS})

    def __post_init__(self):
        if self.lambda_sparsity is None:
            object.__setattr__(self, "lambda_sparsity", default_lambda_sparsity(param_count(self.encoder)))
        if self.debias_target_sparsity is None:
            object.__setattr__(self, "debias_target_sparsity", self.target_sparsity)
        seeds = {name: 0 for name in SEED_STREAMS}
        seeds.update(self.seeds)
        unknown = set(seeds) - set(SEED_STREAMS)
        if unknown:
            raise ConfigError(f"unknown seed streams {sorted(unknown)}")
        object.__setattr__(self, "seeds", seeds)
        if self.encoder.vocab_size != self.synth.vocab_size:
            raise ConfigError("encoder and synthetic data disagree on vocab_size")
        if self.synth.seq_len > self.encoder.max_seq_len:
            raise ConfigError("synthetic seq_len exceeds encoder max_seq_len")
        for name in ("target_sparsity", "debias_target_sparsity"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.lambda_sparsity < 0 or self.lambda_adv < 0:
            raise ConfigError("lambda values must be >= 0")
        if self.penalty_combination not in ("additive", "multiplicative"):
            raise ConfigError(f"unknown penalty_combination {self.penalty_combination!r}")
        if self.batch_size < 1 or self.debias_rounds < 1:
            raise ConfigError("batch_size and debias_rounds must be >= 1")
        validate_phases(self.phases)

    def phase_list(self, subnetwork: str | None = None, kind: str | None = None) -> list[Phase]:
        return [p for p in self.phases
                if (subnetwork is None or p.which_subnetwork == subnetwork) and (kind is None or p.kind == kind)]

    def pretrain_epochs(self) -> int:
        return sum(p.epochs for p in self.phase_list(kind="pretrain"))

    def with_seed(self, seed: int) -> TrainPlan:
        return dataclasses.replace(self, seeds={name: int(seed) for name in SEED_STREAMS})

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> TrainPlan:
        return _build(cls, d, "plan")


def validate_phases(phases) -> None:
    if not phases:
        raise ConfigError("a plan needs at least one phase")
    state = {"E_t": "none", "E_d": "none"}
    for i, p in enumerate(phases):
        sub = p.which_subnetwork
        if p.kind in ("diff_train", "adv_diff_train"):
            if state[sub] != "none":
                raise ConfigError(f"phase {i}: {sub} is already trained or pruned")
            if p.kind == "adv_diff_train" and state["E_t"] == "none":
                raise ConfigError(f"phase {i}: adversarial training needs a trained E_t first")
            state[sub] = "trained"
        elif p.kind == "magnitude_prune":
            if state[sub] != "trained":
                raise ConfigError(f"phase {i}: magnitude_prune must follow a diff_train on {sub}")
            state[sub] = "pruned"
        elif p.kind == "diff_finetune":
            if state[sub] != "pruned":
                raise ConfigError(f"phase {i}: diff_finetune must follow magnitude_prune on {sub}")


def _to_jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif (cls, name) == (TrainPlan, "phases"):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.phases: expected a list")
            kwargs[name] = tuple(_build(Phase, p, f"{where}.phases[{i}]") for i, p in enumerate(value))
        elif (cls, name) == (TrainPlan, "exclude_groups"):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


_NESTED = {
    (TrainPlan, "encoder"): EncoderConfig,
    (TrainPlan, "synth"): SynthSpec,
    (TrainPlan, "optimizer"): OptimizerConfig,
    (TrainPlan, "gate"): GateConfig,
}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(plan: TrainPlan) -> str:
    return sha256_hex(canonical_json(plan.to_dict()))


def model_hash(plan: TrainPlan) -> str:
    """Identity of the pretrained checkpoint: everything that determines theta.

    Masks and heads embed this hash, so they only load against the
    checkpoint they were trained on.
    """
    ident = {
        "encoder": plan.encoder.to_dict(),
        "synth": plan.synth.to_dict(),
        "pretrain_epochs": plan.pretrain_epochs(),
        "pretrain_lr": plan.pretrain_lr,
        "batch_size": plan.batch_size,
    }
    return sha256_hex(canonical_json(ident))


def load_plan(path) -> TrainPlan:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return TrainPlan.from_dict(d)


def save_plan(plan: TrainPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
