"""Experiment orchestration: DiffPruning, stacked debiasing, and baselines.

Every run produces a ``RunRecord`` with the same schema: per-epoch loss
decomposition, phase boundaries, final metrics, sparsity reports, and a
SHA-256 content hash over everything except the hash itself. Nothing
time-dependent enters the record, so identical plans give identical hashes.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .adversarial import AdversarialObjective, adversarial_loss, probe_features
from .config import TrainPlan, canonical_json, config_hash, model_hash, sha256_hex
from .data import as_arrays, generate, metrics
from .diffnet import DiffSubnetwork, diff_l0_loss, effective_params, magnitude_prune, stack_params
from .encoder import Head, encode, encode_numpy, freeze, group_shapes, head_forward, pretrain_mlm
from .errors import ConfigError, TrainingError
from .optim import Adam
from .rng import RngState
from .serialization import save_checkpoint, save_gate_state, save_mask

log = logging.getLogger(__name__)

RUN_KINDS = ("diffpruning", "debias", "full_finetune", "frozen_linear_head")
LABELS = {"diffpruning": "DiffPruning", "debias": "DiffPruning", "full_finetune": "Baseline",
          "frozen_linear_head": "Baseline"}


@dataclass
class RunRecord:
    kind: str
    label: str
    config: dict
    config_hash: str
    model_hash: str
    epochs: list[dict] = field(default_factory=list)
    phases: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=lambda: {"final": None, "without_debias": None})
    sparsity: dict = field(default_factory=lambda: {"E_t": None, "E_d": None})
    theta_checksum: dict = field(default_factory=dict)
    record_hash: str = ""

    def body(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("record_hash")
        return d

    def content_hash(self) -> str:
        return sha256_hex(canonical_json(self.body()))

    def finalize(self) -> RunRecord:
        self.record_hash = self.content_hash()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> RunRecord:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# pretrained encoder
# ---------------------------------------------------------------------------

_PRETRAIN_CACHE: dict[str, dict[str, np.ndarray]] = {}


def pretrain_steps(plan: TrainPlan) -> int:
    return plan.pretrain_epochs() * math.ceil(plan.synth.n_train / plan.batch_size)


def obtain_pretrained(plan: TrainPlan) -> dict[str, np.ndarray]:
    """Pretrained parameters for the plan, memoized on the model hash."""
    key = model_hash(plan)
    if key not in _PRETRAIN_CACHE:
        train, _, _ = generate(plan.synth)
        tokens, _, _ = as_arrays(train)
        t0 = time.perf_counter()
        res = pretrain_mlm(plan.encoder, tokens, pretrain_steps(plan), batch_size=plan.batch_size,
                           lr=plan.pretrain_lr)
        log.info("pretrained %d steps in %.1fs", pretrain_steps(plan), time.perf_counter() - t0)
        _PRETRAIN_CACHE[key] = res.params
    return _PRETRAIN_CACHE[key]


def checksum(params: Mapping[str, np.ndarray]) -> str:
    return T.parameters_checksum(params[k] for k in sorted(params))


# ---------------------------------------------------------------------------
# experiment state
# ---------------------------------------------------------------------------

class Experiment:
    """Mutable state of one run. ``run_*`` below are the public entry points."""

    def __init__(self, plan: TrainPlan, kind: str, pretrained: Mapping[str, np.ndarray] | None = None,
                 out_dir=None):
        if kind not in RUN_KINDS:
            raise ConfigError(f"unknown run kind {kind!r}")
        self.plan = plan
        self.cfg = plan.encoder
        self.shapes = group_shapes(plan.encoder)
        if pretrained is None:
            pretrained = obtain_pretrained(plan)
        if set(pretrained) != set(self.shapes):
            raise ConfigError("pretrained parameters do not match the encoder config")
        self.theta = freeze(pretrained) if any(v.flags.writeable for v in pretrained.values()) else dict(pretrained)
        self.model_hash = model_hash(plan)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        train, dev, test = generate(plan.synth)
        self.train = as_arrays(train)
        self.dev = as_arrays(dev)
        self.test = as_arrays(test)

        s = plan.seeds
        self.init_rng = RngState(s["init"], "init")
        self.gate_rng = RngState(s["gates"], "gates")
        self.order_rng = RngState(s["data_order"], "data_order")
        self.probe_rng = RngState(s["probe"], "probe")

        H = plan.encoder.hidden_dim
        self.task_head = Head.zeros("task", H, 2)
        self.adv_head = Head.zeros("adversarial", H, 2)
        self.nets: dict[str, DiffSubnetwork | None] = {"E_t": None, "E_d": None}
        self.dense: dict[str, T.Tensor] | None = None

        self.record = RunRecord(kind, LABELS[kind], plan.to_dict(), config_hash(plan), self.model_hash)
        self.record.theta_checksum["before"] = checksum(self.theta)

    # -- helpers ------------------------------------------------------------

    def new_net(self, which: str) -> DiffSubnetwork:
        g = self.plan.gate
        return DiffSubnetwork.create(
            self.shapes, self.init_rng.stream(which), structured=self.plan.structured,
            penalty_combination=self.plan.penalty_combination, exclude=self.plan.exclude_groups,
            w_std=g.w_init_std, log_alpha_std=g.log_alpha_init_std, log_alpha_mean=g.log_alpha_init_mean,
            beta=g.beta, gamma=g.gamma, zeta=g.zeta,
        )

    def frozen_base(self, upto: str) -> dict[str, np.ndarray]:
        """theta plus the deterministic deltas of the nets below ``upto``, as constants."""
        nets = [self.nets["E_t"]] if upto == "E_d" and self.nets["E_t"] is not None else []
        with T.no_grad():
            return {k: v.data for k, v in stack_params(self.theta, nets).items()}

    def inference_params(self, with_debias: bool = True) -> dict[str, T.Tensor]:
        if self.dense is not None:
            return {k: T.Tensor(v.data) for k, v in self.dense.items()}
        nets = [n for key, n in self.nets.items() if n is not None and (with_debias or key == "E_t")]
        with T.no_grad():
            return stack_params(self.theta, nets)

    def optimizer(self, groups: list[tuple[list[T.Tensor], float]]) -> Adam:
        o = self.plan.optimizer
        return Adam([(ps, lr) for ps, lr in groups if ps], beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                    weight_decay=o.weight_decay)

    def batches(self, tag: str, epoch: int):
        n = len(self.train[0])
        order = self.order_rng.stream(f"{tag}/epoch{epoch}").permutation(n)
        bs = self.plan.batch_size
        for i in range(0, n, bs):
            yield order[i:i + bs]

    def log_epoch(self, phase_index: int, phase_kind: str, sub: str | None, epoch: int, task: list[float],
                  adv: list[float] | None, penalty: list[float] | None) -> None:
        row = {
            "phase": phase_index,
            "kind": phase_kind,
            "subnetwork": sub,
            "epoch": epoch,
            "task_loss": float(np.mean(task)) if task else None,
            "adv_loss": float(np.mean(adv)) if adv else None,
            "penalty": float(np.mean(penalty)) if penalty else None,
        }
        self.record.epochs.append(row)
        log.info("%s %s epoch %d: task %.4f adv %s penalty %s", phase_kind, sub or "", epoch,
                 row["task_loss"] or float("nan"), row["adv_loss"], row["penalty"])
        self.checkpoint_record()

    def checkpoint_record(self) -> None:
        if self.out_dir is not None:
            self.record.finalize().save(self.out_dir / "record.json")

    def begin_phase(self, index: int, kind: str, sub: str | None, epochs: int) -> None:
        self.record.phases.append({"index": index, "kind": kind, "subnetwork": sub, "epochs": epochs,
                                   "first_epoch_row": len(self.record.epochs)})

    # -- phases -------------------------------------------------------------

    def train_task_net(self, index: int, phase_kind: str, epochs: int) -> None:
        """E_t phases: task cross-entropy, plus the L0 penalty while gates are active."""
        net = self.nets["E_t"]
        penalized = not net.frozen
        o = self.plan.optimizer
        opt = self.optimizer([(net.diff_parameters(), o.lr), (net.gate_parameters(), o.gate_lr),
                              (self.task_head.parameters(), o.head_lr)])
        tokens, y, _ = self.train
        gate_rng = self.gate_rng.stream(f"phase{index}")
        for epoch in range(epochs):
            task_l, pen_l = [], []
            for idx in self.batches(f"phase{index}", epoch):
                opt.zero_grad()
                params = effective_params(net, self.theta, None if net.frozen else gate_rng)
                h = encode(self.cfg, params, tokens[idx])
                task = T.softmax_cross_entropy(head_forward(self.task_head, h), y[idx])
                loss = task
                if penalized:
                    pen = diff_l0_loss(net, self.plan.lambda_sparsity)
                    loss = T.add(task, pen)
                    pen_l.append(pen.item())
                self._check(loss, index, epoch)
                loss.backward()
                opt.step()
                task_l.append(task.item())
            self.log_epoch(index, phase_kind, "E_t", epoch, task_l, None, pen_l if penalized else None)

    def train_debias_net(self, index: int, phase_kind: str, epochs: int) -> None:
        """E_d phases: adversarial loss over theta + delta_t (frozen) + delta_d."""
        net = self.nets["E_d"]
        penalized = not net.frozen
        for p in self.task_head.parameters():
            p.requires_grad = False
        o = self.plan.optimizer
        opt = self.optimizer([(net.diff_parameters(), o.debias_lr), (net.gate_parameters(), o.gate_lr),
                              (self.adv_head.parameters(), o.adv_head_lr)])
        obj = AdversarialObjective(self.plan.lambda_adv, self.task_head, self.adv_head,
                                   include_task_loss=self.plan.adv_include_task_loss)
        base = self.frozen_base("E_d")
        tokens, y, a = self.train
        gate_rng = self.gate_rng.stream(f"phase{index}")
        for epoch in range(epochs):
            task_l, adv_l, pen_l = [], [], []
            for idx in self.batches(f"phase{index}", epoch):
                opt.zero_grad()
                params = effective_params(net, base, None if net.frozen else gate_rng)
                h = encode(self.cfg, params, tokens[idx])
                loss, task_v, adv_v = adversarial_loss(obj, h, y[idx], a[idx])
                if penalized:
                    pen = diff_l0_loss(net, self.plan.lambda_sparsity)
                    loss = T.add(loss, pen)
                    pen_l.append(pen.item())
                self._check(loss, index, epoch)
                loss.backward()
                opt.step()
                task_l.append(task_v)
                adv_l.append(adv_v)
            self.log_epoch(index, phase_kind, "E_d", epoch, task_l, adv_l, pen_l if penalized else None)

    def prune(self, which: str) -> None:
        eta = self.plan.target_sparsity if which == "E_t" else self.plan.debias_target_sparsity
        net = self.nets[which]
        if self.out_dir is not None:
            save_gate_state(net, self.out_dir / f"gates_{which}.dgc", self.model_hash)
        pruned, report = magnitude_prune(net, eta)
        self.nets[which] = pruned
        self.record.sparsity[which] = report.to_dict()
        log.info("pruned %s to %d / %d", which, report.nonzero_diff, report.total_params)

    def evaluate(self) -> None:
        variants = {"final": True}
        if self.nets["E_d"] is not None:
            variants["without_debias"] = False
        for name, with_debias in variants.items():
            self.record.metrics[name] = self.measure(self.inference_params(with_debias))

    def measure(self, params: Mapping[str, T.Tensor]) -> dict:
        tr_tok, _, tr_a = self.train
        te_tok, te_y, te_a = self.test
        tr_h = encode_numpy(self.cfg, params, tr_tok)
        te_h = encode_numpy(self.cfg, params, te_tok)
        pred = np.argmax(te_h @ self.task_head.weights.data + self.task_head.bias.data, axis=1)
        acc, bac = metrics(pred, te_y)
        adv_acc, adv_bac = probe_features(tr_h, tr_a, te_h, te_a, self.plan.probe_epochs,
                                          self.probe_rng.stream("probe"))
        return {"task_acc": acc, "task_bac": bac, "adv_acc": adv_acc, "adv_bac": adv_bac}

    def _check(self, loss: T.Tensor, index: int, epoch: int) -> None:
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite loss in phase {index}, epoch {epoch}")

    def finish(self) -> RunRecord:
        if self.record.metrics["final"] is None:
            self.evaluate()
        self.record.theta_checksum["after"] = checksum(self.theta)
        if self.record.theta_checksum["after"] != self.record.theta_checksum["before"]:
            raise TrainingError("pretrained parameters changed during the run")
        self.record.finalize()
        if self.out_dir is not None:
            self.save_artifacts()
        return self.record

    def save_artifacts(self) -> None:
        d = self.out_dir
        self.record.save(d / "record.json")
        for which, net in self.nets.items():
            if net is not None and net.frozen:
                save_mask(net, d / f"mask_{which}.dgm", self.model_hash)
        heads = {"task.w": self.task_head.weights.data, "task.b": self.task_head.bias.data,
                 "adv.w": self.adv_head.weights.data, "adv.b": self.adv_head.bias.data}
        save_checkpoint(heads, d / "heads.dgc", self.model_hash)


# ---------------------------------------------------------------------------
# public runs
# ---------------------------------------------------------------------------

def _run_phases(exp: Experiment, include_debias: bool) -> None:
    plan = exp.plan
    for i, phase in enumerate(plan.phases):
        sub = phase.which_subnetwork
        if sub == "E_d" and phase.kind != "evaluate" and not include_debias:
            continue
        if phase.kind in ("pretrain", "evaluate"):
            exp.begin_phase(i, phase.kind, None, phase.epochs)
            if phase.kind == "evaluate":
                exp.evaluate()
            continue
        exp.begin_phase(i, phase.kind, sub, phase.epochs)
        if phase.kind in ("diff_train", "adv_diff_train"):
            exp.nets[sub] = exp.new_net(sub)
        if phase.kind == "magnitude_prune":
            exp.prune(sub)
        elif sub == "E_t":
            exp.train_task_net(i, phase.kind, phase.epochs)
        else:
            exp.train_debias_net(i, phase.kind, phase.epochs)


def run_diffpruning(plan: TrainPlan, pretrained=None, out_dir=None) -> RunRecord:
    """Gate training with the L0 penalty, magnitude pruning to the target, then masked finetuning."""
    if not plan.phase_list("E_t", "diff_train"):
        raise ConfigError("DiffPruning needs a diff_train phase on E_t")
    exp = Experiment(plan, "diffpruning", pretrained, out_dir)
    _run_phases(exp, include_debias=False)
    return exp.finish()


def run_debias(plan: TrainPlan, pretrained=None, out_dir=None) -> RunRecord:
    """Train E_t on the task, then stack E_d on top and train it adversarially."""
    if not plan.phase_list("E_t", "diff_train") or not plan.phase_list("E_d", "adv_diff_train"):
        raise ConfigError("debiasing needs E_t diff phases followed by E_d adversarial phases")
    exp = Experiment(plan, "debias", pretrained, out_dir)
    _run_phases(exp, include_debias=True)
    # optional extra rounds: alternate finetuning of E_t (task only) and E_d (adversarial)
    for r in range(1, plan.debias_rounds):
        for i, phase in enumerate(plan.phases):
            if phase.kind != "diff_finetune":
                continue
            index = r * len(plan.phases) + i
            exp.begin_phase(index, phase.kind, phase.which_subnetwork, phase.epochs)
            if phase.which_subnetwork == "E_t":
                exp.train_task_net(index, phase.kind, phase.epochs)
            else:
                exp.train_debias_net(index, phase.kind, phase.epochs)
    if plan.debias_rounds > 1:
        exp.evaluate()
    return exp.finish()


def train_gates(plan: TrainPlan, pretrained=None) -> DiffSubnetwork:
    """Only the first E_t diff_train phase; returns the unpruned network."""
    phases = plan.phase_list("E_t", "diff_train")
    if not phases:
        raise ConfigError("train_gates needs a diff_train phase on E_t")
    exp = Experiment(plan, "diffpruning", pretrained)
    index = plan.phases.index(phases[0])
    exp.nets["E_t"] = exp.new_net("E_t")
    exp.train_task_net(index, "diff_train", phases[0].epochs)
    return exp.nets["E_t"]


def baseline_epochs(plan: TrainPlan) -> int:
    """Same epoch budget as the E_t DiffPruning phases."""
    return sum(p.epochs for p in plan.phase_list("E_t") if p.kind in ("diff_train", "diff_finetune"))


def run_baseline(plan: TrainPlan, kind: str, pretrained=None, out_dir=None, epochs: int | None = None) -> RunRecord:
    if kind not in ("full_finetune", "frozen_linear_head"):
        raise ConfigError(f"unknown baseline {kind!r}")
    exp = Experiment(plan, kind, pretrained, out_dir)
    epochs = baseline_epochs(plan) if epochs is None else epochs
    exp.begin_phase(0, kind, None, epochs)
    o = plan.optimizer
    tokens, y, _ = exp.train
    if kind == "full_finetune":
        exp.dense = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in exp.theta.items()}
        opt = exp.optimizer([(list(exp.dense.values()), o.dense_lr), (exp.task_head.parameters(), o.head_lr)])
    else:
        opt = exp.optimizer([(exp.task_head.parameters(), o.head_lr)])
        feats = encode_numpy(exp.cfg, exp.inference_params(), tokens)
    for epoch in range(epochs):
        task_l = []
        for idx in exp.batches("baseline", epoch):
            opt.zero_grad()
            if kind == "full_finetune":
                h = encode(exp.cfg, exp.dense, tokens[idx])
            else:
                h = T.Tensor(feats[idx])
            loss = T.softmax_cross_entropy(head_forward(exp.task_head, h), y[idx])
            exp._check(loss, 0, epoch)
            loss.backward()
            opt.step()
            task_l.append(loss.item())
        exp.log_epoch(0, kind, None, epoch, task_l, None, None)
    exp.evaluate()
    return exp.finish()
