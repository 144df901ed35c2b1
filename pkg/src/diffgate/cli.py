"""Command-line entry point.

Exit codes: 0 success, 2 bad configuration or usage, 3 runtime failure
(including artifacts trained against a different checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import probe_features
from .config import TrainPlan, load_plan, model_hash, save_plan
from .data import as_arrays, generate, metrics
from .diffnet import magnitude_prune, stack_params
from .encoder import Head, encode_numpy, group_shapes, predict
from .errors import ConfigError, DiffgateError, IncompatibleMaskError
from .pipeline import obtain_pretrained, run_debias, run_diffpruning, RunRecord
from .report import demo_record_paths, summarize, to_csv, to_table
from .rng import RngState
from .serialization import (load_checkpoint, load_gate_state, load_mask, read_checkpoint_header,
                            read_mask_header, save_checkpoint, save_mask)

log = logging.getLogger("diffgate")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class Outputs:
    """Files written by one command: all under ``--out``, never onto an input."""

    def __init__(self, out: str | None, inputs: list[str]):
        if out is None:
            raise ConfigError("--out is required for this command")
        self.root = Path(out)
        self.inputs = {Path(p).resolve() for p in inputs if p}

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.resolve() in self.inputs:
            raise ConfigError(f"refusing to overwrite input file {p}")
        self.root.mkdir(parents=True, exist_ok=True)
        return p


def _plan(args) -> TrainPlan:
    if not args.config:
        raise ConfigError("--config is required for this command")
    plan = load_plan(args.config)
    return plan.with_seed(args.seed) if args.seed is not None else plan


def _check_hash(found: str, expected: str, what: str, force: bool) -> None:
    if found != expected:
        if force:
            log.warning("%s hash %s does not match %s; continuing because of --force", what, found, expected)
            return
        raise IncompatibleMaskError(expected, found)


def _pretrained(args, plan: TrainPlan) -> dict[str, np.ndarray]:
    if args.checkpoint is None:
        return obtain_pretrained(plan)
    _check_hash(read_checkpoint_header(args.checkpoint), model_hash(plan), "checkpoint", args.force)
    return load_checkpoint(args.checkpoint, group_shapes(plan.encoder))


def _masks(args, plan: TrainPlan):
    shapes = group_shapes(plan.encoder)
    nets = []
    for path in args.mask or []:
        _check_hash(read_mask_header(path), model_hash(plan), f"mask {path}", args.force)
        nets.append(load_mask(path, shapes))
    return nets


def _finish_run(record: RunRecord, out: Outputs, plan: TrainPlan) -> None:
    save_plan(plan, out.path("config.json"))
    print(json.dumps({"record_hash": record.record_hash, "metrics": record.metrics}, sort_keys=True))


# -- commands ---------------------------------------------------------------

def cmd_pretrain(args) -> None:
    plan = _plan(args)
    out = Outputs(args.out, [args.config])
    params = obtain_pretrained(plan)
    save_checkpoint(params, out.path("checkpoint.dgc"), model_hash(plan))
    save_plan(plan, out.path("config.json"))
    print(model_hash(plan))


def cmd_train(args) -> None:
    plan = _plan(args)
    out = Outputs(args.out, [args.config, args.checkpoint])
    record = run_diffpruning(plan, _pretrained(args, plan), out_dir=out.root)
    _finish_run(record, out, plan)


def cmd_debias(args) -> None:
    plan = _plan(args)
    out = Outputs(args.out, [args.config, args.checkpoint])
    record = run_debias(plan, _pretrained(args, plan), out_dir=out.root)
    _finish_run(record, out, plan)


def cmd_prune(args) -> None:
    plan = _plan(args)
    if not args.gates:
        raise ConfigError("prune needs --gates (a gate state written by train or debias)")
    out = Outputs(args.out, [args.config, args.gates])
    _check_hash(read_checkpoint_header(args.gates), model_hash(plan), "gate state", args.force)
    g = plan.gate
    net = load_gate_state(args.gates, group_shapes(plan.encoder), beta=g.beta, gamma=g.gamma, zeta=g.zeta,
                          penalty_combination=plan.penalty_combination)
    eta = plan.target_sparsity if args.which == "E_t" else plan.debias_target_sparsity
    pruned, report = magnitude_prune(net, eta)
    save_mask(pruned, out.path(f"mask_{args.which}.dgm"), model_hash(plan))
    out.path("sparsity.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"kept {report.nonzero_diff} / {report.total_params}")


def evaluate_params(plan: TrainPlan, params, task_head: Head | None) -> dict:
    """Task metrics from ``task_head`` (when given) and linear probes for task and attribute."""
    train, _, test = generate(plan.synth)
    tr_tok, tr_y, tr_a = as_arrays(train)
    te_tok, te_y, te_a = as_arrays(test)
    tr_h = encode_numpy(plan.encoder, params, tr_tok)
    te_h = encode_numpy(plan.encoder, params, te_tok)
    rng = RngState(plan.seeds["probe"], "probe")
    out = {}
    if task_head is not None:
        out["task_acc"], out["task_bac"] = metrics(predict(task_head, te_h), te_y)
    out["probe_task_acc"], out["probe_task_bac"] = probe_features(tr_h, tr_y, te_h, te_y, plan.probe_epochs,
                                                                  rng.stream("task"))
    out["adv_acc"], out["adv_bac"] = probe_features(tr_h, tr_a, te_h, te_a, plan.probe_epochs, rng.stream("probe"))
    return out


def cmd_eval(args) -> None:
    plan = _plan(args)
    out = Outputs(args.out, [args.config, args.checkpoint, args.heads] + (args.mask or []))
    theta = _pretrained(args, plan)
    nets = _masks(args, plan)
    head = None
    if args.heads:
        _check_hash(read_checkpoint_header(args.heads), model_hash(plan), "heads", args.force)
        h = load_checkpoint(args.heads)
        H = plan.encoder.hidden_dim
        head = Head("task", T.Tensor(h["task.w"].reshape(H, -1).copy()), T.Tensor(h["task.b"].copy()))
    with T.no_grad():
        params = stack_params(theta, nets)
    result = evaluate_params(plan, params, head)
    out.path("metrics.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    print(json.dumps(result, sort_keys=True))


def _mask_to_json(path, shapes) -> dict:
    net = load_mask(path, shapes)
    groups = {}
    for gid in sorted(net.groups):
        idx = np.flatnonzero(net.frozen_mask[gid].reshape(-1))
        groups[gid] = {"shape": list(shapes[gid]), "index": idx.tolist(),
                       "value": net.groups[gid].w.data.reshape(-1)[idx].tolist()}
    return {"config_hash": read_mask_header(path), "groups": groups}


def _json_to_mask(doc: dict, shapes):
    from .diffnet import DiffSubnetwork, GroupDiff

    groups, masks = {}, {}
    for gid, g in doc["groups"].items():
        if gid not in shapes or tuple(g["shape"]) != tuple(shapes[gid]):
            raise ConfigError(f"mask group {gid!r} does not match the encoder config")
        size = int(np.prod(shapes[gid]))
        m, w = np.zeros(size), np.zeros(size)
        idx = np.asarray(g["index"], dtype=np.int64)
        m[idx] = 1.0
        w[idx] = np.asarray(g["value"], dtype=np.float64)
        masks[gid] = m.reshape(shapes[gid])
        groups[gid] = GroupDiff(T.Tensor(w.reshape(shapes[gid])))
    excluded = tuple(g for g in shapes if g not in groups)
    return DiffSubnetwork(groups, frozen_mask=masks, excluded=excluded)


def cmd_export_mask(args) -> None:
    """Binary mask to JSON, or JSON back to binary, chosen by the input suffix."""
    plan = _plan(args)
    if not args.mask or len(args.mask) != 1:
        raise ConfigError("export-mask takes exactly one --mask")
    src = Path(args.mask[0])
    out = Outputs(args.out, [args.config, str(src)])
    shapes = group_shapes(plan.encoder)
    if src.suffix == ".json":
        doc = json.loads(src.read_text(encoding="utf-8"))
        _check_hash(doc["config_hash"], model_hash(plan), f"mask {src}", args.force)
        dest = out.path(src.stem + ".dgm")
        save_mask(_json_to_mask(doc, shapes), dest, doc["config_hash"])
    else:
        dest = out.path(src.stem + ".json")
        dest.write_text(json.dumps(_mask_to_json(src, shapes), sort_keys=True) + "\n", encoding="utf-8")
    print(dest)


def cmd_apply_mask(args) -> None:
    """Fold masks into a dense checkpoint (theta + sum of deltas)."""
    plan = _plan(args)
    out = Outputs(args.out, [args.config, args.checkpoint] + (args.mask or []))
    theta = _pretrained(args, plan)
    nets = _masks(args, plan)
    with T.no_grad():
        params = {k: v.data for k, v in stack_params(theta, nets).items()}
    dest = out.path("checkpoint.dgc")
    save_checkpoint(params, dest, model_hash(plan))
    print(dest)


def cmd_report(args) -> None:
    paths = []
    for p in args.records or []:
        p = Path(p)
        paths += sorted(p.rglob("record.json")) if p.is_dir() else [p]
    if not args.records:
        paths = demo_record_paths()
    if not paths:
        raise ConfigError("no run records found")
    rows = summarize(RunRecord.load(p) for p in paths)
    table = to_table(rows)
    if args.out is not None:
        out = Outputs(args.out, [str(p) for p in paths])
        out.path("report.csv").write_text(to_csv(rows), encoding="utf-8")
        out.path("report.txt").write_text(table, encoding="utf-8")
    print(table, end="")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "prune": cmd_prune,
    "debias": cmd_debias,
    "eval": cmd_eval,
    "export-mask": cmd_export_mask,
    "apply-mask": cmd_apply_mask,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffgate", description="Sparse diff subnetworks with L0 gates.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="plan JSON")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override every seed stream of the plan")
        p.add_argument("--force", action="store_true", help="accept artifacts with a different checkpoint hash")
        if name in ("train", "debias", "eval", "apply-mask"):
            p.add_argument("--checkpoint", help="pretrained checkpoint (pretrained on the fly if omitted)")
        if name in ("eval", "apply-mask", "export-mask"):
            p.add_argument("--mask", action="append", help="mask file, repeatable; applied in order")
        if name == "eval":
            p.add_argument("--heads", help="heads checkpoint written by train or debias")
        if name == "prune":
            p.add_argument("--gates", help="gate state written by train or debias")
            p.add_argument("--which", choices=("E_t", "E_d"), default="E_t")
        if name == "report":
            p.add_argument("records", nargs="*", help="record.json files or run directories")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DIFFGATE_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IncompatibleMaskError as e:
        print(f"error: hash mismatch\n  expected: {e.expected}\n  found:    {e.found}", file=sys.stderr)
        return 3
    except (DiffgateError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
