"""Closed group gates after gate training: multiplicative vs additive group penalty.

Same seeds, epochs, learning rates and lambda for both; only the way the
group gate enters the penalty differs.
"""
import argparse

from diffgate.config import OptimizerConfig, Phase, TrainPlan
from diffgate.diffnet import closed_group_fraction
from diffgate.pipeline import train_gates


def stability_plan(combination: str, seed: int, epochs: int = 2, gate_lr: float = 0.05) -> TrainPlan:
    return TrainPlan(structured=True, penalty_combination=combination, optimizer=OptimizerConfig(gate_lr=gate_lr),
                     phases=(Phase("pretrain", 8), Phase("diff_train", epochs, "E_t"))).with_seed(seed)


def closed_fractions(seeds=(0, 1, 2), **kw) -> dict[str, list[float]]:
    return {comb: [closed_group_fraction(train_gates(stability_plan(comb, s, **kw))) for s in seeds]
            for comb in ("multiplicative", "additive")}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--gate-lr", type=float, default=0.05)
    args = ap.parse_args()
    res = closed_fractions(epochs=args.epochs, gate_lr=args.gate_lr)
    for comb, fr in res.items():
        print(f"{comb:15s} " + "  ".join(f"{f:.3f}" for f in fr))


if __name__ == "__main__":
    main()
