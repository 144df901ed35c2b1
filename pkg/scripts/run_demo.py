"""Full debiasing demo at the default desk config: baseline, E_t, stacked E_d, report.

    python3 scripts/run_demo.py --out runs/demo
"""
import argparse
import logging
import time
from pathlib import Path

from diffgate.config import TrainPlan, debias_phases, save_plan
from diffgate.data import SynthSpec
from diffgate.pipeline import run_baseline, run_debias
from diffgate.report import summarize, to_csv, to_table


def demo_plan(seed: int = 0) -> TrainPlan:
    synth = SynthSpec(task_attr_correlation=0.6, attr_signal_strength=0.9)
    return TrainPlan(synth=synth, phases=debias_phases()).with_seed(seed)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    plan = demo_plan(args.seed)
    t0 = time.perf_counter()
    base = run_baseline(plan, "full_finetune", out_dir=out / "baseline")
    deb = run_debias(plan, out_dir=out / "diffpruning")
    save_plan(plan, out / "config.json")
    rows = summarize([base, deb])
    (out / "report.csv").write_text(to_csv(rows))
    print(to_table(rows), end="")
    m = deb.metrics
    print(f"probe bac with E_d {m['final']['adv_bac']:.3f}, without {m['without_debias']['adv_bac']:.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
