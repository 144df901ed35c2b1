"""Regenerate the RunRecords bundled with the package (used by ``diffgate report``)."""
import shutil
import tempfile
from pathlib import Path

from diffgate.pipeline import run_baseline, run_debias

from run_demo import demo_plan

DEST = Path(__file__).resolve().parents[1] / "src" / "diffgate" / "demo_records"


def main():
    plan = demo_plan(0)
    DEST.mkdir(exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        for name, run in (("baseline", lambda d: run_baseline(plan, "full_finetune", out_dir=d)),
                          ("diffpruning", lambda d: run_debias(plan, out_dir=d))):
            run(Path(tmp) / name)
            shutil.copy(Path(tmp) / name / "record.json", DEST / f"{name}.json")
            print("wrote", DEST / f"{name}.json")


if __name__ == "__main__":
    main()
