"""Optimizer / learning-rate / scheduler grid on the synthetic dataset.

Each cell trains the reduced model from scripts/configs/synthetic.cfg with one
override set and reports test accuracy, AUC and the final learning rate.

    python3 scripts/ablation.py --work runs/ablation --epochs 10
"""

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

from alzmri import cli
from alzmri.training import TrainLog

CONFIG = Path(__file__).resolve().parent / "configs" / "synthetic.cfg"
GRID = {
    "optimizer": ["adam", "sgd", "rmsprop"],
    "lr": ["1e-3", "1e-4"],
    "scheduler": ["plateau", "exponential"],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--per-class", type=int, default=40)
    args = ap.parse_args()

    work = Path(args.work)
    data, manifest = work / "data", work / "manifest.csv"
    if cli.main(["synth", "--out", str(data), "--per-class", str(args.per_class)]) != 0:
        sys.exit(1)
    if cli.main(["split", "--data", str(data), "--out", str(manifest)]) != 0:
        sys.exit(1)

    rows = []
    keys = list(GRID)
    for values in itertools.product(*GRID.values()):
        tag = "_".join(f"{k}-{v}" for k, v in zip(keys, values))
        run_dir = work / tag
        argv = ["train", "--data", str(data), "--manifest", str(manifest), "--out", str(run_dir),
                "--config", str(CONFIG), "--epochs", str(args.epochs)]
        for k, v in zip(keys, values):
            argv += ["--set", f"{k}={v}"]
        if cli.main(argv) != 0 or cli.main(["eval", "--run", str(run_dir), "--data", str(data), "--manifest",
                                            str(manifest), "--out", str(run_dir / "eval")]) != 0:
            rows.append(dict(zip(keys, values), accuracy="failed", auc="", final_lr=""))
            continue
        report = json.loads((run_dir / "eval" / "metrics.json").read_text())
        log = TrainLog.from_csv((run_dir / cli.LOG_FILE).read_text())
        rows.append(dict(zip(keys, values), accuracy=report["accuracy"], auc=report["auc"], final_lr=log.records[-1].lr))
        print(tag, f"acc={report['accuracy']:.3f}")

    with open(work / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {work / 'ablation.csv'}")


if __name__ == "__main__":
    main()
