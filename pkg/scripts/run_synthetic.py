"""Synthetic end-to-end run: synth -> split -> train -> eval (train and test) -> CAM gallery.

    python3 scripts/run_synthetic.py --work runs/synthetic
"""

import argparse
import json
import sys
from pathlib import Path

from alzmri import cli

CONFIG = Path(__file__).resolve().parent / "configs" / "synthetic.cfg"


def run(argv: list[str]) -> None:
    rc = cli.main(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="runs/synthetic")
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--per-class", type=int, default=80)
    ap.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    args = ap.parse_args()

    work = Path(args.work)
    data, manifest, run_dir = work / "data", work / "manifest.csv", work / "run"
    run(["synth", "--out", str(data), "--per-class", str(args.per_class), "--seed", str(args.seed)])
    run(["split", "--data", str(data), "--out", str(manifest), "--seed", "43"])
    run(["-v", "train", "--data", str(data), "--manifest", str(manifest), "--out", str(run_dir), "--config", args.config])
    for split in ("train", "test"):
        out = work / f"eval_{split}"
        run(["eval", "--run", str(run_dir), "--data", str(data), "--manifest", str(manifest), "--split", split, "--out", str(out)])
        report = json.loads((out / "metrics.json").read_text())
        print(f"{split}: accuracy {report['accuracy']:.4f}  auc {report['auc']:.4f}  rmse {report['rmse']:.4f}")

    classes = sorted(p.name for p in data.iterdir() if p.is_dir())
    for cls in classes:
        image = data / cls / "000.png"
        for method in ("gradcam", "scorecam", "faster-scorecam", "xgradcam"):
            run(["explain", "--run", str(run_dir), "--image", str(image), "--method", method,
                 "--out", str(work / "cams" / f"{cls}_{method}.png")])
    print(f"overlays in {work / 'cams'}")


if __name__ == "__main__":
    main()
