"""Regenerate the shipped demo checkpoint from the demo config.

    python3 scripts/train_demo_checkpoint.py [--config demo]
"""
import argparse
import shutil
import tempfile
from pathlib import Path

from driftlab import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="demo")
    args = ap.parse_args()
    cfg = harness.load_config(args.config)
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "checkpoint.json"
        res = harness.train_checkpoint(cfg, ckpt, Path(tmp) / "training_curve.csv")
        dest = harness.CONFIG_DIR / Path(cfg.checkpoint).name
        shutil.copyfile(ckpt, dest)
    print(f"{res.status} after {len(res.curve)} epochs, written to {dest}")


if __name__ == "__main__":
    main()
