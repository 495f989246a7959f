"""Full demo pipeline: meta-train, covariance study, drift evaluation, report.

    python3 scripts/run_demo.py [--config demo] [--out driftlab_out]
"""
import argparse
import logging

from driftlab import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="demo")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    cfg = harness.load_config(args.config)
    out = harness.output_dir(cfg, args.out)
    summary = harness.run_pipeline(cfg, out)
    print((out / "covariance_table.csv").read_text(), end="")
    print(summary.read_text(), end="")


if __name__ == "__main__":
    main()
