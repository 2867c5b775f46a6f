"""Run the reference experiment: gradient-free split training with the full
defense suite, then the attack/defense comparison grid.

Usage: python scripts/run_reference.py [out_dir]
"""

import sys
from pathlib import Path

from splitstream.config import load_config
from splitstream.experiment import run_experiment

ROOT = Path(__file__).parent.parent


def main():
    cfg = load_config(ROOT / "configs" / "reference.ini")
    if len(sys.argv) > 1:
        cfg.out_dir = sys.argv[1]
    out = run_experiment(cfg)
    print((Path(out) / "summary.md").read_text())
    print(f"full artifacts in {out}")


if __name__ == "__main__":
    main()
