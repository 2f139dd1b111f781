"""beta1 sweep on the Gamma 1.5 failure-case domain.

Needs a workdir prepared by ``desk_table1.py`` (train/, test/, flow.ckpt).

    python3 scripts/sweep_gamma15.py --workdir runs/desk --values 1000,500
"""

import argparse
import sys
from pathlib import Path

from blindharmony.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--values", default="1000,500")
    args = ap.parse_args()
    w = args.workdir
    src = w / "src" / "Gamma1.5"
    if cli(["simulate", "--data", str(w / "test"), "--transform", "gamma", "--gamma-power", "1.5",
            "--out", str(src)]) != 0:
        sys.exit("simulate failed")
    cfg = w / "harmonize.cfg"
    if not cfg.exists():
        cfg.write_text("alpha = 0.001\nbeta1 = 1000\nbeta2 = 0.001\niterations = 10\n")
    out = w / "sweep_gamma15.tsv"
    code = cli(["sweep", "--param", "beta1", "--values", args.values, "--ckpt", str(w / "flow.ckpt"),
                "--source", str(src), "--target", str(w / "test"), "--mean-image", str(w / "flow.mean.bhimg"),
                "--config", str(cfg), "--domain", "Gamma1.5", "--out", str(out)])
    if code != 0:
        sys.exit(f"sweep failed with exit code {code}")
    print(out.read_text())


if __name__ == "__main__":
    main()
