"""How the NCC step size transfers across image sizes.

The raw NCC gradient at x has norm sin(theta) / ||x - mean(x)||, and
||x - mean(x)||^2 grows with the pixel count D.  A beta1 tuned for 256x256
slices therefore moves a 32x32 image about 64 times further relative to its
own contrast.  This script evaluates BlindHarmony on the desk domains for
beta1 = 1000 and for beta1 rescaled by D / 256^2, under both output policies.

    python3 scripts/beta1_scaling.py --workdir runs/desk
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from blindharmony.baselines import DomainTransform, simulate_domain
from blindharmony.fileio import load_checkpoint, load_dataset, read_image
from blindharmony.harmonize import HarmonizeConfig, harmonize_batch
from blindharmony.metrics import score_pairs

DOMAINS = [DomainTransform("exp"), DomainTransform("log"),
           DomainTransform("gamma", gamma_power=0.7), DomainTransform("gamma", gamma_power=1.5)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--reference-size", type=int, default=256)
    args = ap.parse_args()
    w = args.workdir
    model = load_checkpoint(w / "flow.ckpt")
    mean = read_image(w / "flow.mean.bhimg")
    targets = list(load_dataset(w / "test").images)
    scaled = 1000.0 * model.arch.dim / args.reference_size ** 2
    base = HarmonizeConfig()

    print("domain\tbeta1\tpolicy\tpsnr_source\tpsnr_out\tssim_source\tssim_out")
    for t in DOMAINS:
        sources = [simulate_domain(x, t) for x in targets]
        p0, s0 = score_pairs(sources, targets)
        for beta1 in (1000.0, scaled):
            for policy in ("clamp", "minmax"):
                cfg = dataclasses.replace(base, beta1=beta1, output_policy=policy)
                outs = [it.image for it in harmonize_batch(model, sources, mean, cfg)]
                p1, s1 = score_pairs(outs, targets)
                print(f"{t.name}\t{beta1:g}\t{policy}\t{np.mean(p0):.2f}\t{np.mean(p1):.2f}"
                      f"\t{np.mean(s0):.4f}\t{np.mean(s1):.4f}", flush=True)


if __name__ == "__main__":
    main()
