"""Desk-scale analogue of the main comparison table, run end to end through the CLI.

Steps: phantoms -> train -> simulate (Exp, Log, Gamma 0.7) -> harmonize with
BlindHarmony, HM and SSIMH -> pairs manifest -> evaluate.  Everything lands in
``--workdir``; the final table is ``<workdir>/report.tsv``.

    python3 scripts/desk_table1.py --workdir runs/desk
    python3 scripts/desk_table1.py --workdir runs/desk --skip-train --harmonize-config my.cfg
"""

import argparse
import sys
from pathlib import Path

from blindharmony.cli import main as cli
from blindharmony.fileio import write_image
from blindharmony.phantoms import make_corpus

DOMAINS = {
    "Exp": ["--transform", "exp"],
    "Log": ["--transform", "log"],
    "Gamma0.7": ["--transform", "gamma", "--gamma-power", "0.7"],
}
METHODS = {"BlindHarmony": "blindharmony", "HM": "hm", "SSIMH": "ssimh"}

TRAIN_CONFIG = """\
levels = 3
steps_per_level = 7
coupling_hidden_width = 16
coupling_hidden_layers = 2
batch_size = 16
total_steps = {steps}
learning_rate = 0.0005
checkpoint_every = 500
seed = 0
"""

DEFAULT_HARMONIZE = "alpha = 0.001\nbeta1 = 1000\nbeta2 = 0.001\niterations = 10\n"


def run(argv):
    print("$ blindharmony " + " ".join(argv), flush=True)
    code = cli(argv)
    if code != 0:
        sys.exit(f"command failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--skip-train", action="store_true", help="reuse <workdir>/flow.ckpt")
    ap.add_argument("--harmonize-config", type=Path, help="defaults to alpha=0.001 beta1=1000 beta2=0.001 iterations=10")
    args = ap.parse_args()

    w = args.workdir
    w.mkdir(parents=True, exist_ok=True)
    for split, n, seed in (("train", args.n_train, 0), ("test", args.n_test, 1)):
        d = w / split
        if not d.exists():
            d.mkdir()
            for i, img in enumerate(make_corpus(n, seed=seed)):
                write_image(d / f"slice_{i:04d}.bhimg", img)

    ckpt = w / "flow.ckpt"
    if not args.skip_train:
        (w / "train.cfg").write_text(TRAIN_CONFIG.format(steps=args.steps))
        run(["train", "--data", str(w / "train"), "--config", str(w / "train.cfg"), "--out", str(ckpt)])
    hcfg = args.harmonize_config
    if hcfg is None:
        hcfg = w / "harmonize.cfg"
        hcfg.write_text(DEFAULT_HARMONIZE)

    for name, flags in DOMAINS.items():
        src = w / "src" / name
        run(["simulate", "--data", str(w / "test"), *flags, "--out", str(src)])
        for column in METHODS.values():
            argv = ["harmonize", "--method", column, "--source", str(src), "--out", str(w / "out" / name / column)]
            if column == "blindharmony":
                argv += ["--ckpt", str(ckpt), "--mean-image", str(w / "flow.mean.bhimg"), "--config", str(hcfg),
                         "--trace", str(w / "trace" / name)]
            else:
                argv += ["--data", str(w / "train")]
            run(argv)

    rows = ["\t".join(["domain", "source", "target", *METHODS])]
    names = sorted(p.name for p in (w / "test").iterdir())
    for name in DOMAINS:
        for n in names:
            rows.append("\t".join([name, f"src/{name}/{n}", f"test/{n}",
                                   *[f"out/{name}/{c}/{n}" for c in METHODS.values()]]))
    (w / "pairs.tsv").write_text("\n".join(rows) + "\n")
    run(["evaluate", "--pairs", str(w / "pairs.tsv"), "--methods", ",".join(METHODS), "--out", str(w / "report.tsv")])
    print((w / "report.tsv").read_text())


if __name__ == "__main__":
    main()
