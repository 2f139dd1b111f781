"""Write a train/test phantom corpus as .bhimg files.

    python3 scripts/make_phantoms.py --out runs/phantoms --train 500 --test 50
"""

import argparse
from pathlib import Path

from blindharmony.fileio import write_image
from blindharmony.phantoms import make_corpus


def write_split(directory, images):
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_image(directory / f"slice_{i:04d}.bhimg", img)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--train", type=int, default=500)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0, help="train seed; the test split uses seed + 1")
    args = ap.parse_args()
    write_split(args.out / "train", make_corpus(args.train, seed=args.seed, size=args.size))
    write_split(args.out / "test", make_corpus(args.test, seed=args.seed + 1, size=args.size))
    print(f"wrote {args.train} train and {args.test} test phantoms under {args.out}")


if __name__ == "__main__":
    main()
