"""Command-line entry point: ``blindharmony <command> ...``.

Exit codes: 0 success, 2 usage/config, 3 I/O or data, 4 numerical abort,
5 every item failed.
"""

import argparse
import dataclasses
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .baselines import DomainTransform, ReferenceStats, histogram_match, low_freq_replace, simulate_domain
from .errors import BlindHarmonyError, ConfigError, DataError, FileFormatError, NumericalError
from .harmonize import harmonize_batch
from .metrics import EvalReport, score_pairs, summarize
from .numeric import minmax_normalize
from .train import format_log_line, train

log = logging.getLogger("blindharmony")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ALL_FAILED = 0, 2, 3, 4, 5
SWEEPABLE = ("alpha", "beta1", "beta2", "iterations", "mask_quantile")
METHODS = ("blindharmony", "hm", "ssimh")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def worker_count():
    raw = os.environ.get("BH_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"BH_THREADS must be an integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 0:
        raise CommandError("BH_THREADS must be >= 0", EXIT_CONFIG)
    if n == 0:
        return os.cpu_count() or 1
    return n


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise CommandError(f"{what} {path} is not a directory", EXIT_DATA)


def _require_file(path, what):
    if not Path(path).is_file():
        raise CommandError(f"{what} {path} does not exist", EXIT_DATA)


def _load_config(path):
    if path is None:
        return fileio.RunConfig()
    if not Path(path).is_file():
        raise CommandError(f"config file {path} does not exist", EXIT_CONFIG)
    return fileio.read_run_config(path)


# -- train -------------------------------------------------------------------


def cmd_train(args):
    _require_dir(args.data, "data directory")
    cfg = _load_config(args.config)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    dataset = fileio.load_dataset(args.data)
    arch = cfg.architecture(*dataset.shape)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    lines = []

    def on_step(state, nll_bpd, lr):
        lines.append(format_log_line(state.step, nll_bpd, lr))

    def on_checkpoint(state):
        fileio.save_checkpoint(state.model, out)
        fileio.atomic_write_text(log_path, "\n".join(lines) + "\n")

    try:
        model = train(dataset, arch, train_cfg, on_step=on_step, on_checkpoint=on_checkpoint)
    finally:
        if lines:
            fileio.atomic_write_text(log_path, "\n".join(lines) + "\n")
    fileio.save_checkpoint(model, out)
    fileio.write_image(out.with_name(out.stem + ".mean.bhimg"), dataset.mean_image)
    log.info("trained %d steps; %s", train_cfg.total_steps, lines[-1])
    return EXIT_OK


# -- sample ------------------------------------------------------------------


def contact_sheet(images, columns=None):
    n = len(images)
    h, w = images[0].shape
    columns = columns or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / columns))
    sheet = np.zeros((rows * h, columns * w))
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.clip(img, 0.0, 1.0)
    return sheet


def cmd_sample(args):
    if args.n < 0:
        raise CommandError("--n must be >= 0", EXIT_CONFIG)
    if args.temperature < 0:
        raise CommandError("--temperature must be >= 0", EXIT_CONFIG)
    _require_file(args.ckpt, "checkpoint")
    model = fileio.load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.n == 0:
        return EXIT_OK
    if args.temperature == 0:
        samples = model.inverse(np.zeros((args.n, model.arch.dim))).value
    else:
        samples = model.sample(args.seed, args.temperature, n=args.n)
    width = len(str(args.n - 1))
    for i, img in enumerate(samples):
        fileio.write_image(out / f"sample_{i:0{width}d}.bhimg", img)
    fileio.write_image(out / "contact_sheet.pgm", contact_sheet(list(samples)))
    return EXIT_OK


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args):
    _require_dir(args.data, "data directory")
    try:
        transform = DomainTransform(
            args.transform,
            gamma_power=args.gamma_power if args.transform == "gamma" else None,
            log_epsilon=args.log_epsilon,
        )
    except ConfigError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    paths = fileio.list_images(args.data)
    if not paths:
        raise DataError(f"no image files in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = fileio.read_image(p)
        if img.min() < 0.0 or img.max() > 1.0:
            img = minmax_normalize(img)
        fileio.write_image(out / p.name, simulate_domain(img, transform))
    fileio.atomic_write_text(out / "manifest.txt", f"{transform.describe()}\nfiles={len(paths)}\n")
    return EXIT_OK


# -- harmonize ---------------------------------------------------------------


def _read_sources(directory):
    paths = fileio.list_images(directory)
    if not paths:
        raise DataError(f"no image files in {directory}")
    return paths, [minmax_normalize(fileio.read_image(p)) for p in paths]


def cmd_harmonize(args):
    _require_dir(args.source, "source directory")
    cfg = _load_config(args.config)
    paths, sources = _read_sources(args.source)
    out = Path(args.out)
    if args.method == "blindharmony":
        if not args.ckpt:
            raise CommandError("--ckpt is required for method blindharmony", EXIT_CONFIG)
        _require_file(args.ckpt, "checkpoint")
        model = fileio.load_checkpoint(args.ckpt)
        mean = None
        if cfg.harmonize.init_mode == "mean_image":
            if not args.mean_image:
                raise CommandError("--mean-image is required for init_mode mean_image", EXIT_CONFIG)
            _require_file(args.mean_image, "mean image")
            mean = fileio.read_image(args.mean_image)
        items = harmonize_batch(model, sources, mean, cfg.harmonize, workers=worker_count())
        results = [(it.image, it.trace, it.error) for it in items]
    else:
        if not args.data:
            raise CommandError(f"--data (target training set) is required for method {args.method}", EXIT_CONFIG)
        ref = ReferenceStats.from_images(fileio.load_dataset(args.data).images)
        results = []
        for img in sources:
            try:
                if args.method == "hm":
                    results.append((histogram_match(img, ref), None, None))
                else:
                    results.append((low_freq_replace(img, ref, cfg.ssimh_cutoff_radius), None, None))
            except (BlindHarmonyError, ValueError) as exc:
                results.append((None, None, exc))

    out.mkdir(parents=True, exist_ok=True)
    if args.trace:
        Path(args.trace).mkdir(parents=True, exist_ok=True)
    ok = 0
    for p, (img, trace, err) in zip(paths, results):
        if err is not None:
            log.error("%s: %s", p.name, err)
            continue
        ok += 1
        fileio.write_image(out / p.name, img)
        if args.trace and trace is not None:
            fileio.atomic_write_text(Path(args.trace) / f"{p.stem}.trace.tsv", trace.to_tsv())
    log.info("harmonized %d/%d images", ok, len(paths))
    return EXIT_OK if ok else EXIT_ALL_FAILED


# -- evaluate ----------------------------------------------------------------


def read_pairs_manifest(path):
    """Parse a tab-separated manifest: ``domain  source  target  <method>...``.

    Relative paths resolve against the manifest's directory.  Returns the
    method column names and ``{domain: [row dict, ...]}`` in file order.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    header = lines[0].split("\t")
    if header[:3] != ["domain", "source", "target"]:
        raise DataError(f"{path}: header must start with domain, source, target; got {header[:3]}")
    domains = {}
    for lineno, ln in enumerate(lines[1:], 2):
        cells = ln.split("\t")
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        row = {k: (path.parent / v if k != "domain" else v) for k, v in zip(header, cells)}
        domains.setdefault(row["domain"], []).append(row)
    return header[3:], domains


def _score_column(rows, column):
    outputs, targets = [], []
    for row in rows:
        for key in (column, "target"):
            if not Path(row[key]).is_file():
                raise DataError(f"missing file {row[key]}")
        out, tgt = fileio.read_image(row[column]), fileio.read_image(row["target"])
        if out.shape != tgt.shape:
            raise DataError(f"{row[column]} is {out.shape} but target {row['target']} is {tgt.shape}")
        outputs.append(out)
        targets.append(tgt)
    return score_pairs(outputs, targets)


def cmd_evaluate(args):
    _require_file(args.pairs, "pairs manifest")
    columns, domains = read_pairs_manifest(args.pairs)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    missing = [m for m in methods if m not in columns]
    if missing:
        raise DataError(f"methods {missing} not in manifest columns {columns}")
    report = EvalReport()
    for method, column in [("Source", "source")] + [(m, m) for m in methods]:
        for domain, rows in domains.items():
            report.rows.append(summarize(method, domain, *_score_column(rows, column)))
    fileio.atomic_write_text(args.out, report.to_tsv())
    return EXIT_OK


# -- sweep -------------------------------------------------------------------


def _parse_values(raw, param):
    values = []
    for tok in raw.split(","):
        tok = tok.strip()
        try:
            v = float(tok)
        except ValueError:
            raise CommandError(f"--values: {tok!r} is not a number", EXIT_CONFIG) from None
        if param == "iterations":
            if v != int(v):
                raise CommandError(f"iterations must be integral, got {tok}", EXIT_CONFIG)
            v = int(v)
        values.append(v)
    if not values:
        raise CommandError("--values is empty", EXIT_CONFIG)
    return values


def cmd_sweep(args):
    if args.param not in SWEEPABLE:
        raise CommandError(
            f"unknown sweep parameter {args.param!r}; sweepable: {', '.join(SWEEPABLE)}", EXIT_CONFIG
        )
    values = _parse_values(args.values, args.param)
    cfg = _load_config(args.config)
    _require_file(args.ckpt, "checkpoint")
    _require_dir(args.source, "source directory")
    _require_dir(args.target, "target directory")
    model = fileio.load_checkpoint(args.ckpt)
    src_paths, sources = _read_sources(args.source)
    tgt_paths = fileio.list_images(args.target)
    if [p.name for p in src_paths] != [p.name for p in tgt_paths]:
        raise DataError("source and target directories must hold the same file names")
    targets = [fileio.read_image(p) for p in tgt_paths]
    mean = fileio.read_image(args.mean_image) if args.mean_image else None
    domain = args.domain or Path(args.source).name
    base_psnr, base_ssim = score_pairs(sources, targets)
    blocks = []
    for v in values:
        try:
            hcfg = dataclasses.replace(cfg.harmonize, **{args.param: v})
        except ConfigError as exc:
            raise CommandError(str(exc), EXIT_CONFIG) from None
        items = harmonize_batch(model, sources, mean, hcfg, workers=worker_count())
        good = [(it.image, t) for it, t in zip(items, targets) if it.ok]
        if not good:
            raise NumericalError(f"every image failed for {args.param}={v}")
        report = EvalReport([
            summarize("Source", domain, base_psnr, base_ssim),
            summarize("BlindHarmony", domain, *score_pairs([g[0] for g in good], [g[1] for g in good])),
        ])
        blocks.append(report.to_tsv(extra=("param_value", f"{v:g}")))
    text = blocks[0] + "".join(b.split("\n", 1)[1] for b in blocks[1:])
    fileio.atomic_write_text(args.out, text)
    return EXIT_OK


# -- wiring ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="blindharmony", description="Blind MR image harmonization with a flow prior.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the flow prior on a target-domain directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log path (default: <out>.log)")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw images from a trained flow")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("simulate", help="fabricate a source domain by an intensity transform")
    m.add_argument("--data", required=True)
    m.add_argument("--transform", required=True, choices=("exp", "log", "gamma"))
    m.add_argument("--gamma-power", type=float, default=None)
    m.add_argument("--log-epsilon", type=float, default=0.01)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)

    h = sub.add_parser("harmonize", help="harmonize every image in a directory")
    h.add_argument("--ckpt")
    h.add_argument("--source", required=True)
    h.add_argument("--mean-image")
    h.add_argument("--config")
    h.add_argument("--out", required=True)
    h.add_argument("--trace")
    h.add_argument("--method", choices=METHODS, default="blindharmony")
    h.add_argument("--data", help="target training directory (hm / ssimh reference)")
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(func=cmd_harmonize)

    e = sub.add_parser("evaluate", help="PSNR/SSIM report from a pairs manifest")
    e.add_argument("--pairs", required=True)
    e.add_argument("--methods", required=True, help="comma-separated manifest columns")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="harmonize + evaluate across values of one hyperparameter")
    w.add_argument("--param", required=True)
    w.add_argument("--values", required=True)
    w.add_argument("--ckpt", required=True)
    w.add_argument("--source", required=True)
    w.add_argument("--target", required=True)
    w.add_argument("--mean-image")
    w.add_argument("--config")
    w.add_argument("--domain")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CommandError as exc:
        log.error("%s", exc)
        if exc.code == EXIT_CONFIG:
            parser.print_usage(sys.stderr)
        return exc.code
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FileFormatError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
