"""PSNR / SSIM and per-(method, domain) report tables."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, InvalidInputError
from .numeric import as_image, minmax_normalize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

REPORT_HEADER = ("method", "domain", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n")


def psnr(x, ref):
    """PSNR in dB for unit peak; ``math.inf`` when the images are identical."""
    x = as_image(x, "x")
    ref = as_image(ref, "ref")
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_taps():
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img, taps):
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    p = SSIM_WINDOW // 2
    return out[p:-p, p:-p]


def ssim_map(x, ref):
    x = as_image(x, "x")
    ref = as_image(ref, "ref")
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise DimensionError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    taps = _gaussian_taps()
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(ref, taps)
    sxx = _filter_valid(x * x, taps) - mu_x ** 2
    syy = _filter_valid(ref * ref, taps) - mu_y ** 2
    sxy = _filter_valid(x * ref, taps) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(x, ref):
    """Mean SSIM over the valid region, data range 1."""
    return float(np.mean(ssim_map(x, ref)))


@dataclass(frozen=True)
class ReportRow:
    method: str
    domain: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n_images: int

    def cells(self):
        return [self.method, self.domain, _fmt(self.psnr_mean), _fmt(self.psnr_std),
                _fmt(self.ssim_mean), _fmt(self.ssim_std), str(self.n_images)]


def _fmt(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.4f}"


def _parse(s):
    return float(s)  # float() already understands inf / nan


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    if np.all(np.isinf(values)) and np.all(values == values[0]):
        return float(values[0]), 0.0
    if np.any(np.isinf(values)):
        return float(np.mean(values)), float("nan")
    return float(values.mean()), float(values.std())


def summarize(method, domain, psnrs, ssims):
    if len(psnrs) == 0:
        raise InvalidInputError("cannot summarize zero images")
    pm, ps = _mean_std(psnrs)
    sm, ss = _mean_std(ssims)
    return ReportRow(method, domain, pm, ps, sm, ss, len(psnrs))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def row(self, method, domain):
        for r in self.rows:
            if r.method == method and r.domain == domain:
                return r
        raise KeyError((method, domain))

    def to_tsv(self, extra=None):
        """Serialize; ``extra`` is an optional ``(column_name, value)`` prepended to every row."""
        header = list(REPORT_HEADER)
        if extra is not None:
            header.insert(0, extra[0])
        lines = ["\t".join(header)]
        for r in self.rows:
            cells = r.cells()
            if extra is not None:
                cells.insert(0, str(extra[1]))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[0].split("\t")
        if tuple(header[-len(REPORT_HEADER):]) != REPORT_HEADER:
            raise InvalidInputError(f"unexpected report header {header}")
        skip = len(header) - len(REPORT_HEADER)
        rows = []
        for ln in lines[1:]:
            c = ln.split("\t")[skip:]
            rows.append(ReportRow(c[0], c[1], _parse(c[2]), _parse(c[3]), _parse(c[4]), _parse(c[5]), int(c[6])))
        return cls(rows)


def score_pairs(outputs, targets, normalize=True):
    """Per-image (psnr, ssim) lists; both images min-max normalized first by default."""
    if len(outputs) != len(targets):
        raise InvalidInputError(f"{len(outputs)} outputs vs {len(targets)} targets")
    psnrs, ssims = [], []
    for out, tgt in zip(outputs, targets):
        if normalize:
            out, tgt = minmax_normalize(out), minmax_normalize(tgt)
        psnrs.append(psnr(out, tgt))
        ssims.append(ssim(out, tgt))
    return psnrs, ssims


def evaluate(methods, domains, source_label="Source"):
    """Score every method on every domain.

    ``methods`` is a sequence of ``(name, fn)`` with ``fn(image) -> image``;
    ``domains`` is a sequence of ``(name, sources, targets)`` with matched,
    equally long lists.  Rows come out method-major, the untouched
    ``Source`` row first, domains in the order given.
    """
    domains = list(domains)
    for name, sources, targets in domains:
        if len(sources) != len(targets):
            raise InvalidInputError(
                f"domain {name!r}: {len(sources)} sources vs {len(targets)} targets"
            )
    report = EvalReport()
    for method, fn in [(source_label, None)] + list(methods):
        for dname, sources, targets in domains:
            outputs = list(sources) if fn is None else [fn(s) for s in sources]
            report.rows.append(summarize(method, dname, *score_pairs(outputs, targets)))
    return report
