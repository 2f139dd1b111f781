import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blindharmony.errors import DimensionError, InvalidInputError
from blindharmony.metrics import REPORT_HEADER, EvalReport, evaluate, psnr, score_pairs, ssim, summarize
from blindharmony.phantoms import make_corpus

unit16 = arrays(np.float64, (16, 16), elements=st.floats(0.0, 1.0, allow_nan=False))


def test_psnr_identical_is_inf():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == math.inf


@pytest.mark.parametrize("err, db", [(0.1, 20.0), (0.01, 40.0)])
def test_psnr_uniform_error(err, db):
    x = np.full((8, 8), 0.5)
    assert psnr(x + err, x) == pytest.approx(db, abs=1e-9)


def test_psnr_symmetric_and_decreasing():
    r = np.random.default_rng(1)
    x, noise = r.random((16, 16)), r.normal(size=(16, 16))
    assert psnr(x, x + 0.1 * noise) == psnr(x + 0.1 * noise, x)
    values = [psnr(x + a * noise, x) for a in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_self_is_one():
    x = np.random.default_rng(2).random((16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_binary_is_negative():
    x = np.zeros((16, 16))
    x[:, 8:] = 1.0
    assert ssim(x, 1.0 - x) < 0.0


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_matches_direct_window_sum():
    r = np.random.default_rng(3)
    x, y = r.random((12, 12)), r.random((12, 12))
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(2):
        for j in range(2):
            a, b = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va, vb = (w * a * a).sum() - ma ** 2, (w * b * b).sum() - mb ** 2
            cov = (w * a * b).sum() - ma * mb
            vals.append((2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4)))
    assert ssim(x, y) == pytest.approx(np.mean(vals), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(unit16, unit16)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


# -- reports ---------------------------------------------------------------------


def test_summarize_single_image_has_zero_std():
    row = summarize("m", "d", [30.0], [0.9])
    assert row.psnr_std == 0.0 and row.ssim_std == 0.0 and row.n_images == 1


def test_summarize_all_inf():
    row = summarize("m", "d", [math.inf, math.inf], [1.0, 1.0])
    assert row.psnr_mean == math.inf and row.psnr_std == 0.0
    with pytest.raises(InvalidInputError):
        summarize("m", "d", [], [])


def test_evaluate_identity_on_target():
    imgs = list(make_corpus(3, seed=0, size=16))
    report = evaluate([("Identity", lambda x: x)], [("Target", imgs, imgs)])
    row = report.row("Identity", "Target")
    assert row.psnr_mean == math.inf
    assert row.ssim_mean == pytest.approx(1.0, abs=1e-9)


def test_evaluate_row_order_and_source_first():
    imgs = make_corpus(4, seed=1, size=16)
    doms = [("A", list(imgs[:2]), list(imgs[2:])), ("B", list(imgs[2:]), list(imgs[:2]))]
    methods = [("M1", lambda x: x), ("M2", lambda x: 1 - x)]
    report = evaluate(methods, doms)
    assert [(r.method, r.domain) for r in report.rows] == [
        ("Source", "A"), ("Source", "B"), ("M1", "A"), ("M1", "B"), ("M2", "A"), ("M2", "B"),
    ]
    again = evaluate(methods, doms)
    assert again.rows == report.rows


def test_evaluate_length_mismatch():
    imgs = list(make_corpus(3, seed=2, size=16))
    with pytest.raises(InvalidInputError):
        evaluate([], [("A", imgs, imgs[:2])])


def test_score_pairs_normalizes():
    x = make_corpus(1, seed=3, size=16)[0]
    p, s = score_pairs([0.5 * x + 0.2], [x])
    assert p[0] > 200.0
    assert s[0] == pytest.approx(1.0, abs=1e-9)


def test_report_tsv_roundtrip():
    report = EvalReport([summarize("Source", "Exp", [math.inf, math.inf], [1.0, 1.0]),
                         summarize("HM", "Exp", [20.0, 22.0], [0.5, 0.7])])
    text = report.to_tsv()
    lines = text.splitlines()
    assert tuple(lines[0].split("\t")) == REPORT_HEADER
    assert lines[1] == "Source\tExp\tinf\t0.0000\t1.0000\t0.0000\t2"
    assert lines[2] == "HM\tExp\t21.0000\t1.0000\t0.6000\t0.1000\t2"
    back = EvalReport.from_tsv(text)
    assert back.rows[0].psnr_mean == math.inf
    assert back.row("HM", "Exp").psnr_mean == 21.0


def test_report_tsv_extra_column():
    report = EvalReport([summarize("HM", "Exp", [20.0], [0.5])])
    text = report.to_tsv(extra=("param_value", 0.5))
    assert text.splitlines()[0].startswith("param_value\tmethod")
    assert EvalReport.from_tsv(text).rows == report.rows
