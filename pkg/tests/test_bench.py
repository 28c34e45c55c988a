import csv
import math

import numpy as np
import pytest

from tools.attention import attention_baseline, random_projections, softmax_rows
from tools.bench import CSV_HEADER, BenchRecord, BenchResult, bench, fit_slope, measure, write_bench_csv


def _attention_reference(x, proj):
    B, C, H, W = x.shape
    wq, wk, wv = (p.astype(np.float64) for p in proj)
    out = np.empty((B, C, H * W))
    for b in range(B):
        t = x[b].reshape(C, -1).T.astype(np.float64)
        s = (t @ wq) @ (t @ wk).T / math.sqrt(C)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        out[b] = (a @ (t @ wv)).T
    return out.reshape(B, C, H, W)


def test_attention_matches_reference(rng):
    x = rng.normal(size=(2, 4, 3, 5)).astype(np.float32)
    proj = random_projections(4, seed=1)
    got = attention_baseline(x, proj)
    assert got.shape == x.shape
    np.testing.assert_allclose(got, _attention_reference(x, proj), atol=1e-5)


def test_attention_chunking_is_transparent(rng):
    x = rng.normal(size=(1, 3, 4, 4))
    proj = random_projections(3, seed=2, dtype=np.float64)
    np.testing.assert_allclose(attention_baseline(x, proj, chunk=5), attention_baseline(x, proj), atol=1e-12)
    with pytest.raises(ValueError):
        attention_baseline(np.zeros((3, 4, 4)))


def test_softmax_rows_stable():
    s = softmax_rows(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))
    np.testing.assert_allclose(s, [[0.5, 0.5], [1.0, 0.0]])


def _records(slope, resolutions=(16, 32, 64, 128)):
    return [BenchRecord("hco", r, r * r, 8, 5, 1e-6 * (r * r) ** slope, 0) for r in resolutions]


def test_fit_slope_recovers_exponent():
    assert fit_slope(_records(1.5)) == pytest.approx(1.5)
    assert fit_slope(_records(2.0)) == pytest.approx(2.0)


def test_fit_slope_skips_small_resolutions():
    recs = _records(1.0)
    recs[0].median_s = 1.0
    assert fit_slope(recs) == pytest.approx(1.0)
    assert math.isnan(fit_slope(_records(1.0, (8, 16, 32))))


def test_measure_reports_positive_values():
    median, peak, spread = measure(lambda: np.ones(10_000), repeats=5, warmup=2)
    assert median > 0 and spread >= 0
    assert peak >= 80_000


def test_bench_validates_arguments():
    with pytest.raises(ValueError, match="未知算子"):
        bench("conv", [32])
    with pytest.raises(ValueError, match="递增"):
        bench("hco", [64, 32])
    with pytest.raises(ValueError):
        bench("hco", [32], repeats=3)
    with pytest.raises(ValueError):
        bench("hco", [32], warmup=1)


def test_bench_small_run_and_csv(tmp_path):
    logs = []
    result = bench("dct", [8, 16], channels=4, repeats=5, warmup=2, log_callback=logs.append)
    assert [r.tokens for r in result.records] == [64, 256]
    assert math.isnan(result.slope)
    assert any("[警告]" in line for line in logs)

    path = tmp_path / "bench.csv"
    write_bench_csv([result, BenchResult("hco")], str(path))
    rows = list(csv.reader(path.read_text(encoding="utf-8").splitlines()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 3
    assert rows[1][0] == "dct" and rows[1][1] == "8"


def test_unreliable_flag():
    rec = BenchRecord("hco", 32, 1024, 8, 5, 1e-3, 0, spread=0.5)
    assert rec.unreliable
    assert not BenchRecord("hco", 32, 1024, 8, 5, 1e-3, 0, spread=0.1).unreliable


@pytest.mark.bench
def test_hco_scales_below_attention():
    grid = [32, 64, 128, 256]
    hco = bench("hco", grid, channels=64, repeats=5)
    attn = bench("attention", grid, channels=64, repeats=5)
    assert 1.3 <= hco.slope <= 1.7
    assert 1.8 <= attn.slope <= 2.2
    assert hco.records[-1].median_s < attn.records[-1].median_s


@pytest.mark.bench
@pytest.mark.parametrize("op", ["hco", "attention"])
def test_median_stable_when_repeats_double(op):
    short = bench(op, [64], channels=64, repeats=5).records[0].median_s
    long = bench(op, [64], channels=64, repeats=10).records[0].median_s
    assert abs(long - short) / short <= 0.10
