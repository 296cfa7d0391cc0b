import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builtcount.metrics import BAND_COLUMNS, RESIDUAL_COLUMNS, band_report, band_rows, evaluate, write_report

from oracles import naive_evaluate


def test_small_example():
    r = evaluate([(4, 3.0), (4, 5.0)])
    assert r.mae == 1.0 and r.tae_total == 2.0
    assert math.isnan(r.r2) and r.notes


def test_perfect():
    r = evaluate([(0, 0.0), (10, 10.0), (70, 70.0)])
    assert r.mae == 0.0 and r.r2 == 1.0


def test_mean_predictor_r2_zero(rng):
    t = rng.integers(0, 90, 40)
    r = evaluate([(a, t.mean()) for a in t])
    assert abs(r.r2) < 1e-9


def test_bands_by_truth():
    r = evaluate([(30, 70.0), (31, 0.0), (61, 61.0)])
    assert (r.tae_low, r.tae_medium, r.tae_high) == (40.0, 31.0, 0.0)
    assert [x.band for x in r.residuals] == ["LOW", "MEDIUM", "HIGH"]


def test_errors():
    with pytest.raises(ValueError):
        evaluate([])
    with pytest.raises(ValueError):
        evaluate([(-1, 0.0)])


def test_rounded_report():
    r = evaluate([(3, 2.6), (0, -1.2)], rounded=True)
    assert [x.prediction for x in r.residuals] == [3.0, 0.0]
    assert r.mae == 0.0


@pytest.mark.parametrize("n", [50, 1000])
def test_matches_naive_oracle(n):
    rng = np.random.default_rng(n)
    truths = rng.integers(0, 120, n).tolist()
    preds = (np.array(truths) + rng.normal(0, 8, n)).tolist()
    r = evaluate(list(zip(truths, preds)))
    o = naive_evaluate(truths, preds)
    assert abs(r.tae_low - o["tae"]["LOW"]) < 1e-9
    assert abs(r.tae_medium - o["tae"]["MEDIUM"]) < 1e-9
    assert abs(r.tae_high - o["tae"]["HIGH"]) < 1e-9
    assert abs(r.tae_total - o["total"]) < 1e-9
    assert abs(r.mae - o["mae"]) < 1e-9
    assert abs(r.r2 - o["r2"]) < 1e-9


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 200), st.floats(-50, 250, allow_nan=False)), min_size=1, max_size=60),
       st.randoms(use_true_random=False))
def test_partition_and_permutation(pairs, rnd):
    r = evaluate(pairs)
    assert r.tae_total == r.tae_low + r.tae_medium + r.tae_high
    assert r.mae == r.tae_total / r.n_images
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert evaluate(shuffled).mae == pytest.approx(r.mae, rel=1e-12, abs=1e-12)
    assert sum(row["images"] for row in band_rows(r)) == len(pairs)


def test_band_report_only_low():
    r = evaluate([(3, 2.0), (5, 5.5)])
    rows = band_rows(r)
    assert [(x["band"], x["images"], x["tae"]) for x in rows] == [("LOW", 2, 1.5), ("MEDIUM", 0, 0.0), ("HIGH", 0, 0.0)]
    text = band_report(r)
    assert "Low-Count (0 to 30)" in text and "MAE" in text


def test_write_report(tmp_path, rng):
    t = rng.integers(0, 100, 30)
    r = evaluate([(a, a + 1.5) for a in t], ids=[f"img{i}" for i in range(30)])
    paths = write_report(r, tmp_path, "x")
    lines = paths["residuals"].read_text().splitlines()
    assert lines[0].split("\t") == list(RESIDUAL_COLUMNS) and len(lines) == 31
    assert lines[1].startswith("img0\t")
    bands = [l.split("\t") for l in paths["bands"].read_text().splitlines()]
    assert bands[0] == list(BAND_COLUMNS)
    assert sum(int(b[2]) for b in bands[1:]) == 30
    assert sum(float(b[4]) for b in bands[1:]) == pytest.approx(45.0)
    assert "mae: 1.5" in paths["summary"].read_text()
