import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comets.data import MultivariateSeries, SyntheticDatasetSpec, generate, raw_layout, stock_layout
from comets.metrics import (
    REPORT_SCHEMA,
    CorrelationWindowSpec,
    InsufficientData,
    aggregate_returns,
    correlation_benchmark,
    correlation_matrix,
    cross_correlation_distance,
    cut_windows,
    discriminative_score,
    evaluate,
    pearson,
    stylized_facts_report,
    wasserstein_1d,
    windowed_correlations,
)

from helpers import pearson_oracle, wasserstein_oracle, windowed_oracle


# --------------------------------------------------------------------------- brute-force oracles


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        y = y + rng.uniform(-1, 1) * x
        assert abs(pearson(x, y) - pearson_oracle(list(x), list(y))) <= 1e-9
        a = rng.standard_normal(int(rng.integers(1, 30)))
        b = rng.standard_normal(int(rng.integers(1, 30))) * 2 + 0.5
        assert abs(wasserstein_1d(a, b) - wasserstein_oracle(list(a), list(b))) <= 1e-9
        x2, y2 = rng.standard_normal(n), rng.standard_normal(n)
        d = (pearson_oracle(list(x), list(y)) - pearson_oracle(list(x2), list(y2))) ** 2
        assert abs(cross_correlation_distance((x, y), (x2, y2)) - d) <= 1e-9


def test_windowed_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T, C = int(rng.integers(10, 60)), 3
        x = rng.standard_normal((T, C))
        w = int(rng.integers(2, T + 1))
        stride = int(rng.integers(1, 8))
        got = windowed_correlations(x, (0, 2), CorrelationWindowSpec(w, stride))
        np.testing.assert_allclose(got, windowed_oracle(x, 0, 2, w, stride), atol=1e-9, rtol=0)
        assert len(got) == (T - w) // stride + 1


# --------------------------------------------------------------------------- pearson


def test_pearson_examples():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert abs(pearson(x, x) - 1.0) <= 1e-15
    assert abs(pearson(x, -x) + 1.0) <= 1e-15
    assert abs(pearson([1, 2, 4], [1, 3, 5]) - pearson_oracle([1, 2, 4], [1, 3, 5])) <= 1e-15


def test_pearson_constant_and_errors():
    assert pearson([3, 3, 3], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 10_000))
def test_pearson_affine_invariance(a, b, c, d, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    assert abs(pearson(a * x + b, c * y + d) - pearson(x, y)) <= 1e-9


def test_correlation_matrix_agrees_with_pearson():
    x = np.random.default_rng(2).standard_normal((50, 4))
    x[:, 3] = 1.0
    m = correlation_matrix(x)
    for i in range(4):
        for j in range(4):
            ref = pearson(x[:, i], x[:, j]) if i != j or i == 3 else 1.0
            assert abs(m[i, j] - ref) <= 1e-12


# --------------------------------------------------------------------------- cross-correlation distance


def _pair_with(rho: float, seed: int):
    """Two series whose sample correlation is exactly ``rho``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(200)
    z = rng.standard_normal(200)
    x, z = x - x.mean(), z - z.mean()
    z -= z @ x / (x @ x) * x
    z *= np.linalg.norm(x) / np.linalg.norm(z)
    return x, rho * x + math.sqrt(1 - rho**2) * z


def test_cross_correlation_distance_examples():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(40), rng.standard_normal(40)
    assert cross_correlation_distance((a, b), (a, b)) == 0.0
    assert abs(cross_correlation_distance(_pair_with(0.94, 1), _pair_with(0.90, 2)) - 0.0016) <= 1e-12
    c, d = rng.standard_normal(40), rng.standard_normal(40)
    assert cross_correlation_distance((a, b), (c, d)) == cross_correlation_distance((c, d), (a, b))
    assert cross_correlation_distance((a, a), (a, -a)) <= 4.0
    assert abs(cross_correlation_distance((a, a), (a, -a)) - 4.0) <= 1e-12


# --------------------------------------------------------------------------- windowed correlations


def test_windowed_examples():
    x = np.random.default_rng(0).standard_normal((30, 2))
    assert len(windowed_correlations(x, (0, 1), CorrelationWindowSpec(30))) == 1
    lin = np.stack([np.arange(20.0), 3 * np.arange(20.0) + 2], axis=1)
    np.testing.assert_allclose(windowed_correlations(lin, (0, 1), CorrelationWindowSpec(5, 2)), 1.0)
    assert len(windowed_correlations(x, (0, 1), CorrelationWindowSpec(7, 3))) == (30 - 7) // 3 + 1
    with pytest.raises(ValueError):
        windowed_correlations(x, (0, 1), CorrelationWindowSpec(31))


def test_window_spec_validation():
    with pytest.raises(ValueError):
        CorrelationWindowSpec(1)
    with pytest.raises(ValueError):
        CorrelationWindowSpec(5, 0)
    assert CorrelationWindowSpec(390).step == 390


# --------------------------------------------------------------------------- wasserstein


def test_wasserstein_examples():
    assert wasserstein_1d([0.0], [1.0]) == 1.0
    assert wasserstein_1d([3, 1, 2], [2, 3, 1]) == 0.0
    with pytest.raises(ValueError):
        wasserstein_1d([], [1.0])


def test_wasserstein_random_100_vs_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal(100), rng.exponential(size=100)
    assert abs(wasserstein_1d(a, b) - wasserstein_oracle(list(a), list(b))) <= 1e-9


def test_wasserstein_metric_axioms():
    rng = np.random.default_rng(6)
    for _ in range(200):
        a, b, c = (rng.standard_normal(int(rng.integers(1, 20))) * rng.uniform(0.1, 3) for _ in range(3))
        ab, ba = wasserstein_1d(a, b), wasserstein_1d(b, a)
        assert abs(ab - ba) <= 1e-9
        assert wasserstein_1d(a, a) <= 1e-12
        assert ab <= wasserstein_1d(a, c) + wasserstein_1d(c, b) + 1e-9
        assert ab >= 0


def test_correlation_benchmark_rows():
    s = generate(SyntheticDatasetSpec("gaussian_ar", 4, 400, seed=0))
    rows = correlation_benchmark(s, s, CorrelationWindowSpec(40))
    assert len(rows) == 6
    assert all(r["wasserstein"] == 0.0 for r in rows)
    with pytest.raises(ValueError):
        correlation_benchmark(s.values, s.values[:, :3], CorrelationWindowSpec(40))


# --------------------------------------------------------------------------- discriminative score


@pytest.fixture(scope="module")
def ar_windows():
    s = generate(SyntheticDatasetSpec("gaussian_ar", 5, 2000, seed=1))
    return cut_windows(s.values, 24, 12)


def test_discriminative_constant_classifier_is_zero(ar_windows):
    rng = np.random.default_rng(0)
    assert discriminative_score(ar_windows, rng.standard_normal(ar_windows.shape), constant_prediction=True) == 0.0


def test_discriminative_deterministic_and_bounded(ar_windows):
    noise = np.random.default_rng(0).standard_normal(ar_windows.shape)
    a = discriminative_score(ar_windows, noise, seed=3, steps=60)
    b = discriminative_score(ar_windows, noise, seed=3, steps=60)
    assert a == b and 0.0 <= a <= 0.5


def test_discriminative_separates_and_confuses(ar_windows):
    rng = np.random.default_rng(1)
    half = len(ar_windows) // 2
    perm = ar_windows[rng.permutation(len(ar_windows))]
    assert discriminative_score(perm[:half], perm[half : 2 * half], seed=0, steps=200) <= 0.1
    assert discriminative_score(ar_windows, rng.standard_normal(ar_windows.shape), seed=0, steps=200) >= 0.4


def test_discriminative_errors(ar_windows):
    with pytest.raises(ValueError, match="at least 20"):
        discriminative_score(ar_windows[:10], ar_windows[:10])
    with pytest.raises(ValueError, match="shapes"):
        discriminative_score(ar_windows, ar_windows[:, :10])
    with pytest.raises(ValueError, match="imbalance"):
        discriminative_score(ar_windows[:40], ar_windows[:22])


# --------------------------------------------------------------------------- stylized facts


def _days(draw, n_days=30, per_day=390):
    return [draw((per_day,)) for _ in range(n_days)]


def test_gaussian_returns_show_no_stylized_facts():
    rng = np.random.default_rng(0)
    days = _days(lambda s: rng.standard_normal(s) * 1e-3)
    rep = stylized_facts_report(days)["asset0"]
    assert abs(rep["heavy_tails"]["dt1"]["excess_kurtosis"]) <= 0.3
    assert abs(rep["heavy_tails"]["dt15"]["excess_kurtosis"]) <= 0.3
    band = rep["confidence_band"]
    assert math.isclose(band, 2 / math.sqrt(30 * 390))
    for lag in rep["return_autocorrelation"].values():
        assert abs(lag["pooled"]) <= band


def test_student_t_returns_are_heavy_tailed_and_aggregate():
    rng = np.random.default_rng(1)
    days = _days(lambda s: rng.standard_t(3, s) * 1e-3)
    rep = stylized_facts_report(days)["asset0"]
    k1 = rep["heavy_tails"]["dt1"]["excess_kurtosis"]
    assert k1 > 1
    assert rep["heavy_tails"]["dt15"]["excess_kurtosis"] < k1
    assert rep["aggregational_normality"] is True


def test_aggregation_never_crosses_days():
    days = [np.ones(20), 10 * np.ones(20)]
    np.testing.assert_array_equal(aggregate_returns(days, 15), [15.0, 150.0])


def test_volatility_clustering_detected():
    rng = np.random.default_rng(2)
    vol = np.exp(np.cumsum(rng.standard_normal(40) * 0.3))
    days = [rng.standard_normal(390) * v * 1e-3 for v in vol]
    rep = stylized_facts_report(days)["asset0"]
    assert rep["volatility_autocorrelation"]["lag1"] > 0.3
    assert len(rep["volatility_autocorrelation"]) == 10


def test_volume_volatility_positive_when_coupled():
    rng = np.random.default_rng(3)
    scale = np.exp(rng.standard_normal(40 * 26).repeat(15) * 0.5)
    r = rng.standard_normal(len(scale)) * scale * 1e-3
    v = 1000 * scale
    days = [r[i * 390 : (i + 1) * 390] for i in range(40)]
    vols = [v[i * 390 : (i + 1) * 390] for i in range(40)]
    rep = stylized_facts_report(days, vols)["asset0"]
    assert len(rep["volume_volatility"]["per_window"]) == 20
    assert rep["volume_volatility"]["mean"] > 0.5


def test_insufficient_data_names_statistic():
    with pytest.raises(InsufficientData, match="trading days"):
        stylized_facts_report([np.zeros(390)])
    with pytest.raises(InsufficientData, match="15-minute returns for kurtosis"):
        stylized_facts_report([np.random.default_rng(0).standard_normal(20) for _ in range(3)])


# --------------------------------------------------------------------------- full report


def _stock_series(seed, T=390 * 4):
    rng = np.random.default_rng(seed)
    logp = np.cumsum(rng.standard_normal((T, 2)) * 1e-3, axis=0) + np.log([50.0, 80.0])
    vol = rng.integers(100, 1000, size=(T, 2)).astype(float)
    vals = np.empty((T, 4))
    vals[:, 0::2], vals[:, 1::2] = np.exp(logp), vol
    return MultivariateSeries(vals, stock_layout(["AAA", "BBB"]))


def test_evaluate_self_is_zero_and_schema_valid():
    s = _stock_series(0)
    rep, dists = evaluate(s, s, CorrelationWindowSpec(390), disc_window=24, disc_steps=30)
    doc = rep.to_json()
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert len(doc["correlations"]) == 6
    assert all(r["wasserstein"] == 0.0 and r["cross_correlation_distance"] == 0.0 for r in doc["correlations"])
    assert set(doc["stylized_facts"]) == {"real", "synthetic"}
    assert doc["stylized_facts"]["real"] == doc["stylized_facts"]["synthetic"]
    assert len(dists) == 12
    json.dumps(doc, allow_nan=False)


def test_evaluate_recomputable_and_layout_checked():
    a, b = _stock_series(0), _stock_series(1)
    r1, _ = evaluate(a, b, CorrelationWindowSpec(390), disc_steps=20)
    r2, _ = evaluate(a, b, CorrelationWindowSpec(390), disc_steps=20)
    assert r1.to_json() == r2.to_json()
    raw = MultivariateSeries(a.values, raw_layout(4))
    with pytest.raises(ValueError, match="layouts"):
        evaluate(a, raw)
