import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from easelct.measurement import (
    EPS_CLAMP,
    DoseModel,
    MeasurementError,
    counts_to_log_sinogram,
    expected_counts,
    simulate_counts,
    substream,
)


def test_dose_model_validation():
    with pytest.raises(MeasurementError):
        DoseModel(b=-1.0)
    with pytest.raises(MeasurementError):
        DoseModel(b=1e4, r=np.array([0.0, -0.1]))


def test_unattenuated_mean_at_5e4():
    counts = simulate_counts(np.zeros(10**5), DoseModel(5e4), np.random.default_rng(0))
    assert abs(counts.mean() - 5e4) < 3 * np.sqrt(5e4 / 1e5)


def test_zero_dose_gives_zero_counts():
    counts = simulate_counts(np.full(1000, 0.3), DoseModel(0.0, 0.0), np.random.default_rng(0))
    assert not counts.any()


def test_variance_equals_mean():
    mean = 13.7
    t = np.full(10**6, -np.log(mean / 1e3))
    counts = simulate_counts(t, DoseModel(1e3), np.random.default_rng(1))
    assert abs(counts.var() - mean) < 0.01 * mean


def test_counts_are_nonnegative_integers():
    counts = simulate_counts(np.linspace(0, 8, 500), DoseModel(100.0, 2.0), np.random.default_rng(2))
    assert (counts >= 0).all()
    np.testing.assert_array_equal(counts, np.round(counts))


def test_negative_or_nonfinite_line_integral_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(MeasurementError, match="negative"):
        simulate_counts(np.array([0.1, -0.01]), DoseModel(), rng)
    with pytest.raises(MeasurementError):
        simulate_counts(np.array([np.nan]), DoseModel(), rng)


def test_same_seed_same_counts():
    t = np.random.default_rng(3).random((20, 30))
    a = simulate_counts(t, DoseModel(1e4), substream(7, "noise"))
    b = simulate_counts(t, DoseModel(1e4), substream(7, "noise"))
    np.testing.assert_array_equal(a, b)


def test_substreams_are_independent_by_name():
    a = substream(7, "noise").standard_normal(4)
    b = substream(7, "phantom").standard_normal(4)
    c = substream(8, "noise").standard_normal(4)
    assert not np.allclose(a, b) and not np.allclose(a, c)


def test_noiseless_round_trip():
    t = np.linspace(0.0, 6.0, 400)
    dose = DoseModel(5e4, 3.0)
    y, _ = counts_to_log_sinogram(expected_counts(t, dose), dose)
    np.testing.assert_allclose(y, t, rtol=1e-12, atol=1e-12)


def test_clamp_policy_when_counts_below_background():
    dose = DoseModel(1e3, 10.0)
    y, w = counts_to_log_sinogram(np.array([0.0, 5.0, 10.0]), dose)
    np.testing.assert_allclose(y, np.log(1e3 / EPS_CLAMP))
    assert (w >= 0).all()


def test_zero_source_intensity_rejected_by_log():
    with pytest.raises(MeasurementError):
        counts_to_log_sinogram(np.ones(3), DoseModel(np.array([1.0, 0.0, 1.0])))


def test_log_domain_standard_deviation():
    b, t = 5e4, 2.0
    counts = simulate_counts(np.full(10**5, t), DoseModel(b), np.random.default_rng(4))
    y, _ = counts_to_log_sinogram(counts, DoseModel(b))
    expected = 1.0 / np.sqrt(b * np.exp(-t))
    assert abs(y.std() - expected) < 0.05 * expected


def test_weights_match_inverse_variance_at_zero_background():
    counts = np.array([10.0, 400.0, 5e4])
    _, w = counts_to_log_sinogram(counts, DoseModel(5e4))
    np.testing.assert_allclose(w, counts)


@settings(max_examples=30, deadline=None)
@given(b=st.floats(20, 1e6), t=st.floats(0, 3), r=st.floats(0, 50))
def test_count_mean_within_four_standard_errors(b, t, r):
    dose = DoseModel(b, r)
    mean = b * np.exp(-t) + r
    counts = simulate_counts(np.full(10**5, t), dose, np.random.default_rng(int(b) % 1000))
    assert abs(counts.mean() - mean) < 4 * np.sqrt(mean / 1e5)
