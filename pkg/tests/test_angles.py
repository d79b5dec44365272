import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from foosball_state.angles import (
    AccelReading,
    DegenerateAngle,
    circular_distance,
    decode_angle,
    denormalize_shift,
    encode_angle,
    normalize_deg,
    normalize_shift,
    tilt_from_accel,
    to_measured,
    to_reported,
)

GRID = np.arange(3600) / 10.0
finite_angle = st.floats(-1e4, 1e4, allow_nan=False)
unit_angle = st.floats(0, 360, exclude_max=True)


@pytest.mark.parametrize("reading, expected", [
    ((0.0, 1.0), 0.0), ((1.0, 0.0), 90.0), ((0.70710678, 0.70710678), 45.0),
    ((0.0, -1.0), 180.0), ((-1.0, 0.0), 270.0),
])
def test_tilt_examples(reading, expected):
    assert tilt_from_accel(AccelReading(*reading)) == pytest.approx(expected, abs=1e-9)


def test_tilt_zero_vector_is_fault():
    with pytest.raises(DegenerateAngle):
        tilt_from_accel(AccelReading(0.0, 0.0))


@pytest.mark.parametrize("measured, reported", [(0, 180), (270, 90), (180, 0), (90, 270)])
def test_to_reported(measured, reported):
    assert to_reported(measured) == reported
    assert to_measured(reported) == measured


@pytest.mark.parametrize("deg, enc", [(0, (1, 0)), (90, (0, 1)), (180, (-1, 0))])
def test_encode_examples(deg, enc):
    assert encode_angle(deg) == pytest.approx(enc, abs=1e-15)


@pytest.mark.parametrize("enc, deg", [((1, 0), 0.0), ((0, -1), 270.0), ((2, 0), 0.0)])
def test_decode_examples(enc, deg):
    assert decode_angle(enc) == deg


def test_decode_zero_pair_rejected():
    with pytest.raises(DegenerateAngle):
        decode_angle((0.0, 0.0))


@pytest.mark.parametrize("a, b, d", [(350, 10, 20), (0, 180, 180), (77.5, 77.5, 0)])
def test_circular_distance_examples(a, b, d):
    assert circular_distance(a, b) == d


def test_shift_normalization_examples():
    assert normalize_shift(55, 55) == 1.0
    assert normalize_shift(0, 120) == 0.0
    assert denormalize_shift(1.3, 55) == 55.0
    assert denormalize_shift(-7.0, 55) == -55.0
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            normalize_shift(1.0, bad)
        with pytest.raises(ValueError):
            denormalize_shift(1.0, bad)


def test_round_trip_on_grid():
    err = max(circular_distance(decode_angle(encode_angle(x)), x) for x in GRID)
    assert err <= 1e-9


def test_noiseless_tilt_on_grid():
    err = max(circular_distance(
        tilt_from_accel(AccelReading(math.sin(math.radians(x)), math.cos(math.radians(x)))), x)
        for x in GRID)
    assert err <= 1e-9


@given(finite_angle)
def test_normalize_range(x):
    assert 0.0 <= normalize_deg(x) < 360.0


@given(unit_angle)
def test_encoding_is_unit(x):
    c, s = encode_angle(x)
    assert abs(c * c + s * s - 1.0) <= 1e-12


@given(unit_angle)
def test_reported_bijection(x):
    y = to_reported(x)
    assert 0.0 <= y < 360.0
    assert circular_distance(to_reported(y), x) <= 1e-9
    assert circular_distance(to_measured(y), x) <= 1e-9


@given(unit_angle, st.floats(1e-6, 1e6))
def test_decode_scale_invariant(x, c):
    e = encode_angle(x)
    assert circular_distance(decode_angle((c * e.cos_v, c * e.sin_v)), decode_angle(e)) <= 1e-9


@given(finite_angle, finite_angle, finite_angle)
def test_circular_distance_metric(a, b, c):
    d_ab = circular_distance(a, b)
    assert 0.0 <= d_ab <= 180.0
    assert d_ab == pytest.approx(circular_distance(b, a), abs=1e-9)
    assert circular_distance(a, c) <= d_ab + circular_distance(b, c) + 1e-9


@given(finite_angle, finite_angle, st.integers(-5, 5))
def test_circular_distance_period(a, b, k):
    assert circular_distance(a + 360 * k, b) == pytest.approx(circular_distance(a, b), abs=1e-8)


@given(st.floats(-1.0, 1.0), st.floats(1.0, 500.0))
def test_shift_round_trip(s, half):
    assert normalize_shift(denormalize_shift(s, half), half) == pytest.approx(s, abs=1e-12)
