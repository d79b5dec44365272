"""Tilt sensing, (cos, sin) angle encoding and circular error metrics.

Two angle conventions exist. The accelerometer measures 0 deg for a figure
standing upright (head up); the motors and every other part of this package
report that pose as 180 deg. Conversion happens once, in :func:`to_reported`.
"""

from __future__ import annotations

import math
from typing import NamedTuple


class AccelReading(NamedTuple):
    ax: float  # g along sensor X
    ay: float  # g along sensor Y


class AngleEncoding(NamedTuple):
    cos_v: float
    sin_v: float


class DegenerateAngle(ValueError):
    """Raised when an angle is requested from a zero vector."""


def normalize_deg(deg: float) -> float:
    d = math.fmod(deg, 360.0)
    if d < 0:
        d += 360.0
    # fmod of a tiny negative can round up to exactly 360
    return 0.0 if d >= 360.0 else d


def _atan2_deg(y: float, x: float) -> float:
    if x == 0 and y == 0:
        raise DegenerateAngle("angle of the zero vector is undefined")
    return normalize_deg(math.degrees(math.atan2(y, x)))


def tilt_from_accel(r: AccelReading) -> float:
    """Tilt against gravity in degrees, measurement convention, in [0, 360).

    Gravity splits into ``sin`` on X and ``cos`` on Y, so the full-quadrant
    arctangent of ``ax / ay`` recovers the tilt.
    """
    try:
        return _atan2_deg(r.ax, r.ay)
    except DegenerateAngle:
        raise DegenerateAngle("accelerometer reads (0, 0): sensor fault") from None


def to_reported(measured_deg: float) -> float:
    return normalize_deg(measured_deg + 180.0)


def to_measured(reported_deg: float) -> float:
    return normalize_deg(reported_deg - 180.0)


def encode_angle(deg: float) -> AngleEncoding:
    rad = math.radians(deg)
    return AngleEncoding(math.cos(rad), math.sin(rad))


def decode_angle(e: AngleEncoding | tuple[float, float]) -> float:
    """Angle of a (cos, sin) pair in [0, 360); the pair need not be unit length."""
    cos_v, sin_v = e
    try:
        return _atan2_deg(sin_v, cos_v)
    except DegenerateAngle:
        raise DegenerateAngle("predicted (cos, sin) pair is (0, 0)") from None


def circular_distance(a_deg: float, b_deg: float) -> float:
    d = abs(a_deg - b_deg) % 360.0
    return min(d, 360.0 - d)


def normalize_shift(shift_mm: float, half_range_mm: float) -> float:
    if not half_range_mm > 0:
        raise ValueError(f"half range must be positive, got {half_range_mm}")
    return shift_mm / half_range_mm


def denormalize_shift(s_norm: float, half_range_mm: float) -> float:
    if not half_range_mm > 0:
        raise ValueError(f"half range must be positive, got {half_range_mm}")
    return min(1.0, max(-1.0, s_norm)) * half_range_mm
