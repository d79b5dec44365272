"""Deterministic synthetic table: top-down renderer and sensor models.

The renderer stands in for the overhead webcam. Every rod is drawn as a
light metal line running along the image y axis with two black rubber
stoppers and a row of figures. A figure is a head disc, a tapered leg and a
shoe; their top-down projection is offset across the rod by ``sin`` of the
tilt and shaded by height, so the upright pose and its upside-down twin
look different. The playing field is lit by a brightness ramp along the
rod axis, which gives a translation-invariant network a cue for where the
rod sits relative to the table.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import cv2
import numpy as np

from foosball_state import angles
from foosball_state.core import (
    ROD_IDS,
    GameState,
    RodConfig,
    RodId,
    RodState,
    TableGeometry,
    Team,
)

# Figure and stopper dimensions in mm.
LEG_LENGTH = 30.0
LEG_ROOT_HALF = 8.0
LEG_TIP_HALF = 4.0
SHOE_HALF_ALONG = 11.0  # feet are 22 mm wide
HEAD_DISTANCE = 18.0
HEAD_RADIUS = 7.0
STOPPER_HALF_LENGTH = 5.0
STOPPER_HALF_WIDTH = 9.0
ROD_HALF_WIDTH = 1.5
BALL_RADIUS = 17.5

# Surface reflectances in [0, 1].
ROD_REFLECTANCE = 0.95
STOPPER_REFLECTANCE = 0.08
BALL_REFLECTANCE = 0.97
FIGURE_REFLECTANCE = 0.22
FIGURE_SHADING = 0.10

IN_FLIGHT_BLUR_PX = 9


@dataclass(frozen=True)
class RenderOptions:
    cutout_size: tuple[int, int] = (256, 64)  # (w, h) of a regressor input
    background_gray: int = 230
    brightness_offset: int = 0
    blur_radius: int = 0
    render_ball: bool = True
    seed: int = 0
    illumination: tuple[float, float] = (0.45, 1.0)  # field light at top / bottom row

    def __post_init__(self):
        if not 0 <= self.background_gray <= 255:
            raise ValueError("background_gray must be in [0, 255]")
        if not -128 <= self.brightness_offset <= 128:
            raise ValueError("brightness_offset must be in [-128, 128]")
        if not 0 <= self.blur_radius <= 15:
            raise ValueError("blur_radius must be in [0, 15]")
        lo, hi = self.illumination
        if not (0 < lo <= 1 and 0 < hi <= 1):
            raise ValueError("illumination factors must be in (0, 1]")


@dataclass(frozen=True)
class AccelNoiseModel:
    """Error model of a two-axis accelerometer, in degrees.

    With probability ``outlier_prob`` the error magnitude is uniform in
    ``outlier_range_deg`` with a random sign, otherwise it is gaussian.
    ``calibration_bias_deg`` is added to every draw.
    """

    gaussian_sigma_deg: float = 5.8
    outlier_prob: float = 0.02
    outlier_range_deg: tuple[float, float] = (20.0, 25.0)
    calibration_bias_deg: float = 0.0

    def __post_init__(self):
        if not 0 <= self.outlier_prob <= 1:
            raise ValueError("outlier_prob must be in [0, 1]")
        lo, hi = self.outlier_range_deg
        if not lo < hi:
            raise ValueError("outlier range needs lo < hi")
        if self.gaussian_sigma_deg < 0:
            raise ValueError("gaussian_sigma_deg must be >= 0")


NOISELESS = AccelNoiseModel(0.0, 0.0, (20.0, 25.0), 0.0)


@dataclass(frozen=True)
class WhiteBias:
    """Hand-moved white rods: a mixture concentrated near a few poses."""

    modes_deg: tuple[float, ...] = (180.0, 90.0, 270.0, 0.0)
    weights: tuple[float, ...] = (0.4, 0.2, 0.2, 0.2)
    spread_deg: float = 10.0
    uniform_floor: float = 0.3
    shift_center_weight: float = 0.3
    shift_center_spread: float = 0.35  # fraction of the half range


@dataclass
class Frame:
    frame_id: int
    full_image: np.ndarray
    gt: GameState
    accel_readings: dict[RodId, angles.AccelReading]
    motor_reports: dict[RodId, RodState]
    accel_errors: dict[RodId, tuple[float, bool]] = field(default_factory=dict)
    in_flight: dict[RodId, bool] = field(default_factory=dict)


# -- rendering -------------------------------------------------------------

def _paint(canvas, mask, value):
    if np.ndim(value):
        canvas[mask] = value[mask]
    else:
        canvas[mask] = value


def _draw_rod(canvas: np.ndarray, rod: RodConfig, state: RodState, ppm: float,
              center_px: float) -> None:
    """Draw one rod into the reflectance canvas, in place."""
    x0, y0, w, h = rod.cutout
    region = canvas[y0:y0 + h, x0:x0 + w]
    ys = np.arange(y0, y0 + h, dtype=np.float64)[:, None]
    xs = np.arange(x0, x0 + w, dtype=np.float64)[None, :] - rod.center_column_x

    rod_y = center_px + state.shift * ppm
    region[np.broadcast_to(np.abs(xs) <= ROD_HALF_WIDTH * ppm, region.shape)] = ROD_REFLECTANCE

    theta = math.radians(angles.to_measured(state.rotation))
    s, c = math.sin(theta), math.cos(theta)

    n = rod.figure_count
    for i in range(n):
        fy = rod_y + (i - (n - 1) / 2) * rod.figure_spacing * ppm
        dy = ys - fy
        parts = []

        # tapered leg from the rod out to the shoe, shaded by height along it
        reach = LEG_LENGTH * s * ppm
        if abs(reach) >= 0.5:
            t = xs / reach
            half = (LEG_ROOT_HALF + (LEG_TIP_HALF - LEG_ROOT_HALF) * t) * ppm
            leg = (t >= 0) & (t <= 1) & (np.abs(dy) <= half)
            shade = FIGURE_REFLECTANCE - FIGURE_SHADING * np.clip(t, 0, 1) * c
            parts.append((-0.5 * c, leg, np.broadcast_to(shade, leg.shape)))

        across = (3.0 + 5.0 * abs(c)) * ppm
        shoe = (np.abs(xs - reach) <= across) & (np.abs(dy) <= SHOE_HALF_ALONG * ppm)
        parts.append((-c, shoe, FIGURE_REFLECTANCE - FIGURE_SHADING * c))

        hx = -HEAD_DISTANCE * s * ppm
        head = (xs - hx) ** 2 + dy ** 2 <= (HEAD_RADIUS * ppm) ** 2
        parts.append((c, head, FIGURE_REFLECTANCE + FIGURE_SHADING * c))

        # lowest first so the part nearest the camera ends up on top
        for _, mask, value in sorted(parts, key=lambda p: p[0]):
            _paint(region, mask, value)

    for sign in (-1, 1):
        sy = rod_y + sign * rod.stopper_offset * ppm
        stopper = (np.abs(ys - sy) <= STOPPER_HALF_LENGTH * ppm) & \
                  (np.abs(xs) <= STOPPER_HALF_WIDTH * ppm)
        region[stopper] = STOPPER_REFLECTANCE


def _ball_position(geometry: TableGeometry, rng: np.random.Generator) -> tuple[float, float]:
    r = BALL_RADIUS * geometry.calibration.px_per_mm
    cols = sorted(rod.center_column_x for rod in geometry.rods)
    gaps = [(a + r + 2, b - r - 2) for a, b in zip(cols, cols[1:]) if b - a > 2 * r + 4]
    lo, hi = gaps[int(rng.integers(len(gaps)))]
    return float(rng.uniform(lo, hi)), float(rng.uniform(r, geometry.frame_height - r))


def render_frame(geometry: TableGeometry, gt: GameState, opts: RenderOptions = RenderOptions(),
                 motion_blur: Mapping[RodId, int] | None = None) -> np.ndarray:
    """Render the full top-down frame as an 8-bit grayscale image.

    The output is a pure function of the arguments. ``motion_blur`` maps rods
    that are still moving to a box-blur length along their axis.
    """
    for rod in geometry.rods:
        rod.check_state(gt.rods[rod.id])

    H, W = geometry.frame_height, geometry.frame_width
    ppm = geometry.calibration.px_per_mm
    canvas = np.full((H, W), opts.background_gray / 255.0, dtype=np.float64)

    if opts.render_ball:
        rng = np.random.default_rng([opts.seed, gt.frame_id])
        bx, by = _ball_position(geometry, rng)
        yy, xx = np.ogrid[:H, :W]
        ball = (xx - bx) ** 2 + (yy - by) ** 2 <= (BALL_RADIUS * ppm) ** 2
        canvas[ball] = BALL_REFLECTANCE

    for rod in geometry.ordered():
        _draw_rod(canvas, rod, gt.rods[rod.id], ppm, geometry.calibration.table_center_px)

    lo, hi = opts.illumination
    light = lo + (hi - lo) * np.arange(H, dtype=np.float64)[:, None] / max(H - 1, 1)
    img = canvas * light * 255.0 + opts.brightness_offset

    for rid, length in (motion_blur or {}).items():
        if length > 1:
            x0, y0, w, h = geometry.rod(rid).cutout
            img[y0:y0 + h, x0:x0 + w] = cv2.blur(
                img[y0:y0 + h, x0:x0 + w], (1, int(length)), borderType=cv2.BORDER_REPLICATE)
    if opts.blur_radius > 0:
        k = 2 * opts.blur_radius + 1
        img = cv2.blur(img, (k, k), borderType=cv2.BORDER_REPLICATE)

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def extract_cutout(image: np.ndarray, rod: RodConfig,
                   size: tuple[int, int] = (256, 64)) -> np.ndarray:
    """Cut out a rod's region, resized so the rod axis runs along the width.

    Returns a ``(h, w)`` uint8 array for ``size = (w, h)``.
    """
    x, y, w, h = rod.cutout
    out_w, out_h = size
    region = image[y:y + h, x:x + w]
    # the rod runs along y in the frame; resize to (along=out_w, across=out_h) then transpose
    resized = cv2.resize(region, (out_h, out_w), interpolation=cv2.INTER_AREA)
    return np.ascontiguousarray(resized.T)


# -- sensors ---------------------------------------------------------------

def draw_accel_error(model: AccelNoiseModel, rng: np.random.Generator) -> tuple[float, bool]:
    """One error draw in degrees plus whether it came from the outlier branch."""
    if model.outlier_prob > 0 and rng.random() < model.outlier_prob:
        lo, hi = model.outlier_range_deg
        mag = rng.uniform(lo, hi)
        return model.calibration_bias_deg + (mag if rng.random() < 0.5 else -mag), True
    noise = rng.normal(0.0, model.gaussian_sigma_deg) if model.gaussian_sigma_deg > 0 else 0.0
    return model.calibration_bias_deg + noise, False


def accel_reading(true_rotation_deg: float, error_deg: float = 0.0) -> angles.AccelReading:
    theta = math.radians(angles.to_measured(true_rotation_deg) + error_deg)
    return angles.AccelReading(math.sin(theta), math.cos(theta))


def simulate_accel(true_rotation_deg: float, model: AccelNoiseModel,
                   rng: np.random.Generator) -> angles.AccelReading:
    """Reading of a 1 g static accelerometer on a rod at ``true_rotation_deg``."""
    err, _ = draw_accel_error(model, rng)
    return accel_reading(true_rotation_deg, err)


def simulate_motor_report(commanded: RodState, actual: RodState) -> RodState:
    """Motors report their target position, even while still moving."""
    return commanded


class SensorRejected(ValueError):
    pass


def check_sensor(model: AccelNoiseModel, max_bias_deg: float = 3.0) -> None:
    """Reject accelerometers with a systematic calibration error."""
    if abs(model.calibration_bias_deg) > max_bias_deg:
        raise SensorRejected(
            f"calibration bias {model.calibration_bias_deg} deg exceeds {max_bias_deg} deg")


# -- state sampling --------------------------------------------------------

def _biased_rotation(bias: WhiteBias, rng: np.random.Generator) -> float:
    if rng.random() < bias.uniform_floor:
        return float(rng.uniform(0.0, 360.0))
    w = np.asarray(bias.weights, dtype=np.float64)
    mode = bias.modes_deg[int(rng.choice(len(w), p=w / w.sum()))]
    return angles.normalize_deg(mode + rng.normal(0.0, bias.spread_deg))


def _biased_shift(rod: RodConfig, bias: WhiteBias, rng: np.random.Generator) -> float:
    r = rod.shift_half_range
    if rng.random() < bias.shift_center_weight:
        return float(np.clip(rng.normal(0.0, bias.shift_center_spread * r), -r, r))
    return float(rng.uniform(-r, r))


def random_rod_state(rod: RodConfig, rng: np.random.Generator,
                     white_bias: WhiteBias | None = None) -> RodState:
    if rod.id.team is Team.WHITE and white_bias is not None:
        return RodState(_biased_shift(rod, white_bias, rng), _biased_rotation(white_bias, rng))
    shift = float(rng.uniform(-rod.shift_half_range, rod.shift_half_range))
    rot = float(rng.uniform(rod.rotation_min, rod.rotation_max))
    return RodState(shift, angles.normalize_deg(rot))


def random_state(geometry: TableGeometry, rng: np.random.Generator,
                 white_bias: WhiteBias | None = None, frame_id: int = 0,
                 timestamp_us: int = 0) -> GameState:
    """Black rods uniform over their limits; white rods from ``white_bias`` if given."""
    rods = {rid: random_rod_state(geometry.rod(rid), rng, white_bias) for rid in ROD_IDS}
    return GameState(frame_id, timestamp_us, rods)


def settle(commanded: RodState, rod: RodConfig, rng: np.random.Generator,
           p_still_moving: float) -> tuple[RodState, bool]:
    """Actual pose at capture time after the settle wait.

    With probability ``p_still_moving`` the rod has not arrived yet and lags
    its target by 6-30 mm and 5-30 deg.
    """
    if p_still_moving <= 0 or rng.random() >= p_still_moving:
        return commanded, False
    lag = rng.uniform(6.0, 30.0) * (1 if rng.random() < 0.5 else -1)
    shift = commanded.shift - lag
    if abs(shift) > rod.shift_half_range:
        shift = commanded.shift + lag
    rlag = rng.uniform(5.0, 30.0) * (1 if rng.random() < 0.5 else -1)
    rot = commanded.rotation - rlag
    if not rod.full_circle and not rod.rotation_min <= rot <= rod.rotation_max:
        rot = commanded.rotation + rlag
    return RodState(shift, angles.normalize_deg(rot)), True


# -- config ----------------------------------------------------------------

def options_to_section(opts: RenderOptions) -> dict[str, str]:
    d = asdict(opts)
    return {
        "cutout_size": f"{d['cutout_size'][0]} {d['cutout_size'][1]}",
        "background_gray": str(opts.background_gray),
        "brightness_offset": str(opts.brightness_offset),
        "blur_radius": str(opts.blur_radius),
        "render_ball": "yes" if opts.render_ball else "no",
        "seed": str(opts.seed),
        "illumination": f"{opts.illumination[0]!r} {opts.illumination[1]!r}",
    }


def options_from_section(s) -> RenderOptions:
    cw, ch = (int(v) for v in s["cutout_size"].split())
    lo, hi = (float(v) for v in s["illumination"].split())
    return RenderOptions(
        cutout_size=(cw, ch),
        background_gray=int(s["background_gray"]),
        brightness_offset=int(s["brightness_offset"]),
        blur_radius=int(s["blur_radius"]),
        render_ball=s["render_ball"].strip().lower() in ("yes", "true", "1", "on"),
        seed=int(s["seed"]),
        illumination=(lo, hi),
    )


def noise_to_section(model: AccelNoiseModel) -> dict[str, str]:
    lo, hi = model.outlier_range_deg
    return {
        "gaussian_sigma_deg": repr(model.gaussian_sigma_deg),
        "outlier_prob": repr(model.outlier_prob),
        "outlier_range_deg": f"{lo!r} {hi!r}",
        "calibration_bias_deg": repr(model.calibration_bias_deg),
    }


def noise_from_section(s) -> AccelNoiseModel:
    lo, hi = (float(v) for v in s["outlier_range_deg"].split())
    return AccelNoiseModel(
        gaussian_sigma_deg=float(s["gaussian_sigma_deg"]),
        outlier_prob=float(s["outlier_prob"]),
        outlier_range_deg=(lo, hi),
        calibration_bias_deg=float(s["calibration_bias_deg"]),
    )
