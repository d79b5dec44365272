"""Dataset capture loop, on-disk layout and ground-truth checks.

One capture iteration yields one frame: move the rods, wait for them to
settle, read accelerometers and motor reports, grab the image, then append
the image and a CSV row. Layout of a dataset directory::

    manifest.txt        INI: [dataset] header plus geometry/render/noise sections
    frames/frame_000000.png
    labels.csv          one row per frame, see LABEL_FIELDS
    noise_debug.csv     injected accelerometer errors and in-flight flags
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np

from foosball_state import angles, cv_shift, simulator
from foosball_state.core import (
    ROD_IDS,
    GameState,
    RodConfig,
    RodId,
    TableGeometry,
    Team,
    config_to_text,
    geometry_from_config,
    geometry_to_config,
    new_config,
    read_config,
)

log = logging.getLogger(__name__)

DATASET_FORMAT = "foosball-dataset"
DATASET_VERSION = 1
IMAGE_EXT = "png"
FRAME_INTERVAL_US = 400_000  # one capture iteration incl. the settle wait

LABEL_FIELDS = ("gt_shift", "gt_rot", "accel_rot", "motor_shift", "motor_rot", "cv_shift")
DEBUG_FIELDS = ("accel_err", "accel_outlier", "in_flight")


def label_header() -> list[str]:
    return ["frame_id"] + [f"{rid.name}_{f}" for rid in ROD_IDS for f in LABEL_FIELDS]


def debug_header() -> list[str]:
    return ["frame_id"] + [f"{rid.name}_{f}" for rid in ROD_IDS for f in DEBUG_FIELDS]


@dataclass(frozen=True)
class RodRecord:
    gt_shift: float
    gt_rot: float
    accel_rot: float
    motor_shift: float | None  # black rods only
    motor_rot: float | None
    cv_shift: float  # nan if the stoppers were not found


@dataclass(frozen=True)
class NoiseRecord:
    accel_err: float
    accel_outlier: bool
    in_flight: bool


@dataclass
class CaptureRecord:
    frame_id: int
    image_file: str  # relative to the dataset root
    rods: dict[RodId, RodRecord]
    noise: dict[RodId, NoiseRecord] = field(default_factory=dict)


@dataclass
class Dataset:
    root: Path
    geometry: TableGeometry
    records: list[CaptureRecord]
    render_options: simulator.RenderOptions = simulator.RenderOptions()
    noise_model: simulator.AccelNoiseModel = simulator.AccelNoiseModel()
    seed: int = 0
    p_still_moving: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def image(self, record: CaptureRecord) -> np.ndarray:
        path = self.root / record.image_file
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise FileNotFoundError(f"cannot read frame image {path}")
        return img


class DatasetError(ValueError):
    pass


# -- capture -----------------------------------------------------------------

def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _manifest(geometry, opts, noise, *, status, frames, seed, p_still_moving) -> str:
    cp = new_config()
    cp["dataset"] = {
        "format": DATASET_FORMAT,
        "version": str(DATASET_VERSION),
        "status": status,
        "frames": str(frames),
        "image_ext": IMAGE_EXT,
        "seed": str(seed),
        "p_still_moving": repr(float(p_still_moving)),
    }
    geometry_to_config(geometry, cp)
    cp["render"] = simulator.options_to_section(opts)
    cp["noise"] = simulator.noise_to_section(noise)
    return config_to_text(cp)


def capture(n: int, geometry: TableGeometry, out_dir: str | Path, *,
            sim_opts: simulator.RenderOptions = simulator.RenderOptions(),
            noise_model: simulator.AccelNoiseModel = simulator.AccelNoiseModel(),
            seed: int = 0, p_still_moving: float = 0.05,
            white_bias: simulator.WhiteBias | None = simulator.WhiteBias(),
            cv_threshold: int = cv_shift.DEFAULT_THRESHOLD,
            cv_min_run: int = cv_shift.DEFAULT_MIN_RUN) -> Dataset:
    """Run ``n`` capture iterations against the simulator and persist them.

    On an I/O error the manifest is rewritten with ``status = partial`` and the
    number of frames that made it to disk, then the error propagates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    simulator.check_sensor(noise_model)
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    calib = geometry.calibration
    records: list[CaptureRecord] = []

    def write_manifest(status):
        (root / "manifest.txt").write_text(
            _manifest(geometry, sim_opts, noise_model, status=status, frames=len(records),
                      seed=seed, p_still_moving=p_still_moving), encoding="utf-8")

    write_manifest("partial")
    try:
        with open(root / "labels.csv", "w", newline="", encoding="utf-8") as lf, \
                open(root / "noise_debug.csv", "w", newline="", encoding="utf-8") as df:
            labels = csv.writer(lf, lineterminator="\n")
            debug = csv.writer(df, lineterminator="\n")
            labels.writerow(label_header())
            debug.writerow(debug_header())
            for frame_id in range(n):
                frame = _capture_frame(frame_id, geometry, sim_opts, noise_model, rng,
                                       p_still_moving, white_bias)
                name = f"frames/frame_{frame_id:06d}.{IMAGE_EXT}"
                if not cv2.imwrite(str(root / name), frame.full_image):
                    raise OSError(f"failed to write {root / name}")
                rods, noise = {}, {}
                for rod in geometry.ordered():
                    rid = rod.id
                    gt = frame.gt.rods[rid]
                    try:
                        cvs = cv_shift.detect_shift(frame.full_image, rod, calib,
                                                    cv_threshold, cv_min_run)
                    except (cv_shift.StopperNotFound, cv_shift.DegenerateColumn) as exc:
                        log.warning("frame %d %s: %s", frame_id, rid, exc)
                        cvs = math.nan
                    motor = frame.motor_reports.get(rid)
                    rods[rid] = RodRecord(
                        gt.shift, gt.rotation,
                        angles.to_reported(angles.tilt_from_accel(frame.accel_readings[rid])),
                        motor.shift if motor else None, motor.rotation if motor else None, cvs)
                    err, outlier = frame.accel_errors[rid]
                    noise[rid] = NoiseRecord(err, outlier, frame.in_flight.get(rid, False))
                rec = CaptureRecord(frame_id, name, rods, noise)
                labels.writerow(_label_row(rec))
                debug.writerow(_debug_row(rec))
                records.append(rec)
    except OSError:
        write_manifest("partial")
        raise
    write_manifest("complete")
    return Dataset(root, geometry, records, sim_opts, noise_model, seed, p_still_moving)


def _capture_frame(frame_id, geometry, opts, noise_model, rng, p_still_moving,
                   white_bias) -> simulator.Frame:
    # (1) move: black rods to random targets, white rods "by hand"
    commanded = simulator.random_state(geometry, rng, white_bias, frame_id,
                                       frame_id * FRAME_INTERVAL_US)
    # (2) settle: a black rod may still be travelling when the image is taken
    actual, in_flight, motors = {}, {}, {}
    for rod in geometry.ordered():
        cmd = commanded.rods[rod.id]
        if rod.id.team is Team.BLACK:
            actual[rod.id], in_flight[rod.id] = simulator.settle(cmd, rod, rng, p_still_moving)
            motors[rod.id] = simulator.simulate_motor_report(cmd, actual[rod.id])
        else:
            actual[rod.id], in_flight[rod.id] = cmd, False
    gt = GameState(frame_id, commanded.timestamp_us, actual)
    # (3) measure and snapshot
    readings, errors = {}, {}
    for rid in ROD_IDS:
        err, outlier = simulator.draw_accel_error(noise_model, rng)
        readings[rid] = simulator.accel_reading(actual[rid].rotation, err)
        errors[rid] = (err, outlier)
    blur = {rid: simulator.IN_FLIGHT_BLUR_PX for rid, moving in in_flight.items() if moving}
    image = simulator.render_frame(geometry, gt, opts, motion_blur=blur)
    return simulator.Frame(frame_id, image, gt, readings, motors, errors, in_flight)


def _label_row(rec: CaptureRecord) -> list[str]:
    row = [str(rec.frame_id)]
    for rid in ROD_IDS:
        r = rec.rods[rid]
        row += [_fmt(r.gt_shift), _fmt(r.gt_rot), _fmt(r.accel_rot), _fmt(r.motor_shift),
                _fmt(r.motor_rot), _fmt(r.cv_shift)]
    return row


def _debug_row(rec: CaptureRecord) -> list[str]:
    row = [str(rec.frame_id)]
    for rid in ROD_IDS:
        nz = rec.noise[rid]
        row += [_fmt(nz.accel_err), str(int(nz.accel_outlier)), str(int(nz.in_flight))]
    return row


# -- loading -----------------------------------------------------------------

def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _read_csv(path: Path, header: list[str]) -> list[list[str]]:
    if not path.is_file():
        raise DatasetError(f"missing {path.name}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise DatasetError(f"{path.name}: unexpected header")
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path.name}:{i}: expected {len(header)} cells, got {len(row)}")
    return rows[1:]


def load(out_dir: str | Path) -> Dataset:
    root = Path(out_dir)
    try:
        cp = read_config(root / "manifest.txt")
    except FileNotFoundError:
        raise DatasetError(f"{root}: no manifest.txt") from None
    meta = cp["dataset"] if "dataset" in cp else None
    if meta is None or meta.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{root}: not a dataset manifest")
    if meta.getint("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {meta.get('version')}")
    if meta.get("status") != "complete":
        raise DatasetError(f"{root}: capture incomplete ({meta.getint('frames')} frames)")
    geometry = geometry_from_config(cp)
    n = meta.getint("frames")
    ext = meta.get("image_ext", IMAGE_EXT)

    try:
        label_rows = _read_csv(root / "labels.csv", label_header())
        debug_rows = _read_csv(root / "noise_debug.csv", debug_header())
        records = []
        for row, drow in zip(label_rows, debug_rows):
            fid = int(row[0])
            if int(drow[0]) != fid:
                raise DatasetError(f"noise_debug.csv out of step at frame {fid}")
            rods, noise = {}, {}
            for k, rid in enumerate(ROD_IDS):
                c = row[1 + 6 * k:7 + 6 * k]
                rods[rid] = RodRecord(float(c[0]), float(c[1]), float(c[2]),
                                      _opt_float(c[3]), _opt_float(c[4]), float(c[5]))
                d = drow[1 + 3 * k:4 + 3 * k]
                noise[rid] = NoiseRecord(float(d[0]), d[1] == "1", d[2] == "1")
            records.append(CaptureRecord(fid, f"frames/frame_{fid:06d}.{ext}", rods, noise))
    except ValueError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"malformed CSV: {exc}") from exc

    if len(records) != n or len(debug_rows) != n:
        raise DatasetError(f"manifest says {n} frames, CSV has {len(records)} rows")
    if len({r.frame_id for r in records}) != n:
        raise DatasetError("duplicate frame ids")
    for rec in records:
        if not (root / rec.image_file).is_file():
            raise DatasetError(f"missing image {rec.image_file}")
    return Dataset(root, geometry, records,
                   simulator.options_from_section(cp["render"]),
                   simulator.noise_from_section(cp["noise"]),
                   meta.getint("seed"), meta.getfloat("p_still_moving"))


# -- checks and splits ---------------------------------------------------------

def validate_shifts(dataset: Dataset, tolerance_mm: float = 5.0) -> list[int]:
    """Frames where a black rod's motor-reported shift disagrees with the CV shift.

    Flagged frames stay in the dataset; the CV shift remains the label.
    """
    flagged = []
    for rec in dataset.records:
        for rid, r in rec.rods.items():
            if rid.team is not Team.BLACK or r.motor_shift is None:
                continue
            if abs(r.motor_shift - r.cv_shift) > tolerance_mm:
                flagged.append(rec.frame_id)
                break
    return flagged


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/val partition with ``ceil(ratio * n)`` training items."""
    n_train = min(n, math.ceil(ratio * n - 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(dataset: Dataset, ratio: float = 0.8, seed: int = 0):
    tr, va = split_indices(len(dataset), ratio, seed)
    return [dataset.records[i] for i in tr], [dataset.records[i] for i in va]


# -- training views -------------------------------------------------------------

def rod_labels(rec: CaptureRecord, rid: RodId, labels: str = "measured") -> tuple[float, float]:
    """(shift mm, rotation deg) used as the regression target.

    ``measured`` mirrors the real pipeline: CV shift for every rod, motor
    rotation for black rods, accelerometer rotation for white rods.
    ``true`` uses the simulator's ground truth.
    """
    r = rec.rods[rid]
    if labels == "true":
        return r.gt_shift, r.gt_rot
    if labels != "measured":
        raise ValueError(f"unknown label source {labels!r}")
    rot = r.motor_rot if rid.team is Team.BLACK and r.motor_rot is not None else r.accel_rot
    return r.cv_shift, rot


def rod_cutouts(dataset: Dataset, rod: RodConfig, records: Iterable[CaptureRecord] | None = None,
                size: tuple[int, int] | None = None) -> np.ndarray:
    size = size or dataset.render_options.cutout_size
    recs = dataset.records if records is None else list(records)
    w, h = size
    out = np.empty((len(recs), h, w), dtype=np.uint8)
    for i, rec in enumerate(recs):
        out[i] = simulator.extract_cutout(dataset.image(rec), rod, size)
    return out


def all_cutouts(dataset: Dataset, records: Iterable[CaptureRecord] | None = None,
                size: tuple[int, int] | None = None) -> dict[RodId, np.ndarray]:
    """Cutouts for every rod, reading each frame image once."""
    size = size or dataset.render_options.cutout_size
    recs = dataset.records if records is None else list(records)
    w, h = size
    out = {rid: np.empty((len(recs), h, w), dtype=np.uint8) for rid in ROD_IDS}
    for i, rec in enumerate(recs):
        img = dataset.image(rec)
        for rod in dataset.geometry.rods:
            out[rod.id][i] = simulator.extract_cutout(img, rod, size)
    return out
