"""Rod shift from the rubber stoppers seen in a one-pixel column."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from foosball_state.core import Calibration, RodConfig

DEFAULT_THRESHOLD = 100
DEFAULT_MIN_RUN = 3


class Run(NamedTuple):
    start: int
    length: int

    @property
    def center(self) -> float:
        return self.start + (self.length - 1) / 2


class StopperNotFound(ValueError):
    pass


class DegenerateColumn(ValueError):
    pass


def extract_column(image: np.ndarray, x: int) -> np.ndarray:
    if not 0 <= x < image.shape[1]:
        raise IndexError(f"column {x} outside image of width {image.shape[1]}")
    return image[:, x]


def binarize(col: np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    """``True`` where the pixel is darker than ``threshold``."""
    return np.asarray(col) < threshold


def find_runs(bits: np.ndarray, min_len: int = 1) -> list[Run]:
    """Maximal runs of ``True`` at least ``min_len`` long, in ascending order."""
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    b = np.asarray(bits, dtype=np.int8)
    edges = np.diff(np.concatenate(([0], b, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [Run(int(s), int(e - s)) for s, e in zip(starts, ends) if e - s >= min_len]


def stopper_runs(runs: list[Run]) -> tuple[Run, Run]:
    """The outermost run from each end of the column."""
    if len(runs) < 2:
        raise StopperNotFound(f"need two stopper runs, found {len(runs)}")
    return runs[0], runs[-1]


def stopper_center(runs: list[Run]) -> float:
    """Pixel midpoint between the two stopper-run centers."""
    first, last = stopper_runs(runs)
    if first.start + first.length > last.start:
        raise DegenerateColumn("stopper runs overlap")
    return (first.center + last.center) / 2


def detect_shift(image: np.ndarray, rod: RodConfig, calib: Calibration,
                 threshold: int = DEFAULT_THRESHOLD, min_len: int = DEFAULT_MIN_RUN) -> float:
    """Rod shift in mm from the midpoint of its two stoppers.

    Dark runs between the stoppers (figures crossing the column) are ignored.
    """
    col = extract_column(image, rod.center_column_x)
    rod_center = stopper_center(find_runs(binarize(col, threshold), min_len))
    return (rod_center - calib.table_center_px) / calib.px_per_mm
