"""Domain model shared by every stage: rods, table geometry, game states."""

from __future__ import annotations

import configparser
import enum
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

GEOMETRY_FORMAT = "foosball-geometry"
GEOMETRY_VERSION = 1


class Team(str, enum.Enum):
    BLACK = "black"
    WHITE = "white"


class Role(str, enum.Enum):
    GOAL = "goal"
    DEFENSE = "defense"
    MIDFIELD = "midfield"
    STRIKER = "striker"


@dataclass(frozen=True, order=True)
class RodId:
    team: Team
    role: Role

    @property
    def name(self) -> str:
        return f"{self.team.value}_{self.role.value}"

    @classmethod
    def parse(cls, text: str) -> RodId:
        """Parse ``black_goal`` / ``black-goal`` / ``black goal``."""
        parts = text.replace("-", "_").replace(" ", "_").lower().split("_")
        if len(parts) != 2:
            raise ValueError(f"not a rod id: {text!r}")
        return cls(Team(parts[0]), Role(parts[1]))

    def __str__(self) -> str:
        return self.name


# Canonical order: black goal -> striker, then white goal -> striker.
ROD_IDS: tuple[RodId, ...] = tuple(RodId(t, r) for t in Team for r in Role)


@dataclass(frozen=True)
class Calibration:
    px_per_mm: float
    table_center_px: float

    def __post_init__(self):
        if not self.px_per_mm > 0:
            raise ValueError(f"px_per_mm must be positive, got {self.px_per_mm}")


@dataclass(frozen=True)
class RodConfig:
    """Static configuration of one rod.

    ``cutout`` is ``(x, y, w, h)`` in full-frame pixels. The rod axis runs
    along the image y axis at column ``center_column_x``.
    """

    id: RodId
    figure_count: int
    shift_half_range: float  # mm
    rotation_min: float  # deg, reported convention
    rotation_max: float
    cutout: tuple[int, int, int, int]
    center_column_x: int
    figure_spacing: float = 0.0  # mm between neighbouring figures
    stopper_offset: float = 0.0  # mm from rod center to each stopper center

    def __post_init__(self):
        if self.figure_count < 1:
            raise ValueError(f"{self.id}: figure_count must be >= 1")
        if not self.shift_half_range > 0:
            raise ValueError(f"{self.id}: shift_half_range must be positive")
        if not 0 <= self.rotation_min < self.rotation_max <= 360:
            raise ValueError(f"{self.id}: bad rotation limits")

    @property
    def full_circle(self) -> bool:
        return self.rotation_min == 0 and self.rotation_max == 360

    def check_state(self, state: RodState) -> None:
        """Raise ``ValueError`` if ``state`` violates this rod's limits."""
        if abs(state.shift) > self.shift_half_range + 1e-9:
            raise ValueError(
                f"{self.id}: shift {state.shift} outside ±{self.shift_half_range}")
        if not self.full_circle and not (
                self.rotation_min - 1e-9 <= state.rotation <= self.rotation_max + 1e-9):
            raise ValueError(
                f"{self.id}: rotation {state.rotation} outside "
                f"[{self.rotation_min}, {self.rotation_max}]")


@dataclass(frozen=True)
class RodState:
    shift: float  # mm, 0 = centered
    rotation: float  # deg in [0, 360), 180 = figure vertical head up

    def __post_init__(self):
        if not 0 <= self.rotation < 360:
            raise ValueError(f"rotation must be in [0, 360), got {self.rotation}")


@dataclass(frozen=True)
class GameState:
    frame_id: int
    timestamp_us: int
    rods: Mapping[RodId, RodState] = field(hash=False)

    def __post_init__(self):
        missing = set(ROD_IDS) - set(self.rods)
        if missing:
            raise ValueError(f"game state lacks rods: {sorted(map(str, missing))}")

    def ordered(self) -> list[tuple[RodId, RodState]]:
        return [(rid, self.rods[rid]) for rid in ROD_IDS]


@dataclass(frozen=True)
class TableGeometry:
    rods: tuple[RodConfig, ...]
    calibration: Calibration
    frame_width: int = 1280
    frame_height: int = 720

    def __post_init__(self):
        ids = [r.id for r in self.rods]
        if sorted(ids) != sorted(ROD_IDS) or len(ids) != len(ROD_IDS):
            raise ValueError("geometry must define each of the 8 rods exactly once")
        for rod in self.rods:
            x, y, w, h = rod.cutout
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > self.frame_width \
                    or y + h > self.frame_height:
                raise ValueError(f"{rod.id}: cutout {rod.cutout} leaves the frame")
            if not 0 <= rod.center_column_x < self.frame_width:
                raise ValueError(f"{rod.id}: center column outside the frame")

    def rod(self, rid: RodId) -> RodConfig:
        for r in self.rods:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def ordered(self) -> list[RodConfig]:
        return [self.rod(rid) for rid in ROD_IDS]

    def with_rod(self, rod: RodConfig) -> TableGeometry:
        return replace(self, rods=tuple(rod if r.id == rod.id else r for r in self.rods))


# Left-to-right placement of the rods across the frame.
_FRAME_ORDER = (
    RodId(Team.BLACK, Role.GOAL), RodId(Team.BLACK, Role.DEFENSE),
    RodId(Team.WHITE, Role.STRIKER), RodId(Team.BLACK, Role.MIDFIELD),
    RodId(Team.WHITE, Role.MIDFIELD), RodId(Team.BLACK, Role.STRIKER),
    RodId(Team.WHITE, Role.DEFENSE), RodId(Team.WHITE, Role.GOAL),
)

_FIGURE_COUNTS = {Role.GOAL: 1, Role.DEFENSE: 2, Role.MIDFIELD: 5, Role.STRIKER: 3}
# defense and midfield follow from the 11 mm bound being 8.5 % and 20 % of travel
_HALF_RANGES = {Role.GOAL: 120.0, Role.DEFENSE: 129.4, Role.MIDFIELD: 55.0,
                Role.STRIKER: 105.0}
_SPACINGS = {Role.GOAL: 0.0, Role.DEFENSE: 50.0, Role.MIDFIELD: 45.0, Role.STRIKER: 45.0}
# field half-width (180 mm) minus travel minus stopper half length (5 mm)
_STOPPER_OFFSETS = {Role.GOAL: 55.0, Role.DEFENSE: 45.6, Role.MIDFIELD: 120.0,
                    Role.STRIKER: 70.0}


def default_table_geometry() -> TableGeometry:
    width, height = 1280, 720
    pitch = width // len(_FRAME_ORDER)
    rods = []
    for i, rid in enumerate(_FRAME_ORDER):
        cx = pitch // 2 + i * pitch
        if rid.team is Team.BLACK:
            rot = (120.0, 240.0)
        else:
            rot = (0.0, 360.0)
        rods.append(RodConfig(
            id=rid,
            figure_count=_FIGURE_COUNTS[rid.role],
            shift_half_range=_HALF_RANGES[rid.role],
            rotation_min=rot[0],
            rotation_max=rot[1],
            cutout=(cx - pitch // 2, 0, pitch, height),
            center_column_x=cx,
            figure_spacing=_SPACINGS[rid.role],
            stopper_offset=_STOPPER_OFFSETS[rid.role],
        ))
    rods.sort(key=lambda r: ROD_IDS.index(r.id))
    return TableGeometry(
        rods=tuple(rods),
        calibration=Calibration(px_per_mm=2.0, table_center_px=height / 2),
        frame_width=width,
        frame_height=height,
    )


def wrap_degrees(delta: float) -> float:
    """Map an angle difference onto (-180, 180]."""
    d = delta % 360.0
    if d > 180.0:
        d -= 360.0
    return d


def velocity(prev: GameState, cur: GameState) -> dict[RodId, tuple[float, float]]:
    """Per-rod (mm/s, deg/s) between two consecutive states.

    Angular velocity follows the shortest signed arc; an exact half-turn
    counts as +180.
    """
    dt = (cur.timestamp_us - prev.timestamp_us) / 1e6
    if dt <= 0:
        raise ValueError(f"timestamps must increase, got dt={dt} s")
    out = {}
    for rid in ROD_IDS:
        a, b = prev.rods[rid], cur.rods[rid]
        out[rid] = ((b.shift - a.shift) / dt, wrap_degrees(b.rotation - a.rotation) / dt)
    return out


# -- config file -----------------------------------------------------------

def new_config() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case
    return cp


def geometry_to_config(geometry: TableGeometry, cp: configparser.ConfigParser | None = None):
    cp = cp or new_config()
    cal = geometry.calibration
    cp["geometry"] = {
        "format": GEOMETRY_FORMAT,
        "version": str(GEOMETRY_VERSION),
        "frame_width": str(geometry.frame_width),
        "frame_height": str(geometry.frame_height),
        "px_per_mm": repr(cal.px_per_mm),
        "table_center_px": repr(cal.table_center_px),
    }
    for rod in geometry.ordered():
        cp[f"rod {rod.id.team.value} {rod.id.role.value}"] = {
            "figure_count": str(rod.figure_count),
            "shift_half_range": repr(rod.shift_half_range),
            "rotation_min": repr(rod.rotation_min),
            "rotation_max": repr(rod.rotation_max),
            "cutout": " ".join(str(v) for v in rod.cutout),
            "center_column_x": str(rod.center_column_x),
            "figure_spacing": repr(rod.figure_spacing),
            "stopper_offset": repr(rod.stopper_offset),
        }
    return cp


def geometry_from_config(cp: configparser.ConfigParser) -> TableGeometry:
    if "geometry" not in cp:
        raise ValueError("config has no [geometry] section")
    g = cp["geometry"]
    if g.get("format") != GEOMETRY_FORMAT:
        raise ValueError(f"unexpected config format {g.get('format')!r}")
    if g.getint("version") != GEOMETRY_VERSION:
        raise ValueError(f"unsupported geometry version {g.get('version')}")
    rods = []
    for rid in ROD_IDS:
        name = f"rod {rid.team.value} {rid.role.value}"
        if name not in cp:
            raise ValueError(f"config lacks section [{name}]")
        s = cp[name]
        cutout = tuple(int(v) for v in s["cutout"].split())
        if len(cutout) != 4:
            raise ValueError(f"[{name}] cutout needs 4 integers")
        rods.append(RodConfig(
            id=rid,
            figure_count=s.getint("figure_count"),
            shift_half_range=s.getfloat("shift_half_range"),
            rotation_min=s.getfloat("rotation_min"),
            rotation_max=s.getfloat("rotation_max"),
            cutout=cutout,
            center_column_x=s.getint("center_column_x"),
            figure_spacing=s.getfloat("figure_spacing", 0.0),
            stopper_offset=s.getfloat("stopper_offset", 0.0),
        ))
    return TableGeometry(
        rods=tuple(rods),
        calibration=Calibration(g.getfloat("px_per_mm"), g.getfloat("table_center_px")),
        frame_width=g.getint("frame_width"),
        frame_height=g.getint("frame_height"),
    )


def config_to_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def read_config(path: str | Path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = new_config()
    cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    return cp


def save_geometry(geometry: TableGeometry, path: str | Path) -> None:
    Path(path).write_text(config_to_text(geometry_to_config(geometry)), encoding="utf-8")


def load_geometry(path: str | Path) -> TableGeometry:
    return geometry_from_config(read_config(path))
