"""Foosball game-state detection: ground-truth capture, per-rod regression, provisioning."""

from foosball_state.core import (
    ROD_IDS,
    Calibration,
    GameState,
    Role,
    RodConfig,
    RodId,
    RodState,
    TableGeometry,
    Team,
    default_table_geometry,
    velocity,
)

__version__ = "0.1.0"

__all__ = [
    "ROD_IDS",
    "Calibration",
    "GameState",
    "Role",
    "RodConfig",
    "RodId",
    "RodState",
    "TableGeometry",
    "Team",
    "default_table_geometry",
    "velocity",
]
