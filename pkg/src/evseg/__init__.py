"""Event-camera simulation, event representations and RGB+event fusion segmentation."""
from .errors import (ConfigError, DataError, DimensionError, EvsegError, NumericError,
                     OrderingError, ParseError, UsageError, ValidationError)
from .events import Event, EventStream, SimulatorConfig, read_events, simulate_events, write_events
from .metrics import ConfusionMatrix, LabelMap, accumulate, metrics
from .representation import ReprConfig, represent, table2_config, voxelize

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DimensionError", "EvsegError", "NumericError",
    "OrderingError", "ParseError", "UsageError", "ValidationError",
    "Event", "EventStream", "SimulatorConfig", "read_events", "simulate_events", "write_events",
    "ConfusionMatrix", "LabelMap", "accumulate", "metrics",
    "ReprConfig", "represent", "table2_config", "voxelize",
]
