"""Desk-scale simulator and analysis toolkit for a three-node hybrid
fiber/free-space entanglement-distribution network."""

from . import (classical, coinc, entanglement, link, pointing, presets, qtt,
               runner, source, timebase)
from .errors import EntnetError

__all__ = [
    "classical", "coinc", "entanglement", "link", "pointing", "presets",
    "qtt", "runner", "source", "timebase", "EntnetError",
]

__version__ = "0.1.0"
