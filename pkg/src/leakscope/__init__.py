"""Packet-size side-channel analysis for encrypted instant messaging traffic."""

from .core import OS, Action, Dataset, Direction, Label, LabeledTrace, Language, PacketRecord, Service
from .errors import ConfigError, DataError, LeakscopeError

__version__ = "0.1.0"

__all__ = [
    "OS", "Action", "Dataset", "Direction", "Label", "LabeledTrace", "Language", "PacketRecord", "Service",
    "ConfigError", "DataError", "LeakscopeError", "__version__",
]
