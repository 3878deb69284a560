"""Concept activation vectors on a small CNN: probes, alignment metrics and visualizations."""

from .errors import CavlabError, DataError, NumericError
from .probes import Cav, ProbeConfig, load_cav, save_cav

__version__ = "0.1.0"

__all__ = ["Cav", "CavlabError", "DataError", "NumericError", "ProbeConfig", "load_cav", "save_cav", "__version__"]
