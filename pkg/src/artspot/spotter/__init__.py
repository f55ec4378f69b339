from .config import MODES, SpotterConfig, canonical_mode
from .model import DetectionOut, SpotterModel, preprocess

__all__ = ["MODES", "SpotterConfig", "canonical_mode", "DetectionOut", "SpotterModel", "preprocess"]
