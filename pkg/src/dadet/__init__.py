"""Toy multi-scale single-shot smoke detector with detection-layer domain adaptation."""
from ._accel import backend_name
from .datagen import Domain, DomainParams, Scene, generate_scene, generate_split
from .detector import Detector, DetectorConfig

__all__ = ["Detector", "DetectorConfig", "Domain", "DomainParams", "Scene", "backend_name",
           "generate_scene", "generate_split"]
__version__ = "0.1.0"
