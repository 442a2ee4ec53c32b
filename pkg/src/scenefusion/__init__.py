"""Instance- and scene-level LiDAR-camera fusion for 3D detection on
procedurally generated synthetic scenes."""

from .config import RunConfig
from .geometry import BEVGridSpec, CameraCalibration, PointCloud
from .model import FusionDetector

__all__ = ["RunConfig", "BEVGridSpec", "CameraCalibration", "PointCloud",
           "FusionDetector"]
__version__ = "0.1.0"
