"""Point-supervised weakly semi-supervised object detection on synthetic rasters."""

__version__ = "0.1.0"
