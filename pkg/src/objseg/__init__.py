"""Center-point detection with an object-guided, instance-normalized segmentation branch."""

__version__ = "0.1.0"
