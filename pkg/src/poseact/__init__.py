"""6D object pose estimation as an iterative discrete action decision process."""

__version__ = "0.1.0"
