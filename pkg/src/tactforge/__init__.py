"""tactforge: synthetic optical-tactile sensor data and calibration toolkit."""

__version__ = "0.1.0"
