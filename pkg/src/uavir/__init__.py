"""UAV-carried intelligent reflector downlink: channels, beamforming, learning, simulation."""

__version__ = "0.1.0"
