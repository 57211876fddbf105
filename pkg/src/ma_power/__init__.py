"""Joint beamforming and movable-antenna positioning for downlink power minimization."""

__version__ = "0.1.0"
