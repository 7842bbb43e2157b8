"""Time-step mixup knowledge transfer for spiking networks."""

__version__ = "0.1.0"
