"""Cross-embodiment diffusion action heads on a synthetic planar world."""

__version__ = "0.1.0"
