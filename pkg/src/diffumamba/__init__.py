"""Desk-scale 3D segmentation: UNet encoder/decoder with a Mamba
bottleneck and a learned noise reduction module, plus data synthesis,
metrics and analysis tooling."""

__version__ = "0.1.0"
