"""Source-wise and layer-wise knowledge distillation for audio reasoning at desk scale."""

__version__ = "0.1.0"
