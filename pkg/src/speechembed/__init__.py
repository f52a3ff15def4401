"""Fast non-semantic speech embedding students: build, compress, quantize,
distill, probe and benchmark MobileNetV3-family models."""

from .zoo import ModelConfig, StudentModel, build, enumerate_grid, forward, param_count

__all__ = ["ModelConfig", "StudentModel", "build", "enumerate_grid", "forward", "param_count"]
__version__ = "0.1.0"
