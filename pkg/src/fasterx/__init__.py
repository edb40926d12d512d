"""FasterX: lightweight anchor-free detector for small-object scenes.

Core pieces: a pixel-shuffle encode/decode detection head, a slimmed
top-down FPN with ghost-module channel unification, SimOTA dynamic label
assignment with a Focal+CIoU cost, auxiliary-head online distillation,
and an analytic parameter/FLOPs profiler.
"""

from fasterx.model import ModelConfig, FasterX, build_model

__all__ = ["ModelConfig", "FasterX", "build_model"]
__version__ = "0.1.0"
