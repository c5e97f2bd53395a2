"""Reverse-mode autodiff with FullGrad-complete ("Libra") backward rules.

The engine records a tape of numpy operations; :mod:`libragrad.layers`
provides transformer layers whose Libra variants rewire the backward pass
so that input-times-gradient plus bias terms sum exactly to the output.
"""

__version__ = "0.1.0"

from . import engine, layers, oracles
from ._kernels import BACKEND
from .attribution import AttributionMap, attribute, render_map
from .engine import Tape, Tensor, detach, swap_backward
from .metrics import completeness_error, faithfulness
from .models import FunctionModel, LayerSpec, ModelHandle, build_mixer, build_model, build_vit
from .policy import GradPolicy
from .rng import Rng

__all__ = [
    "__version__",
    "BACKEND",
    "engine",
    "layers",
    "oracles",
    "Tape",
    "Tensor",
    "detach",
    "swap_backward",
    "GradPolicy",
    "LayerSpec",
    "ModelHandle",
    "FunctionModel",
    "build_vit",
    "build_mixer",
    "build_model",
    "AttributionMap",
    "attribute",
    "render_map",
    "completeness_error",
    "faithfulness",
    "Rng",
]
