"""Layer primitives in matched standard / Libra pairs.

Each pair computes the same forward value; the Libra variant wraps the
non-linear part in :func:`~libragrad.engine.detach` (or scales product
branches) so that the layer is FullGrad-complete.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import (
    EngineError,
    ShapeError,
    Tensor,
    add,
    detach,
    erf,
    matmul,
    mul,
    reduce_mean,
    reduce_var,
    relu,
    scale,
    sigmoid,
    softmax,
    sqrt,
    swap_backward,
    transpose,
)

__all__ = [
    "LayerError",
    "MODES",
    "linear",
    "layernorm",
    "attention",
    "gated_activation",
    "activation",
    "self_gate",
]

MODES = ("standard", "libra")
_AUTO = object()


class LayerError(EngineError, ValueError):
    pass


def _check_mode(mode: str) -> bool:
    if mode not in MODES:
        raise LayerError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode == "libra"


def linear(x: Tensor, W, b=None, *, layer: int = 0, name: str | None = None,
           token_axis=_AUTO) -> Tensor:
    """``x @ W.T + b`` with ``W`` of shape (out, in).

    A numpy ``b`` is registered as a bias on ``x``'s tape; a Tensor ``b``
    must already be registered. ``token_axis`` names the axis of the output
    that runs over tokens (default: axis 0 of a 2-D output), used for
    per-token bias attribution.
    """
    tape = x.tape
    Wt = W if isinstance(W, Tensor) else tape.constant(W)
    if Wt.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {Wt.shape}")
    if x.shape[-1] != Wt.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {Wt.shape[1]}")
    y = matmul(x, transpose(Wt))
    if b is None:
        return y
    if not isinstance(b, Tensor):
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (Wt.shape[0],):
            raise ShapeError(f"linear bias shape {b.shape} != ({Wt.shape[0]},)")
        b = tape.bias(b, layer, name or f"linear{len(tape.bias_names)}.bias")
    if token_axis is _AUTO:
        token_axis = 0 if y.ndim == 2 else None
    return add(y, tape.expand_bias(b, y.shape, token_axis))


def layernorm(x: Tensor, eps: float = 1e-5, mode: str = "standard") -> Tensor:
    """LayerNorm over the last axis, no affine parameters.

    Libra mode detaches the whole denominator ``sqrt(var + eps)``; the
    centering stays differentiable.
    """
    libra = _check_mode(mode)
    if not eps > 0:
        raise LayerError(f"eps must be > 0, got {eps}")
    if x.shape[-1] < 2:
        raise LayerError("layernorm needs a normalization axis of length >= 2")
    mu = reduce_mean(x, -1, keepdims=True)
    centered = x - mu
    s = sqrt(add(reduce_var(x, -1, keepdims=True), float(eps)))
    if libra:
        s = detach(s)
    return centered / s


def attention(Q: Tensor, K: Tensor, V: Tensor, mode: str = "standard",
              return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes.

    Libra mode detaches the attention weights, so gradient reaches only V.
    """
    libra = _check_mode(mode)
    if Q.ndim < 2 or K.ndim < 2 or V.ndim < 2:
        raise ShapeError("attention operands must be at least 2-D")
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {K.shape} vs {V.shape}")
    if not (Q.shape[:-2] == K.shape[:-2] == V.shape[:-2]):
        raise ShapeError("attention batch dimensions differ")
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = scale(matmul(Q, transpose(K, axes)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = softmax(scores, -1)
    if libra:
        weights = detach(weights)
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


def _gate(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return scale(add(erf(scale(x, 1.0 / math.sqrt(2.0))), 1.0), 0.5)
    if kind == "silu":
        return sigmoid(x)
    raise LayerError(f"unknown gated activation {kind!r}")


def gated_activation(x: Tensor, kind: str, mode: str = "standard") -> Tensor:
    """``x * gate(x)`` for GELU (erf gate) or SiLU (sigmoid gate)."""
    libra = _check_mode(mode)
    g = _gate(x, kind)
    if libra:
        g = detach(g)
    return mul(x, g)


def activation(x: Tensor, kind: str, mode: str = "standard") -> Tensor:
    if kind == "relu":
        _check_mode(mode)
        return relu(x)
    return gated_activation(x, kind, mode)


def self_gate(f1: Tensor, f2: Tensor, mode: str = "standard",
              coeffs: tuple[float, float] = (0.5, 0.5), require_complete: bool = True,
              via: str = "coeffs") -> Tensor:
    """Element-wise product of two branches.

    Standard mode is the plain product rule. Libra mode scales the cotangent
    sent to ``f1`` by ``coeffs[0]`` and to ``f2`` by ``coeffs[1]``; with
    ``via="swap"`` and the default coefficients the same backward is built
    as ``swap_backward(f1*f2, 0.5*(f1*f2))``.
    """
    libra = _check_mode(mode)
    if f1.shape != f2.shape:
        raise ShapeError(f"self_gate branch shapes differ: {f1.shape} vs {f2.shape}")
    if not libra:
        return mul(f1, f2)
    a, b = float(coeffs[0]), float(coeffs[1])
    if require_complete and abs(a + b - 1.0) > 1e-12:
        raise LayerError(f"coefficients must sum to 1 for completeness, got {a} + {b}")
    if via == "swap":
        if a != b:
            raise LayerError("swap construction only covers equal coefficients")
        prod = mul(f1, f2)
        return swap_backward(prod, scale(prod, a))
    if via != "coeffs":
        raise LayerError(f"unknown self_gate construction {via!r}")
    return mul(f1, f2, coeffs=(a, b))
