"""Toy Vision Transformer and MLP-Mixer built from :mod:`libragrad.layers`.

Inputs are synthetic token grids of shape (tokens, dim). Every additive
constant (linear biases, positional embeddings, the CLS token) is a
registered bias, so the models are FullGrad-complete when every non-affine
component runs in Libra mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import layers
from .engine import EngineError, Tape, Tensor, concat, gather, reduce_mean, reshape, softmax, transpose
from .policy import GradPolicy
from .rng import Rng

__all__ = [
    "SpecError",
    "ModelError",
    "LayerSpec",
    "ModelHandle",
    "Run",
    "FunctionModel",
    "build_vit",
    "build_mixer",
    "build_model",
    "save_model",
    "load_model",
    "MODEL_FORMAT",
    "MODEL_FORMAT_VERSION",
]

MODEL_FORMAT = "libragrad-model"
MODEL_FORMAT_VERSION = 1


class SpecError(ValueError):
    pass


class ModelError(EngineError, ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    dim: int = 16
    heads: int = 2
    tokens: int = 8
    depth: int = 2
    mlp_ratio: int = 2
    activation: str = "gelu"
    mixer_mode: bool = False
    eps: float = 1e-5
    classes: int = 10
    pooling: str = "mean"
    gated_mlp: bool = True
    final_norm: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("dim", "heads", "tokens", "classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if self.depth < 0:
            raise SpecError("depth must be >= 0")
        if self.dim % self.heads:
            raise SpecError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not self.eps > 0:
            raise SpecError("eps must be > 0")
        if self.activation not in ("relu", "gelu", "silu"):
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("mean", "cls"):
            raise SpecError(f"unknown pooling {self.pooling!r}")
        if self.mixer_mode and self.pooling != "mean":
            raise SpecError("mixer models use mean pooling")
        if (self.final_norm or self.depth > 0) and self.dim < 2:
            raise SpecError("layernorm needs dim >= 2")

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Run:
    """One forward pass: the tape plus the tensors attribution methods need."""

    tape: Tape
    policy: GradPolicy
    input: Tensor
    logits: Tensor
    block_inputs: list[Tensor]
    last: Tensor
    stream_rows: np.ndarray
    output: Tensor | None = None

    @property
    def values(self) -> np.ndarray:
        return self.logits.value


def _param_shapes(spec: LayerSpec) -> list[tuple[str, tuple[int, ...], int, bool]]:
    """(name, shape, owner layer, is_bias) in initialization order."""
    d, T = spec.dim, spec.tokens
    hd = d * spec.mlp_ratio
    out = [("embed.weight", (d, d), 0, False), ("embed.bias", (d,), 0, True),
           ("pos_embed", (T, d), 0, True)]
    if spec.pooling == "cls":
        out.append(("cls_token", (1, d), 0, True))
    for l in range(1, spec.depth + 1):
        p = f"block{l}"
        if spec.mixer_mode:
            th = T * spec.mlp_ratio
            out += [(f"{p}.tok1.weight", (th, T), l, False), (f"{p}.tok1.bias", (th,), l, True),
                    (f"{p}.tok2.weight", (T, th), l, False), (f"{p}.tok2.bias", (T,), l, True)]
        else:
            for n in ("q", "k", "v", "proj"):
                out += [(f"{p}.{n}.weight", (d, d), l, False), (f"{p}.{n}.bias", (d,), l, True)]
        out += [(f"{p}.fc1.weight", (hd, d), l, False), (f"{p}.fc1.bias", (hd,), l, True)]
        if spec.gated_mlp:
            out += [(f"{p}.fc3.weight", (hd, d), l, False), (f"{p}.fc3.bias", (hd,), l, True)]
        out += [(f"{p}.fc2.weight", (d, hd), l, False), (f"{p}.fc2.bias", (d,), l, True)]
    L = spec.depth + 1
    out += [("head.weight", (spec.classes, d), L, False), ("head.bias", (spec.classes,), L, True)]
    return out


class ModelHandle:
    """Immutable model: spec, parameters and the bias registry."""

    def __init__(self, spec: LayerSpec, params: Mapping[str, np.ndarray]):
        self.spec = spec
        layout = _param_shapes(spec)
        expected = {name for name, *_ in layout}
        if set(params) != expected:
            missing, extra = expected - set(params), set(params) - expected
            raise ModelError(f"parameter mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        frozen = {}
        for name, shape, _, _ in layout:
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ModelError(f"{name}: shape {arr.shape} != {shape}")
            arr.flags.writeable = False
            frozen[name] = arr
        self.params = MappingProxyType(frozen)
        self.bias_layers = MappingProxyType({n: l for n, _, l, is_b in layout if is_b})

    @property
    def n_tokens(self) -> int:
        return self.spec.tokens

    @property
    def supports_token_exclusion(self) -> bool:
        return not self.spec.mixer_mode

    @property
    def min_tokens(self) -> int:
        return 0

    def with_params(self, **updates: np.ndarray) -> "ModelHandle":
        params = dict(self.params)
        for k, v in updates.items():
            name = k.replace("__", ".")
            if name not in params:
                raise ModelError(f"unknown parameter {name!r}")
            params[name] = v
        return ModelHandle(self.spec, params)

    def with_biases_zeroed(self) -> "ModelHandle":
        params = {k: (np.zeros_like(v) if k in self.bias_layers else v) for k, v in self.params.items()}
        return ModelHandle(self.spec, params)

    # forward

    def run(self, x, policy: GradPolicy | None = None, positions=None,
            output: str = "logit", target: int | None = None) -> Run:
        """Forward pass on a fresh tape.

        ``positions`` gives the original token index of each row of ``x``
        (true token masking); rows keep their own positional embedding.
        ``output="prob"`` appends a softmax so ``run.output`` holds class
        probabilities.
        """
        policy = policy or GradPolicy.standard()
        spec = self.spec
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != spec.dim:
            raise ModelError(f"input must have shape (tokens, {spec.dim}), got {x.shape}")
        if positions is None:
            if x.shape[0] != spec.tokens:
                raise ModelError(f"expected {spec.tokens} tokens, got {x.shape[0]}")
            positions = np.arange(spec.tokens)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (x.shape[0],):
            raise ModelError("positions must have one entry per input row")
        if positions.size and (positions.min() < 0 or positions.max() >= spec.tokens
                               or len(set(positions.tolist())) != positions.size):
            raise ModelError("positions must be distinct token indices")
        if spec.mixer_mode and not np.array_equal(positions, np.arange(spec.tokens)):
            raise ModelError("mixer models cannot exclude tokens; use zero-fill masking")

        modes = {k: ("libra" if getattr(policy, "libra_" + k) else "standard")
                 for k in ("layernorm", "attention", "activation", "selfgate")}
        P = self.params
        tape = Tape()
        xin = tape.input(x, "x")
        stream_rows = np.arange(x.shape[0])
        block_inputs: list[Tensor] = []
        d = spec.dim

        if x.shape[0] == 0 and spec.pooling == "mean":
            # nothing left to pool: the head sees a zero vector
            h = last = tape.constant(np.zeros((0, d)))
            pooled = tape.constant(np.zeros(d))
        else:
            h = layers.linear(xin, P["embed.weight"], P["embed.bias"], layer=0, name="embed.bias")
            pos = tape.bias(P["pos_embed"], 0, "pos_embed", token_axis=0)
            pos_rows = gather(pos, positions, 0)
            tape.mark_bias_tokens(pos, pos_rows, 0)
            h = h + pos_rows
            if spec.pooling == "cls":
                cls = tape.bias(P["cls_token"], 0, "cls_token")
                h = concat([cls, h], 0)
                stream_rows = np.concatenate([[-1], stream_rows])
            for l in range(1, spec.depth + 1):
                block_inputs.append(h)
                if spec.mixer_mode:
                    h = self._mixer_block(h, l, modes, policy)
                else:
                    h = self._vit_block(h, l, modes, policy)
            last = h
            z = layers.layernorm(h, spec.eps, modes["layernorm"]) if spec.final_norm else h
            if spec.pooling == "cls":
                pooled = reshape(gather(z, [0], 0), (d,))
            else:
                pooled = reduce_mean(z, 0)
        logits = layers.linear(pooled, P["head.weight"], P["head.bias"],
                               layer=spec.depth + 1, name="head.bias", token_axis=None)
        run = Run(tape, policy, xin, logits, block_inputs, last, stream_rows)
        if output == "logit":
            run.output = logits
        elif output == "prob":
            run.output = softmax(logits, -1)
        else:
            raise ModelError(f"unknown output {output!r}")
        return run

    def _mlp(self, m: Tensor, l: int, modes, policy) -> Tensor:
        P, p = self.params, f"block{l}"
        u = layers.linear(m, P[f"{p}.fc1.weight"], P[f"{p}.fc1.bias"], layer=l, name=f"{p}.fc1.bias")
        f1 = layers.activation(u, self.spec.activation, modes["activation"])
        if self.spec.gated_mlp:
            f2 = layers.linear(m, P[f"{p}.fc3.weight"], P[f"{p}.fc3.bias"], layer=l,
                               name=f"{p}.fc3.bias")
            f1 = layers.self_gate(f1, f2, modes["selfgate"], policy.elemwise_coeffs)
        return layers.linear(f1, P[f"{p}.fc2.weight"], P[f"{p}.fc2.bias"], layer=l,
                             name=f"{p}.fc2.bias")

    def _vit_block(self, h: Tensor, l: int, modes, policy) -> Tensor:
        spec, P, p = self.spec, self.params, f"block{l}"
        T, d, H = h.shape[0], spec.dim, spec.heads
        a = layers.layernorm(h, spec.eps, modes["layernorm"])
        qkv = []
        for n in ("q", "k", "v"):
            t = layers.linear(a, P[f"{p}.{n}.weight"], P[f"{p}.{n}.bias"], layer=l, name=f"{p}.{n}.bias")
            qkv.append(transpose(reshape(t, (T, H, d // H)), (1, 0, 2)))
        o = layers.attention(*qkv, mode=modes["attention"])
        o = reshape(transpose(o, (1, 0, 2)), (T, d))
        o = layers.linear(o, P[f"{p}.proj.weight"], P[f"{p}.proj.bias"], layer=l, name=f"{p}.proj.bias")
        h = h + o
        m = layers.layernorm(h, spec.eps, modes["layernorm"])
        return h + self._mlp(m, l, modes, policy)

    def _mixer_block(self, h: Tensor, l: int, modes, policy) -> Tensor:
        spec, P, p = self.spec, self.params, f"block{l}"
        a = transpose(layers.layernorm(h, spec.eps, modes["layernorm"]))
        u = layers.linear(a, P[f"{p}.tok1.weight"], P[f"{p}.tok1.bias"], layer=l,
                          name=f"{p}.tok1.bias", token_axis=None)
        u = layers.activation(u, spec.activation, modes["activation"])
        o = layers.linear(u, P[f"{p}.tok2.weight"], P[f"{p}.tok2.bias"], layer=l,
                          name=f"{p}.tok2.bias", token_axis=1)
        h = h + transpose(o)
        m = layers.layernorm(h, spec.eps, modes["layernorm"])
        return h + self._mlp(m, l, modes, policy)

    def logits(self, x, positions=None) -> np.ndarray:
        return self.run(x, positions=positions).values.copy()

    def predict(self, x) -> int:
        return int(np.argmax(self.logits(x)))


class FunctionModel:
    """Adapter giving a plain tape function the model interface.

    ``fn(tape, x, policy)`` receives the input tensor and returns the
    output tensor; it is flattened to a logit vector. No biases are
    registered unless ``fn`` registers them itself.
    """

    supports_token_exclusion = False
    min_tokens = 0

    def __init__(self, fn, n_tokens: int | None = None):
        self.fn = fn
        self._n_tokens = n_tokens

    @property
    def n_tokens(self):
        return self._n_tokens

    def run(self, x, policy: GradPolicy | None = None, positions=None,
            output: str = "logit", target: int | None = None) -> Run:
        if positions is not None:
            raise ModelError("function models cannot exclude tokens")
        policy = policy or GradPolicy.standard()
        x = np.asarray(x, dtype=np.float64)
        tape = Tape()
        xin = tape.input(x, "x")
        out = self.fn(tape, xin, policy)
        logits = reshape(out, (-1,)) if out.ndim != 1 else out
        rows = np.arange(x.shape[0]) if x.ndim else np.zeros(0, dtype=np.int64)
        run = Run(tape, policy, xin, logits, [], xin, rows)
        if output == "logit":
            run.output = logits
        elif output == "prob":
            run.output = softmax(logits, -1)
        else:
            raise ModelError(f"unknown output {output!r}")
        return run

    def logits(self, x, positions=None) -> np.ndarray:
        return self.run(x, positions=positions).values.copy()

    def predict(self, x) -> int:
        return int(np.argmax(self.logits(x)))


def _init_params(spec: LayerSpec, rng: Rng) -> dict[str, np.ndarray]:
    return {name: rng.normal(shape, std=spec.init_std) for name, shape, _, _ in _param_shapes(spec)}


def build_vit(spec: LayerSpec, seed: int = 0, rng: Rng | None = None) -> ModelHandle:
    if spec.mixer_mode:
        raise SpecError("build_vit called with mixer_mode set")
    return ModelHandle(spec, _init_params(spec, rng or Rng(seed)))


def build_mixer(spec: LayerSpec, seed: int = 0, rng: Rng | None = None) -> ModelHandle:
    if not spec.mixer_mode:
        spec = LayerSpec(**{**spec.to_dict(), "mixer_mode": True})
    return ModelHandle(spec, _init_params(spec, rng or Rng(seed)))


def build_model(spec: LayerSpec, seed: int = 0, rng: Rng | None = None) -> ModelHandle:
    return (build_mixer if spec.mixer_mode else build_vit)(spec, seed, rng)


def save_model(path, model: ModelHandle) -> None:
    """Write spec and weights as JSON; floats use shortest round-trip repr."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "params": [{"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> ModelHandle:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported version {doc.get('version')}")
    spec = LayerSpec.from_dict(doc["spec"])
    params = {}
    for entry in doc["params"]:
        data = np.array(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != math.prod(shape):
            raise ModelError(f"{entry['name']}: data length does not match shape {shape}")
        params[entry["name"]] = data.reshape(shape)
    return ModelHandle(spec, params)
