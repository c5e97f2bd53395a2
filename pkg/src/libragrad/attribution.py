"""Gradient-based attribution methods and map rendering.

Every method runs under any :class:`~libragrad.policy.GradPolicy`; the policy
only changes which backward rules are used, never shapes. Per-token scores
are plain channel sums so that completeness bookkeeping stays exact.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .policy import GradPolicy

__all__ = [
    "AttributionError",
    "AttributionMap",
    "ixg",
    "fullgrad",
    "fullgrad_plus",
    "integrated_gradients",
    "gradcam",
    "hirescam",
    "xgradcam_plus",
    "METHODS",
    "attribute",
    "render_map",
    "write_pgm",
    "map_record",
]


class AttributionError(ValueError):
    pass


@dataclass
class AttributionMap:
    """Attribution scores for one (model, input, target).

    ``per_token == per_feature.sum(1) + bias_per_token`` for the linear
    methods; the CAM methods rectify ``per_token`` instead. ``bias_total``
    is the exact sum of bias-term contributions and equals
    ``bias_per_token.sum()`` up to rounding.
    """

    method: str
    target: int
    per_feature: np.ndarray
    per_token: np.ndarray
    bias_total: float
    policy: GradPolicy
    output_value: float
    output: str = "logit"
    bias_per_token: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bias_per_token is None:
            self.bias_per_token = np.zeros_like(self.per_token)
        for name in ("per_feature", "per_token", "bias_per_token"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise AttributionError(f"non-finite {name} in {self.method} map")

    @property
    def total(self) -> float:
        """Sum of all attributed contributions: features plus biases."""
        return float(self.per_feature.sum()) + self.bias_total


def _resolve_target(model, x, target, output):
    logits = model.logits(x)
    if target is None:
        return int(np.argmax(logits))
    if not 0 <= int(target) < logits.shape[0]:
        raise AttributionError(f"target {target} out of range for {logits.shape[0]} logits")
    return int(target)


def _rows_to_tokens(rows: np.ndarray, stream_rows: np.ndarray, n_tokens: int,
                    extra: str = "spread") -> np.ndarray:
    """Map stream rows (which may include a CLS row, index -1) to input tokens."""
    out = np.zeros((n_tokens,) + rows.shape[1:])
    for r, t in enumerate(stream_rows):
        if t >= 0:
            out[t] += rows[r]
        elif extra == "spread" and n_tokens:
            out += rows[r] / n_tokens
    return out


def _bias_per_token(records, stream_rows, n_tokens):
    per_token = np.zeros(n_tokens)
    for rec in records:
        tc = rec.token_contributions()
        if tc is not None and tc.shape[0] == stream_rows.shape[0]:
            per_token += _rows_to_tokens(tc, stream_rows, n_tokens)
        elif tc is not None and tc.shape[0] == n_tokens:
            per_token += tc
        elif n_tokens:
            per_token += rec.contribution / n_tokens
    return per_token


def _gradient_run(model, x, target, policy, output):
    run = model.run(x, policy, output=output)
    grads = run.tape.backward(run.output, target)
    return run, grads


def ixg(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """Input times gradient."""
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, grads = _gradient_run(model, x, target, policy, output)
    pf = x * grads[run.input]
    return AttributionMap("ixg", target, pf, pf.sum(axis=1), 0.0, policy,
                          float(run.output.value[target]), output)


def _fullgrad_parts(model, x, target, policy, output):
    run, grads = _gradient_run(model, x, target, policy, output)
    pf = x * grads[run.input]
    n = x.shape[0]
    if policy.include_biases:
        if not grads.biases:
            raise AttributionError("include_biases is set but the model registers no biases")
        bias_total = grads.bias_total
        bias_tok = _bias_per_token(grads.biases, run.stream_rows, n)
    else:
        bias_total, bias_tok = 0.0, np.zeros(n)
    return run, grads, pf, bias_total, bias_tok


def fullgrad(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """Input IxG plus the IxG of every registered bias."""
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, grads, pf, bias_total, bias_tok = _fullgrad_parts(model, x, target, policy, output)
    return AttributionMap("fullgrad", target, pf, pf.sum(axis=1) + bias_tok, bias_total, policy,
                          float(run.output.value[target]), output, bias_tok,
                          {"bias_contributions": {r.name: r.contribution for r in grads.biases}})


def fullgrad_plus(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """FullGrad with the IxG map of every block input added in.

    Block-input rows map onto input tokens; a CLS row is spread uniformly
    over all features.
    """
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, grads, pf, bias_total, bias_tok = _fullgrad_parts(model, x, target, policy, output)
    layer_terms = [pf.sum()]
    total_pf = pf.copy()
    for t in run.block_inputs:
        term_rows = t.value * grads[t]
        mapped = _rows_to_tokens(term_rows, run.stream_rows, x.shape[0], extra="drop")
        cls_rows = term_rows[run.stream_rows < 0]
        if cls_rows.size:
            mapped = mapped + cls_rows.sum() / mapped.size
        total_pf += mapped
        layer_terms.append(float(term_rows.sum()))
    return AttributionMap("fullgrad_plus", target, total_pf, total_pf.sum(axis=1) + bias_tok,
                          bias_total, policy, float(run.output.value[target]), output, bias_tok,
                          {"layer_terms": layer_terms,
                           "bias_contributions": {r.name: (r.owner_layer, r.contribution)
                                                  for r in grads.biases}})


def integrated_gradients(model, x, baseline=None, steps: int = 50, target=None, policy=None,
                         output="logit") -> AttributionMap:
    """Right-endpoint Riemann approximation of the path integral from ``baseline``."""
    policy = policy or GradPolicy.standard()
    if steps < 1:
        raise AttributionError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if baseline.shape != x.shape:
        raise AttributionError(f"baseline shape {baseline.shape} != input shape {x.shape}")
    target = _resolve_target(model, x, target, output)
    delta = x - baseline
    acc = np.zeros_like(x)
    for k in range(1, steps + 1):
        run, grads = _gradient_run(model, baseline + (k / steps) * delta, target, policy, output)
        acc += grads[run.input]
    f_value = float(model.run(x, policy, output=output).output.value[target])
    pf = delta * (acc / steps)
    return AttributionMap("ig", target, pf, pf.sum(axis=1), 0.0, policy, f_value, output,
                          extras={"steps": steps})


def _last_activations(model, x, target, policy, output):
    if not hasattr(model, "run"):
        raise AttributionError("CAM methods need a model with block structure")
    run, grads = _gradient_run(model, x, target, policy, output)
    if run.last is None or run.last.ndim != 2:
        raise AttributionError("CAM methods need token activations from the last block")
    keep = run.stream_rows >= 0
    A = run.last.value[keep]
    G = grads[run.last][keep]
    order = run.stream_rows[keep]
    A_tok = np.zeros((x.shape[0], A.shape[1]))
    G_tok = np.zeros_like(A_tok)
    A_tok[order], G_tok[order] = A, G
    return run, A_tok, G_tok


def gradcam(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """Channel weights from token-averaged gradients of the last block, rectified."""
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, A, G = _last_activations(model, x, target, policy, output)
    alpha = G.mean(axis=0) if G.shape[0] else np.zeros(G.shape[1])
    pf = A * alpha
    return AttributionMap("gradcam", target, pf, np.maximum(pf.sum(axis=1), 0.0), 0.0, policy,
                          float(run.output.value[target]), output, extras={"weights": alpha})


def hirescam(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """Element-wise activation times gradient at the last block, channel-summed."""
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, A, G = _last_activations(model, x, target, policy, output)
    pf = A * G
    return AttributionMap("hirescam", target, pf, pf.sum(axis=1), 0.0, policy,
                          float(run.output.value[target]), output)


def xgradcam_plus(model, x, target=None, policy=None, output="logit") -> AttributionMap:
    """GradCAM with gradients pooled under |A| / sum|A| weights per channel."""
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    target = _resolve_target(model, x, target, output)
    run, A, G = _last_activations(model, x, target, policy, output)
    absA = np.abs(A)
    denom = absA.sum(axis=0)
    alpha = np.divide((G * absA).sum(axis=0), denom, out=np.zeros_like(denom), where=denom > 0)
    pf = A * alpha
    return AttributionMap("xgradcam_plus", target, pf, np.maximum(pf.sum(axis=1), 0.0), 0.0,
                          policy, float(run.output.value[target]), output, extras={"weights": alpha})


METHODS = {
    "ixg": ixg,
    "fullgrad": fullgrad,
    "fullgrad_plus": fullgrad_plus,
    "ig": integrated_gradients,
    "gradcam": gradcam,
    "hirescam": hirescam,
    "xgradcam_plus": xgradcam_plus,
}


def attribute(method: str, model, x, target=None, policy=None, output="logit",
              ig_steps: int = 50) -> AttributionMap:
    if method not in METHODS:
        raise AttributionError(f"unknown attribution method {method!r}; known: {sorted(METHODS)}")
    if method == "ig":
        return integrated_gradients(model, x, steps=ig_steps, target=target, policy=policy,
                                    output=output)
    return METHODS[method](model, x, target=target, policy=policy, output=output)


# rendering


def render_map(amap, upscale: int = 4, grid: tuple[int, int] | None = None) -> np.ndarray:
    """ReLU, divide by the 99th percentile, bicubic upsample, clamp to [0, 1].

    ``amap`` is an :class:`AttributionMap` or a per-token vector laid out
    row-major on ``grid`` (default: the square grid).
    """
    scores = amap.per_token if isinstance(amap, AttributionMap) else np.asarray(amap, dtype=np.float64)
    n = scores.shape[0]
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise AttributionError(f"{n} tokens do not form a square grid; pass grid=(rows, cols)")
        grid = (side, side)
    if grid[0] * grid[1] != n:
        raise AttributionError(f"grid {grid} does not hold {n} tokens")
    if upscale < 1:
        raise AttributionError("upscale must be >= 1")
    pos = np.maximum(scores, 0.0).reshape(grid)
    robust_max = np.percentile(pos, 99)
    if robust_max <= 0:
        return np.zeros((grid[0] * upscale, grid[1] * upscale))
    img = _kernels.bicubic_upsample(np.ascontiguousarray(pos / robust_max), int(upscale))
    return np.clip(img, 0.0, 1.0)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary portable graymap, 8-bit, written atomically."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise AttributionError("PGM images must be 2-D")
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise AttributionError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return pixels / maxval


def map_record(amap: AttributionMap, ce: float | None = None) -> dict:
    """Structured-text export of a map (JSON-compatible)."""
    rec = {
        "method": amap.method,
        "target": amap.target,
        "output": amap.output,
        "policy": amap.policy.to_dict(),
        "output_value": amap.output_value,
        "per_token": amap.per_token.tolist(),
        "bias_total": amap.bias_total,
    }
    if ce is not None:
        rec["ce"] = ce
    return rec
