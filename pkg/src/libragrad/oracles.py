"""Independent reference computations used to check the engine.

Nothing here reuses the engine's backward rules: derivatives come from
central finite differences over plain numpy forward functions, and
closed forms are written out directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf as _erf

from . import _kernels
from . import engine as E
from . import layers
from .policy import GradPolicy
from .rng import Rng

__all__ = [
    "OracleError",
    "relative_error",
    "fd_gradient",
    "FgResidualReport",
    "fg_residual",
    "fg_sum_by_scaling",
    "ln_closed_form",
    "ln_ig_closed_form",
    "layernorm_ref",
    "softmax_ref",
    "sigmoid_ref",
    "gelu_ref",
    "silu_ref",
    "silu_fg_sum",
    "keys_cubic",
    "bicubic_reference",
    "BruteForceResult",
    "brute_force_orderings",
    "gradcheck_primitives",
    "gradcheck_libra",
    "PRIMITIVE_CASES",
    "LIBRA_CASES",
]


class OracleError(ValueError):
    pass


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale


def fd_gradient(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(fn(x + h e_i) - fn(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise OracleError("step h must be > 0")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


# FullGrad residuals


@dataclass
class FgResidualReport:
    f_value: float
    grad_sum: float
    bias_sum: float
    residual: float
    relative: float


def _report(f, grad_sum, bias_sum) -> FgResidualReport:
    residual = abs(f - grad_sum - bias_sum)
    rel = residual / abs(f) if f != 0 else (0.0 if residual == 0 else float("inf"))
    return FgResidualReport(f, grad_sum, bias_sum, residual, rel)


def fg_residual(model, x, policy: GradPolicy | None = None, target: int | None = None,
                ) -> FgResidualReport:
    """Compare ``J_x f . x + sum_i J_{b_i} f . b_i`` against ``f(x)``.

    ``model`` is a ModelHandle (the target logit, default argmax, is
    checked) or a callable ``build(tape, x_tensor, policy) -> Tensor``
    returning a scalar.
    """
    policy = policy or GradPolicy.standard()
    x = np.asarray(x, dtype=np.float64)
    if hasattr(model, "run"):
        run = model.run(x, policy)
        if target is None:
            target = int(np.argmax(run.logits.value))
        grads = run.tape.backward(run.logits, target)
        f = float(run.logits.value[target])
        xin = run.input
    else:
        tape = E.Tape()
        xin = tape.input(x, "x")
        out = model(tape, xin, policy)
        grads = tape.backward(out, target)
        f = float(out.value.reshape(-1)[0 if target is None else target])
    return _report(f, float(np.sum(grads[xin] * x)), grads.bias_total)


def fg_sum_by_scaling(model, x, target: int, h: float = 1e-5) -> float:
    """FullGrad sum of the standard gradient from the scaling derivative.

    ``J_x f . x + sum J_b f . b`` equals ``d/dt f(t x; t b)`` at ``t = 1``
    with every bias scaled along with the input; estimated here by a
    central difference without touching the backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    bias_names = list(model.bias_layers)

    def f_at(t):
        scaled = model.with_params(**{n.replace(".", "__"): t * model.params[n] for n in bias_names})
        return float(scaled.logits(t * x)[target])

    return (f_at(1 + h) - f_at(1 - h)) / (2 * h)


# closed forms and numpy references


def ln_closed_form(x, eps: float) -> np.ndarray:
    """``J_x LN(x) . x = y * eps / s^3`` with ``y = x - mean``, ``s = sqrt(var + eps)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise OracleError("normalization axis needs length >= 2")
    if not eps > 0:
        raise OracleError("eps must be > 0")
    y = x - x.mean(axis=-1, keepdims=True)
    s = np.sqrt((y * y).mean(axis=-1, keepdims=True) + eps)
    return y * eps / s ** 3


def ln_ig_closed_form(x, eps: float, steps: int = 50) -> np.ndarray:
    """Right-endpoint ``steps``-point IG sum of each LN output (zero baseline).

    Along the path ``LN(a x)_k = a y_k / sqrt(a^2 var + eps)``, whose
    derivative is ``y_k eps / (a^2 var + eps)^{3/2}``; the Riemann sum
    averages it at ``a = 1/n, ..., 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not eps > 0:
        raise OracleError("eps must be > 0")
    y = x - x.mean(axis=-1, keepdims=True)
    var = (y * y).mean(axis=-1, keepdims=True)
    a = np.arange(1, steps + 1) / steps
    w = sum(eps / (ak * ak * var + eps) ** 1.5 for ak in a) / steps
    return y * w


def layernorm_ref(x, eps):
    y = x - x.mean(axis=-1, keepdims=True)
    return y / np.sqrt((y * y).mean(axis=-1, keepdims=True) + eps)


def softmax_ref(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid_ref(x):
    return 1.0 / (1.0 + np.exp(-x))


def gelu_ref(x):
    return x * 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))


def silu_ref(x):
    return x * sigmoid_ref(x)


def silu_fg_sum(x):
    """``J SiLU(x) . x = SiLU(x) (1 + x - SiLU(x))``."""
    s = silu_ref(x)
    return s * (1.0 + x - s)


def attention_ref(Q, K, V):
    return softmax_ref(Q @ np.swapaxes(K, -1, -2) / math.sqrt(Q.shape[-1])) @ V


# rendering


def keys_cubic(t: float, a: float = -0.75) -> float:
    """Keys cubic convolution kernel."""
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_reference(img, factor: int) -> np.ndarray:
    """Pixel-by-pixel bicubic upsampling, half-pixel centers, clamped borders."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    out = np.zeros((H * factor, W * factor))
    for oy in range(H * factor):
        sy = (oy + 0.5) / factor - 0.5
        iy = math.floor(sy)
        for ox in range(W * factor):
            sx = (ox + 0.5) / factor - 0.5
            ix = math.floor(sx)
            acc = 0.0
            for dy in range(-1, 3):
                wy = keys_cubic(sy - (iy + dy))
                yy = min(max(iy + dy, 0), H - 1)
                for dx in range(-1, 3):
                    xx = min(max(ix + dx, 0), W - 1)
                    acc += wy * keys_cubic(sx - (ix + dx)) * img[yy, xx]
            out[oy, ox] = acc
    return out


# brute-force ordering search


@dataclass
class BruteForceResult:
    min_auc: float
    max_auc: float
    argmin: tuple[int, ...]
    argmax: tuple[int, ...]
    aucs: np.ndarray


def _nth_permutation(k: int, n: int) -> tuple[int, ...]:
    items, out = list(range(n)), []
    for i in range(n, 0, -1):
        f = math.factorial(i - 1)
        j, k = divmod(k, f)
        out.append(items.pop(j))
    return tuple(out)


def brute_force_orderings(model, x, n: int | None = None, variant="accuracy/predicted",
                          label: int | None = None, mask_mode: str = "exclude") -> BruteForceResult:
    """Exact occlusion AUC of every removal ordering of ``n <= 8`` tokens.

    The model is evaluated once per kept subset; the ``n!`` orderings are
    then scored from that table. Orderings are ranked lexicographically,
    so ties resolve to the smallest permutation.
    """
    from .metrics import Variant, _label_for, _perf, evaluate_masked

    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n is None else int(n)
    if n != x.shape[0]:
        raise OracleError(f"input has {x.shape[0]} tokens, not {n}")
    if n > 8:
        raise OracleError("brute force limited to n <= 8 tokens")
    variant = Variant.parse(variant)
    label = _label_for(model, x, variant, label)
    table = np.empty(1 << n)
    for mask in range(1 << n):
        keep = [i for i in range(n) if mask >> i & 1]
        table[mask] = _perf(evaluate_masked(model, x, keep, mask_mode), label, variant.measure)
    aucs = _kernels.ordering_aucs(table, n)
    lo, hi = int(np.argmin(aucs)), int(np.argmax(aucs))
    return BruteForceResult(float(aucs[lo]), float(aucs[hi]), _nth_permutation(lo, n),
                            _nth_permutation(hi, n), aucs)


# gradient checks


def _away_from_zero(rng: Rng, shape, margin: float = 1e-3):
    v = rng.normal(shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-300) * (margin + np.abs(v)), v)


def _positive(rng: Rng, shape):
    return 0.5 + rng.uniform(shape) * 2.0


@dataclass
class _Case:
    make_inputs: Callable[[Rng], list]
    engine: Callable  # (*tensors) -> Tensor
    ref: Callable  # (*arrays) -> ndarray


PRIMITIVE_CASES: dict[str, _Case] = {
    "matmul": _Case(lambda r: [r.normal((3, 4)), r.normal((4, 2))], E.matmul, np.matmul),
    "matmul-batched": _Case(lambda r: [r.normal((2, 3, 4)), r.normal((2, 4, 3))], E.matmul, np.matmul),
    "add": _Case(lambda r: [r.normal((3, 4)), r.normal((4,))], E.add, np.add),
    "sub": _Case(lambda r: [r.normal((3, 4)), r.normal((3, 1))], E.sub, np.subtract),
    "neg": _Case(lambda r: [r.normal((3, 4))], E.neg, np.negative),
    "mul": _Case(lambda r: [r.normal((3, 4)), r.normal((3, 4))], E.mul, np.multiply),
    "div": _Case(lambda r: [r.normal((3, 4)), _positive(r, (3, 4))], E.div, np.divide),
    "scale": _Case(lambda r: [r.normal((3, 4))], lambda a: E.scale(a, -1.7), lambda a: a * -1.7),
    "exp": _Case(lambda r: [r.normal((3, 4))], E.exp, np.exp),
    "sqrt": _Case(lambda r: [_positive(r, (3, 4))], E.sqrt, np.sqrt),
    "relu": _Case(lambda r: [_away_from_zero(r, (3, 4))], E.relu, lambda a: np.maximum(a, 0.0)),
    "sigmoid": _Case(lambda r: [r.normal((3, 4))], E.sigmoid, sigmoid_ref),
    "erf": _Case(lambda r: [r.normal((3, 4))], E.erf, _erf),
    "softmax": _Case(lambda r: [r.normal((3, 5))], E.softmax, softmax_ref),
    "reduce-sum": _Case(lambda r: [r.normal((3, 4))], lambda a: E.reduce_sum(a, 0),
                        lambda a: a.sum(axis=0)),
    "reduce-mean": _Case(lambda r: [r.normal((3, 4))], lambda a: E.reduce_mean(a, -1, True),
                         lambda a: a.mean(axis=-1, keepdims=True)),
    "reduce-var": _Case(lambda r: [r.normal((3, 4))], lambda a: E.reduce_var(a, -1, True),
                        lambda a: a.var(axis=-1, keepdims=True)),
    "broadcast": _Case(lambda r: [r.normal((4,))], lambda a: E.broadcast_to(a, (3, 4)),
                       lambda a: np.broadcast_to(a, (3, 4))),
    "reshape": _Case(lambda r: [r.normal((3, 4))], lambda a: E.reshape(a, (2, 6)),
                     lambda a: a.reshape(2, 6)),
    "transpose": _Case(lambda r: [r.normal((2, 3, 4))], lambda a: E.transpose(a, (2, 0, 1)),
                       lambda a: a.transpose(2, 0, 1)),
    "gather": _Case(lambda r: [r.normal((5, 3))], lambda a: E.gather(a, [4, 0, 4, 2], 0),
                    lambda a: a[[4, 0, 4, 2]]),
    "concat": _Case(lambda r: [r.normal((2, 3)), r.normal((4, 3))], lambda a, b: E.concat([a, b], 0),
                    lambda a, b: np.concatenate([a, b], 0)),
    "detach": _Case(lambda r: [r.normal((3, 4))], lambda a: E.mul(a, E.detach(E.exp(a))),
                    None),
    "swap": _Case(lambda r: [r.normal((3, 4))], lambda a: E.swap_backward(E.exp(a), E.scale(a, 3.0)),
                  lambda a: 3.0 * a),
    "layernorm": _Case(lambda r: [r.normal((3, 6))], lambda a: layers.layernorm(a, 1e-5),
                       lambda a: layernorm_ref(a, 1e-5)),
    "attention": _Case(lambda r: [r.normal((2, 3, 4)), r.normal((2, 5, 4)), r.normal((2, 5, 3))],
                       layers.attention, attention_ref),
    "gelu": _Case(lambda r: [r.normal((3, 4))], lambda a: layers.gated_activation(a, "gelu"), gelu_ref),
    "silu": _Case(lambda r: [r.normal((3, 4))], lambda a: layers.gated_activation(a, "silu"), silu_ref),
    "self-gate": _Case(lambda r: [r.normal((3, 4)), r.normal((3, 4))], layers.self_gate, np.multiply),
}


def _engine_grads(case_engine, arrays, cot):
    tape = E.Tape()
    ts = [tape.input(a) for a in arrays]
    out = case_engine(*ts)
    grads = tape.backward(out, seed=cot)
    return [grads[t] for t in ts]


def _fd_grads(ref, arrays, cot, h):
    out = []
    for i in range(len(arrays)):
        def loss(v, i=i):
            args = list(arrays)
            args[i] = v
            return float(np.sum(cot * ref(*args)))
        out.append(fd_gradient(loss, arrays[i], h))
    return out


def _frozen_detach_ref(arrays):
    # x * [exp(x)]_cst: the frozen surrogate is x -> x * exp(x0)
    x0 = arrays[0]
    return lambda a: a * np.exp(x0)


def gradcheck_primitives(seed: int = 0, cases: int = 100, h: float = 1e-5) -> dict[str, float]:
    """Max relative error of engine gradients against finite differences, per primitive."""
    worst = {}
    for name, case in PRIMITIVE_CASES.items():
        err = 0.0
        for k in range(cases):
            rng = Rng(seed, stream=k)
            arrays = [np.asarray(a, dtype=np.float64) for a in case.make_inputs(rng)]
            ref = case.ref if case.ref is not None else _frozen_detach_ref(arrays)
            cot = rng.normal(np.shape(ref(*arrays)))
            analytic = _engine_grads(case.engine, arrays, cot)
            numeric = _fd_grads(ref, arrays, cot, h)
            err = max(err, max(relative_error(a, n) for a, n in zip(analytic, numeric)))
        worst[name] = err
    return worst


# Libra surrogates: detached parts frozen at the evaluation point


def _libra_ln_case(rng):
    x0 = rng.normal((3, 6))
    s0 = np.sqrt(x0.var(axis=-1, keepdims=True) + 1e-5)
    return [x0], (lambda a: layers.layernorm(a, 1e-5, "libra")), \
        (lambda a: (a - a.mean(axis=-1, keepdims=True)) / s0)


def _libra_attention_case(rng):
    Q0, K0, V0 = rng.normal((2, 3, 4)), rng.normal((2, 5, 4)), rng.normal((2, 5, 3))
    A0 = softmax_ref(Q0 @ np.swapaxes(K0, -1, -2) / 2.0)
    return [Q0, K0, V0], (lambda q, k, v: layers.attention(q, k, v, "libra")), \
        (lambda q, k, v: A0 @ v)


def _libra_activation_case(kind):
    gate = (lambda z: 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))) if kind == "gelu" else sigmoid_ref

    def make(rng):
        x0 = rng.normal((3, 4))
        g0 = gate(x0)
        return [x0], (lambda a: layers.gated_activation(a, kind, "libra")), (lambda a: a * g0)
    return make


def _libra_selfgate_case(rng):
    a_coef = float(rng.uniform())
    coeffs = (a_coef, 1.0 - a_coef)
    W1, W2 = rng.normal((4, 3)), rng.normal((4, 3))
    x0 = rng.normal((2, 3))
    f1_0, f2_0 = x0 @ W1.T, np.tanh(x0 @ W2.T)

    def engine(x):
        f1 = E.matmul(x, x.tape.constant(W1.T))
        z = E.matmul(x, x.tape.constant(W2.T))
        # tanh(z) = 2 sigmoid(2z) - 1
        f2 = E.sub(E.scale(E.sigmoid(E.scale(z, 2.0)), 2.0), 1.0)
        return layers.self_gate(f1, f2, "libra", coeffs)

    def ref(x):
        return coeffs[0] * (x @ W1.T) * f2_0 + coeffs[1] * f1_0 * np.tanh(x @ W2.T)

    return [x0], engine, ref


LIBRA_CASES = {
    "libra-layernorm": _libra_ln_case,
    "libra-attention": _libra_attention_case,
    "libra-gelu": _libra_activation_case("gelu"),
    "libra-silu": _libra_activation_case("silu"),
    "libra-selfgate": _libra_selfgate_case,
}


def gradcheck_libra(seed: int = 0, cases: int = 100, h: float = 1e-5) -> dict[str, float]:
    """Max relative error of Libra gradients against finite differences of frozen surrogates."""
    worst = {}
    for name, make in LIBRA_CASES.items():
        err = 0.0
        for k in range(cases):
            rng = Rng(seed, stream=10_000 + k)
            arrays, engine, ref = make(rng)
            cot = rng.normal(np.shape(ref(*arrays)))
            analytic = _engine_grads(engine, arrays, cot)
            numeric = _fd_grads(ref, arrays, cot, h)
            err = max(err, max(relative_error(a, n) for a, n in zip(analytic, numeric)))
        worst[name] = err
    return worst
