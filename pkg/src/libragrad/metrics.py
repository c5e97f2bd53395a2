"""Completeness Error and occlusion-based faithfulness metrics.

Occlusion works on whole tokens. By default masked tokens are removed from
the input altogether (true token masking) while kept tokens keep their
original positional embeddings; zero-filling is available for models that
need a fixed token count.

An occlusion curve has one point per number of removed tokens
``s = 0..n``, and its AUC is the mean over those ``n + 1`` points.
Performance is in percent: accuracy (0 or 100 per input) or the softmax
probability of the target class times 100 (AOPC).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attribution import AttributionMap, attribute
from .policy import GradPolicy
from .rng import Rng

__all__ = [
    "MetricError",
    "Variant",
    "CompletenessError",
    "completeness_error",
    "MaskedTokens",
    "true_token_mask",
    "zero_fill_mask",
    "evaluate_masked",
    "OcclusionCurve",
    "occlusion_curve",
    "InputFaithfulness",
    "FaithfulnessReport",
    "faithfulness",
    "mif_ordering",
    "LinearScorer",
    "synthetic_task",
]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    measure: str = "accuracy"
    labels: str = "predicted"

    def __post_init__(self):
        if self.measure not in ("accuracy", "aopc"):
            raise MetricError(f"unknown measure {self.measure!r}")
        if self.labels not in ("predicted", "ground-truth"):
            raise MetricError(f"unknown label source {self.labels!r}")

    @classmethod
    def parse(cls, v) -> "Variant":
        if isinstance(v, Variant):
            return v
        measure, _, labels = str(v).partition("/")
        return cls(measure, labels or "predicted")

    def __str__(self) -> str:
        return f"{self.measure}/{self.labels}"


# completeness


class CompletenessError(NamedTuple):
    absolute: float
    relative: float


def completeness_error(model, x, amap: AttributionMap, target: int | None = None) -> CompletenessError:
    """``|f(x) - (sum of feature scores + bias_total)|``, absolute and relative to ``|f(x)|``."""
    if target is not None and int(target) != amap.target:
        raise MetricError(f"map was computed for target {amap.target}, not {target}")
    run = model.run(np.asarray(x, dtype=np.float64), output=amap.output)
    f = float(run.output.value[amap.target])
    err = abs(f - amap.total)
    if f != 0:
        rel = err / abs(f)
    else:
        rel = 0.0 if err == 0 else float("inf")
    return CompletenessError(err, rel)


# masking


@dataclass
class MaskedTokens:
    values: np.ndarray
    positions: np.ndarray


def _check_keep(keep, n: int) -> np.ndarray:
    keep = np.array(sorted({int(k) for k in keep}), dtype=np.int64)
    if keep.size and (keep[0] < 0 or keep[-1] >= n):
        raise MetricError(f"keep set must index tokens 0..{n - 1}")
    return keep


def true_token_mask(x, keep, model=None) -> MaskedTokens:
    """Drop every token not in ``keep``; survivors carry their original positions.

    ``keep`` has set semantics: order and duplicates are irrelevant.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = _check_keep(keep, x.shape[0])
    if keep.size == 0 and model is not None and getattr(model, "min_tokens", 0) >= 1:
        raise MetricError("model needs at least one token; keep set is empty")
    return MaskedTokens(x[keep], keep)


def zero_fill_mask(x, keep) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    keep = _check_keep(keep, x.shape[0])
    out = np.zeros_like(x)
    out[keep] = x[keep]
    return out


def evaluate_masked(model, x, keep, mask_mode: str = "exclude") -> np.ndarray:
    """Logits of ``model`` with only the tokens in ``keep`` visible."""
    if mask_mode == "exclude":
        if not getattr(model, "supports_token_exclusion", True):
            raise MetricError("model cannot exclude tokens; use mask_mode='zero'")
        m = true_token_mask(x, keep, model)
        return model.logits(m.values, positions=m.positions)
    if mask_mode == "zero":
        return model.logits(zero_fill_mask(x, keep))
    raise MetricError(f"unknown mask mode {mask_mode!r}")


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _perf(logits: np.ndarray, label: int, measure: str) -> float:
    if measure == "accuracy":
        return 100.0 if int(np.argmax(logits)) == label else 0.0
    return 100.0 * float(_softmax(logits)[label])


# curves


@dataclass
class OcclusionCurve:
    fractions: np.ndarray
    perf: np.ndarray
    ordering: np.ndarray
    auc: float


def _check_permutation(ordering, n: int) -> np.ndarray:
    ordering = np.asarray(ordering, dtype=np.int64)
    if ordering.shape != (n,) or not np.array_equal(np.sort(ordering), np.arange(n)):
        raise MetricError(f"ordering must be a permutation of 0..{n - 1}")
    return ordering


def _label_for(model, x, variant: Variant, label):
    if variant.labels == "predicted":
        return int(np.argmax(model.logits(np.asarray(x, dtype=np.float64))))
    if label is None:
        raise MetricError("ground-truth variant needs a label")
    return int(label)


def occlusion_curve(model, x, ordering, variant="accuracy/predicted", label=None,
                    mask_mode: str = "exclude") -> OcclusionCurve:
    """Performance as tokens are removed in ``ordering``, one point per removal count.

    Point ``s`` has the first ``s`` tokens of ``ordering`` removed, so point
    0 is the unmasked input and point ``n`` has nothing left.
    """
    variant = Variant.parse(variant)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    ordering = _check_permutation(ordering, n)
    label = _label_for(model, x, variant, label)
    perf = np.empty(n + 1)
    for s in range(n + 1):
        perf[s] = _perf(evaluate_masked(model, x, ordering[s:], mask_mode), label, variant.measure)
    return OcclusionCurve(np.arange(n + 1), perf, ordering, float(perf.mean()))


def mif_ordering(scores) -> np.ndarray:
    """Tokens by decreasing score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class InputFaithfulness:
    index: int
    mif: float
    lif: float
    ce: float | None
    label: int

    @property
    def mif_norm(self) -> float:
        return 100.0 - self.mif

    @property
    def srg(self) -> float:
        return (self.lif + self.mif_norm) / 2.0


@dataclass
class FaithfulnessReport:
    mif: float
    mif_norm: float
    lif: float
    srg: float
    variant: Variant
    method: str
    policy: GradPolicy | None
    rows: list[InputFaithfulness] = field(default_factory=list)


def faithfulness(model, inputs: Sequence, method, policy: GradPolicy | None = None,
                 variant="accuracy/predicted", labels: Sequence[int] | None = None,
                 mask_mode: str = "exclude", ig_steps: int = 50) -> FaithfulnessReport:
    """MIF, LIF and SRG averaged over ``inputs``.

    ``method`` is an attribution method name or a callable
    ``(model, x) -> per-token scores``. Named methods attribute the target
    logit for the accuracy measure and the target probability for AOPC.
    The LIF ordering is the exact reverse of the MIF ordering.
    """
    variant = Variant.parse(variant)
    inputs = list(inputs)
    if not inputs:
        raise MetricError("faithfulness needs at least one input")
    if labels is not None and len(labels) != len(inputs):
        raise MetricError("labels must match inputs")
    if variant.labels == "ground-truth" and labels is None:
        raise MetricError("ground-truth variant needs labels")
    policy = policy or GradPolicy.standard()
    output = "prob" if variant.measure == "aopc" else "logit"
    rows = []
    for i, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        label = _label_for(model, x, variant, None if labels is None else labels[i])
        ce = None
        if callable(method):
            scores = np.asarray(method(model, x), dtype=np.float64)
            name = getattr(method, "__name__", "custom")
        else:
            amap = attribute(method, model, x, target=label, policy=policy, output=output,
                             ig_steps=ig_steps)
            scores = amap.per_token
            ce = completeness_error(model, x, amap).absolute
            name = method
        order = mif_ordering(scores)
        mif = occlusion_curve(model, x, order, variant, label, mask_mode).auc
        lif = occlusion_curve(model, x, order[::-1], variant, label, mask_mode).auc
        rows.append(InputFaithfulness(i, mif, lif, ce, label))
    mif = float(np.mean([r.mif for r in rows]))
    lif = float(np.mean([r.lif for r in rows]))
    mif_norm = 100.0 - mif
    return FaithfulnessReport(mif, mif_norm, lif, (lif + mif_norm) / 2.0, variant, name,
                              None if callable(method) else policy, rows)


# desk-scale models and data


class LinearScorer:
    """Two-logit scorer: ``[sum_i w_i x_i over visible tokens, 0]``.

    ``x`` holds one scalar feature per token. The exact attribution of
    logit 0 is ``w * x``; used as the reference model for faithfulness
    harness checks, where logit 0 should be the predicted class.
    """

    supports_token_exclusion = True
    min_tokens = 0

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[0]

    def logits(self, x, positions=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if positions is None:
            positions = np.arange(self.n_tokens)
        positions = np.asarray(positions, dtype=np.int64)
        if x.shape[0] != positions.shape[0]:
            raise MetricError("one position per token required")
        if x.shape[0] == 0:
            return np.zeros(2)
        return np.array([float(np.sum(self.weights[positions] * x)), 0.0])

    def exact_attribution(self, _model, x) -> np.ndarray:
        """Scores in the ``(model, x)`` form ``faithfulness`` accepts."""
        return self.weights * np.asarray(x, dtype=np.float64).reshape(-1)


def synthetic_task(n: int, tokens: int, dim: int, classes: int, seed: int = 0,
                   signal: float = 2.0, hot_tokens: int | None = None):
    """Token grids labelled by which class pattern is planted in them.

    Each class owns a random direction; an input of class ``c`` is unit
    Gaussian noise with ``signal * pattern_c`` added to ``hot_tokens``
    randomly chosen tokens. Classes are linearly separable on the token
    mean. Returns ``(inputs, labels, patterns)``.
    """
    pat_rng = Rng(seed, stream=7001)
    patterns = pat_rng.normal((classes, dim))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    hot = hot_tokens if hot_tokens is not None else max(1, tokens // 4)
    inputs, labels = [], []
    for i in range(n):
        rng = Rng(seed, stream=8000 + i)
        c = int(rng.next_u64() % classes)
        x = rng.normal((tokens, dim))
        where = rng.permutation(tokens)[:hot]
        x[where] += signal * patterns[c]
        inputs.append(x)
        labels.append(c)
    return inputs, labels, patterns
