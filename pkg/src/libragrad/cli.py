"""Command-line front end for attribution runs and completeness checks.

Every subcommand reads one JSON config (unknown keys are rejected), takes
all randomness from its ``seed``, and writes CSVs plus a ``manifest.json``
echoing the resolved config into the output directory. Files are written
atomically; the same config and seed give byte-identical CSVs.

Exit codes: 0 success, 2 config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import layers, oracles
from .attribution import METHODS, AttributionError, attribute, integrated_gradients, ixg, \
    map_record, render_map, write_pgm
from .engine import EngineError
from .metrics import MetricError, Variant, completeness_error, faithfulness, synthetic_task
from .models import FunctionModel, LayerSpec, ModelError, SpecError, build_model, load_model
from .policy import GradPolicy, PolicyError
from .rng import Rng

CONFIG_VERSION = 1
GRADCHECK_TOL = 1e-6

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# fixed CSV layouts
ATTRIBUTE_COLUMNS = ["input", "method", "policy", "target", "output_value", "map_sum", "bias_total",
                     "ce_abs", "ce_rel", "map_file", "image_file"]
VERIFY_CE_COLUMNS = ["method", "policy", "input", "target", "f_value", "ce_abs", "ce_rel"]
VERIFY_CE_SUMMARY_COLUMNS = ["method", "policy", "n", "median_ce_rel", "max_ce_rel", "median_ce_abs"]
ABLATION_COLUMNS = ["libra_layernorm", "libra_attention", "libra_activation", "libra_selfgate",
                    "include_biases", "label", "median_ce_rel", "max_ce_rel", "median_ce_abs",
                    "median_abs_bias_sum", "max_ce_minus_abs_bias_sum", "mif", "lif", "srg"]
LN_SWEEP_COLUMNS = ["eps", "fg_total_norm", "closed_form_norm", "ig_sum", "ln_norm"]
FAITHFULNESS_COLUMNS = ["input", "method", "policy", "variant", "label", "mif", "mif_norm", "lif",
                        "srg", "ce"]
FAITHFULNESS_SUMMARY_COLUMNS = ["method", "policy", "variant", "n", "mif", "mif_norm", "lif", "srg"]
GRADCHECK_COLUMNS = ["group", "name", "max_rel_error", "passed"]


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


def _default_model() -> dict:
    return LayerSpec(tokens=16).to_dict()


@dataclass
class RunConfig:
    """Resolved run configuration.

    ``policies`` entries are ``"standard"``, ``"libra"`` or a mapping of
    :class:`GradPolicy` fields. ``model`` holds :class:`LayerSpec` fields
    and is ignored when ``model_path`` names a saved model.
    """

    version: int = CONFIG_VERSION
    seed: int = 0
    out: str = "libragrad-out"
    model: dict = field(default_factory=_default_model)
    model_path: str | None = None
    zero_biases: bool = False
    policies: list = field(default_factory=lambda: ["standard", "libra"])
    methods: list = field(default_factory=lambda: ["fullgrad"])
    variants: list = field(default_factory=lambda: ["accuracy/predicted"])
    inputs: int = 8
    ig_steps: int = 50
    mask_mode: str = "exclude"
    upscale: int = 4
    eps_grid: list = field(default_factory=lambda: [10.0 ** -k for k in range(1, 9)])
    ablate_faithfulness: bool = True
    gradcheck_cases: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = RunConfig()
    if "model" in doc:
        if not isinstance(doc["model"], dict):
            raise ConfigError("model must be an object of layer-spec fields")
        model = {**base.model, **doc["model"]}
        doc = {**doc, "model": model}
    cfg = RunConfig(**{**base.to_dict(), **doc})
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version!r}")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    for name in ("inputs", "ig_steps", "upscale", "gradcheck_cases"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{name} must be a positive integer")
    for name in ("policies", "methods", "variants", "eps_grid"):
        if not isinstance(getattr(cfg, name), list) or not getattr(cfg, name):
            raise ConfigError(f"{name} must be a non-empty list")
    unknown = [m for m in cfg.methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; known: {sorted(METHODS)}")
    if cfg.mask_mode not in ("exclude", "zero"):
        raise ConfigError("mask_mode must be 'exclude' or 'zero'")
    if any(not isinstance(e, (int, float)) or not e > 0 for e in cfg.eps_grid):
        raise ConfigError("eps_grid entries must be positive numbers")
    try:
        for v in cfg.variants:
            Variant.parse(v)
        LayerSpec.from_dict(cfg.model)
        resolve_policies(cfg.policies)
    except (MetricError, SpecError, PolicyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def resolve_policies(entries) -> list[GradPolicy]:
    out = []
    for e in entries:
        if e == "standard":
            out.append(GradPolicy.standard())
        elif e == "libra":
            out.append(GradPolicy.libra())
        elif isinstance(e, dict):
            known = {f.name for f in fields(GradPolicy)}
            unknown = sorted(set(e) - known)
            if unknown:
                raise PolicyError(f"unknown policy fields: {unknown}")
            e = dict(e)
            if "elemwise_coeffs" in e:
                e["elemwise_coeffs"] = tuple(e["elemwise_coeffs"])
            out.append(GradPolicy(**e))
        else:
            raise PolicyError(f"policy must be 'standard', 'libra' or an object, got {e!r}")
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


class Writer:
    """Collects outputs under one directory; every file goes through temp + rename."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[str] = []

    def _path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(rel)
        return p

    def text(self, rel: str, content: str) -> None:
        p = self._path(rel)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(content)
        os.replace(tmp, p)

    def csv(self, rel: str, columns: Sequence[str], rows: list[dict]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
        self.text(rel, buf.getvalue())

    def json(self, rel: str, doc) -> None:
        self.text(rel, json.dumps(doc, indent=1, sort_keys=True) + "\n")

    def pgm(self, rel: str, img) -> None:
        write_pgm(self._path(rel), img)


def _model(cfg: RunConfig):
    if cfg.model_path:
        model = load_model(cfg.model_path)
    else:
        model = build_model(LayerSpec.from_dict(cfg.model), seed=cfg.seed)
    return model.with_biases_zeroed() if cfg.zero_biases else model


def _inputs(cfg: RunConfig, model):
    s = model.spec
    return synthetic_task(cfg.inputs, s.tokens, s.dim, s.classes, seed=cfg.seed)


def _slug(policy: GradPolicy) -> str:
    return policy.label.replace("/", "-").replace("+", "_")


def _check_finite(name: str, *values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"non-finite {name}")


# subcommands


def cmd_attribute(cfg: RunConfig, w: Writer) -> int:
    model = _model(cfg)
    inputs, _, _ = _inputs(cfg, model)
    n = model.n_tokens
    side = int(np.sqrt(n))
    grid = (side, side) if side * side == n else (1, n)
    rows = []
    for policy in resolve_policies(cfg.policies):
        for method in cfg.methods:
            for i, x in enumerate(inputs):
                amap = attribute(method, model, x, policy=policy, ig_steps=cfg.ig_steps)
                ce = completeness_error(model, x, amap)
                _check_finite("completeness error", ce.absolute)
                stem = f"maps/{method}__{_slug(policy)}__{i:03d}"
                w.json(stem + ".json", map_record(amap, ce=ce.relative))
                w.pgm(stem + ".pgm", render_map(amap, cfg.upscale, grid))
                rows.append(dict(input=i, method=method, policy=policy.label, target=amap.target,
                                 output_value=amap.output_value,
                                 map_sum=float(amap.per_feature.sum()), bias_total=amap.bias_total,
                                 ce_abs=ce.absolute, ce_rel=ce.relative, map_file=stem + ".json",
                                 image_file=stem + ".pgm"))
    w.csv("attribute.csv", ATTRIBUTE_COLUMNS, rows)
    return EXIT_OK


def _ce_rows(model, inputs, method, policy, ig_steps):
    rows = []
    for i, x in enumerate(inputs):
        amap = attribute(method, model, x, policy=policy, ig_steps=ig_steps)
        ce = completeness_error(model, x, amap)
        _check_finite("completeness error", ce.absolute)
        rows.append(dict(method=method, policy=policy.label, input=i, target=amap.target,
                         f_value=amap.output_value, ce_abs=ce.absolute, ce_rel=ce.relative,
                         bias_total=amap.bias_total))
    return rows


def cmd_verify_ce(cfg: RunConfig, w: Writer) -> int:
    model = _model(cfg)
    inputs, _, _ = _inputs(cfg, model)
    rows, summary = [], []
    for method in cfg.methods:
        for policy in resolve_policies(cfg.policies):
            r = _ce_rows(model, inputs, method, policy, cfg.ig_steps)
            rows += r
            rel = np.array([x["ce_rel"] for x in r])
            summary.append(dict(method=method, policy=policy.label, n=len(r),
                                median_ce_rel=float(np.median(rel)), max_ce_rel=float(rel.max()),
                                median_ce_abs=float(np.median([x["ce_abs"] for x in r]))))
    w.csv("verify_ce.csv", VERIFY_CE_COLUMNS, rows)
    w.csv("verify_ce_summary.csv", VERIFY_CE_SUMMARY_COLUMNS, summary)
    for s in summary:
        print(f"{s['method']:>14} {s['policy']:<40} median rel CE {s['median_ce_rel']:.3e}")
    return EXIT_OK


def ln_sweep(eps_grid, dim: int, seed: int, steps: int):
    """FullGrad total and IG sum of one isolated LayerNorm coordinate as ``eps`` shrinks.

    The input is a single row; the attributed output is its largest
    normalized coordinate.
    """
    x = Rng(seed, stream=9001).normal((1, dim)) * 2.0 + 0.5
    rows = []
    for eps in eps_grid:
        ln = FunctionModel(lambda tape, xin, policy, eps=eps: layers.layernorm(xin, eps))
        fg = ixg(ln, x)
        closed = oracles.ln_closed_form(x, eps)
        ig = integrated_gradients(ln, x, steps=steps, target=fg.target)
        rows.append(dict(eps=float(eps), fg_total_norm=abs(fg.total),
                         closed_form_norm=float(np.linalg.norm(closed)), ig_sum=ig.total,
                         ln_norm=float(np.linalg.norm(ln.logits(x)))))
    return rows


def cmd_ablate(cfg: RunConfig, w: Writer) -> int:
    model = _model(cfg)
    inputs, labels, _ = _inputs(cfg, model)
    variant = Variant.parse(cfg.variants[0])
    rows = []
    for base in GradPolicy.combinations():
        for include_biases in (True, False):
            policy = base.with_(include_biases=include_biases)
            r = _ce_rows(model, inputs, "fullgrad", policy, cfg.ig_steps)
            ce_abs = np.array([x["ce_abs"] for x in r])
            ce_rel = np.array([x["ce_rel"] for x in r])
            bias_sums = np.array([abs(_bias_sum(model, x, policy, row["target"]))
                                  for x, row in zip(inputs, r)])
            row = dict(**{k: getattr(policy, k) for k in ABLATION_COLUMNS[:5]}, label=policy.label,
                       median_ce_rel=float(np.median(ce_rel)), max_ce_rel=float(ce_rel.max()),
                       median_ce_abs=float(np.median(ce_abs)),
                       median_abs_bias_sum=float(np.median(bias_sums)),
                       max_ce_minus_abs_bias_sum=float(np.max(np.abs(ce_abs - bias_sums))),
                       mif=None, lif=None, srg=None)
            if cfg.ablate_faithfulness:
                rep = faithfulness(model, inputs, "fullgrad", policy, variant, labels,
                                   cfg.mask_mode, cfg.ig_steps)
                row.update(mif=rep.mif, lif=rep.lif, srg=rep.srg)
            rows.append(row)
    w.csv("ablation.csv", ABLATION_COLUMNS, rows)
    w.csv("ln_sweep.csv", LN_SWEEP_COLUMNS, ln_sweep(cfg.eps_grid, model.spec.dim, cfg.seed, cfg.ig_steps))
    return EXIT_OK


def _bias_sum(model, x, policy, target) -> float:
    """Bias-gradient total of the configured flags with biases counted."""
    run = model.run(x, policy.with_(include_biases=True))
    return run.tape.backward(run.logits, target).bias_total


def cmd_faithfulness(cfg: RunConfig, w: Writer) -> int:
    model = _model(cfg)
    inputs, labels, _ = _inputs(cfg, model)
    rows, summary = [], []
    for method in cfg.methods:
        for policy in resolve_policies(cfg.policies):
            for v in cfg.variants:
                rep = faithfulness(model, inputs, method, policy, v, labels, cfg.mask_mode,
                                   cfg.ig_steps)
                for r in rep.rows:
                    rows.append(dict(input=r.index, method=method, policy=policy.label,
                                     variant=str(rep.variant), label=r.label, mif=r.mif,
                                     mif_norm=r.mif_norm, lif=r.lif, srg=r.srg, ce=r.ce))
                summary.append(dict(method=method, policy=policy.label, variant=str(rep.variant),
                                    n=len(rep.rows), mif=rep.mif, mif_norm=rep.mif_norm,
                                    lif=rep.lif, srg=rep.srg))
    w.csv("faithfulness.csv", FAITHFULNESS_COLUMNS, rows)
    w.csv("faithfulness_summary.csv", FAITHFULNESS_SUMMARY_COLUMNS, summary)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, w: Writer) -> int:
    rows = []
    for group, result in (("primitive", oracles.gradcheck_primitives(cfg.seed, cfg.gradcheck_cases)),
                          ("libra", oracles.gradcheck_libra(cfg.seed, cfg.gradcheck_cases))):
        for name, err in result.items():
            ok = err < GRADCHECK_TOL
            rows.append(dict(group=group, name=name, max_rel_error=err, passed=ok))
            print(f"{'ok  ' if ok else 'FAIL'} {group:<9} {name:<16} {err:.3e}")
    w.csv("gradcheck.csv", GRADCHECK_COLUMNS, rows)
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_NUMERIC


COMMANDS = {
    "attribute": cmd_attribute,
    "verify-ce": cmd_verify_ce,
    "ablate": cmd_ablate,
    "faithfulness": cmd_faithfulness,
    "gradcheck": cmd_gradcheck,
}


HELP = {
    "attribute": "write attribution maps, images and a per-map CSV",
    "verify-ce": "completeness error per input, method and policy",
    "ablate": "CE and faithfulness over the 16 flag settings, plus the LayerNorm eps sweep",
    "faithfulness": "MIF, LIF and SRG per method, policy and variant",
    "gradcheck": "engine backward against finite differences",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="libragrad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (overrides config)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config)
        if args.seed is not None:
            doc = {**doc, "seed": args.seed}
        if args.out is not None:
            doc = {**doc, "out": args.out}
        cfg = parse_config(doc)
        if cfg.model_path:
            _model(cfg)
    except (ConfigError, ModelError, SpecError, OSError, TypeError) as exc:
        print(f"libragrad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    w = Writer(out)
    try:
        code = COMMANDS[args.command](cfg, w)
    except (AttributionError, MetricError, ModelError, PolicyError) as exc:
        print(f"libragrad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EngineError, NumericFailure, FloatingPointError) as exc:
        print(f"libragrad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    w.json("manifest.json", {"command": args.command, "version": __version__,
                             "config": cfg.to_dict(), "outputs": sorted(w.files)})
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
