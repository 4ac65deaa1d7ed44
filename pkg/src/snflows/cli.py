"""Command-line front end: property suites, target fits, toy-VAE runs, parameter counts.

Exit codes: 0 ok, 1 property failure, 2 config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import jsonschema
import torch

from . import checks
from .amortize import AmortizationConfig, FlowFamily, Hypernetwork, count_parameters
from .errors import DimensionError, DivergenceError
from .serialize import stack_to_json
from .training import (
    TRACE_FIELDS,
    TrainingConfig,
    VAEConfig,
    fit_target,
    train_toy_vae,
    vae_checkpoint,
)
from .vi import correlated_gaussian, standard_gaussian_target

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
NLL_SCHEMA = "snf-nll/1"

_COUNT = {"type": "integer", "minimum": 1}
_DIMS = {"oneOf": [{"type": "integer", "minimum": 1},
                   {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}]}
_FLOWS = {"oneOf": [{"type": "integer", "minimum": 0},
                    {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "variant": {"enum": [f.value for f in FlowFamily]},
        "D": _DIMS, "K": _FLOWS, "E": _COUNT, "M": _COUNT, "H": _COUNT, "C": _COUNT,
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "anneal_epochs": _COUNT, "epochs": _COUNT, "batch_size": _COUNT,
        "steps_per_epoch": _COUNT, "eval_samples": _COUNT, "importance_samples": _COUNT,
        "hidden": _COUNT, "train_size": _COUNT, "val_size": _COUNT, "val_samples": _COUNT,
        "target": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["correlated_gaussian", "standard_gaussian"]},
                "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
            },
        },
    },
}


class ConfigError(Exception):
    pass


def load_config(path: str) -> dict:
    """Parse and schema-validate an experiment config; raise :class:`ConfigError` on any problem."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: invalid config at {where}: {exc.message}") from exc
    return doc


def _scalar(cfg: dict, key: str, default=None):
    value = cfg.get(key, default)
    if isinstance(value, list):
        raise ConfigError(f"{key} must be a single integer for this command")
    return value


def flow_config(cfg: dict, feature_dim: int, latent_dim: int) -> AmortizationConfig:
    try:
        variant = FlowFamily(cfg.get("variant", "tsnf"))
        # M, H and C only shape the family they belong to
        return AmortizationConfig(
            feature_dim=feature_dim, latent_dim=latent_dim, num_flows=_scalar(cfg, "K", 0),
            variant=variant,
            bottleneck=cfg.get("M") if variant is FlowFamily.OSNF else None,
            reflections=cfg.get("H", 1) if variant is FlowFamily.HSNF else 1,
            made_width=cfg.get("C") if variant is FlowFamily.IAF else None)
    except (DimensionError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def training_config(cfg: dict, seed: int) -> TrainingConfig:
    keys = ("epochs", "learning_rate", "anneal_epochs", "batch_size", "steps_per_epoch",
            "eval_samples", "importance_samples")
    return TrainingConfig(seed=seed, **{k: cfg[k] for k in keys if k in cfg})


def prepare_out(out: str | None, force: bool) -> Path:
    if out is None:
        raise ConfigError("--out DIR is required")
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_trace(path: Path, trace: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        writer.writerows(trace)


# ---------------------------------------------------------------- commands


def cmd_check(args) -> int:
    report = checks.run_suite(args.suite, seed=args.seed if args.seed is not None else 0,
                              dims=args.dims)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = prepare_out(args.out, args.force)
        (out / "report.json").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


def cmd_fit_target(args) -> int:
    cfg = load_config(args.config)
    d = _scalar(cfg, "D", 2)
    if cfg.get("E", 1) != 1:
        raise ConfigError("fit-target uses a constant feature vector; E must be 1")
    target_cfg = cfg.get("target", {"kind": "correlated_gaussian"})
    if target_cfg["kind"] == "correlated_gaussian":
        target = correlated_gaussian(target_cfg.get("rho", 0.9), d)
    else:
        target = standard_gaussian_target(d)
    flows = flow_config(cfg, 1, d)
    train = training_config(cfg, _seed(args, cfg))
    out = prepare_out(args.out, args.force)
    result = fit_target(train, target, flows)
    write_trace(out / "trace.csv", result.trace)
    with torch.no_grad():
        base, stack = result.hypernet.amortize(torch.ones(1, dtype=torch.float64))
    write_json(out / "params.json", stack_to_json(stack, flows.variant.value, base))
    print(f"final F = {result.final_F:.6f} +/- {result.final_se:.6f}")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = load_config(args.config)
    d, e = _scalar(cfg, "D", 4), cfg.get("E", 32)
    vae_keys = ("hidden", "train_size", "val_size", "val_samples")
    vae = VAEConfig(latent_dim=d, feature_dim=e, **{k: cfg[k] for k in vae_keys if k in cfg})
    flows = flow_config(cfg, e, d)
    seed = _seed(args, cfg)
    train = training_config(cfg, seed)
    out = prepare_out(args.out, args.force)
    s = args.importance_samples or train.importance_samples
    result = train_toy_vae(train, vae, flows, nll_samples=s)
    write_trace(out / "trace.csv", result.trace)
    write_json(out / "checkpoint.json", vae_checkpoint(result.model, seed))
    write_json(out / "nll.json", {"schema": NLL_SCHEMA, "S": s, "estimate": result.nll,
                                  "standard_error": result.nll_se,
                                  "neg_elbo": result.final_neg_elbo,
                                  "neg_elbo_standard_error": result.neg_elbo_se})
    print(f"validation -ELBO = {result.final_neg_elbo:.6f} +/- {result.neg_elbo_se:.6f}")
    print(f"NLL (S={s}) = {result.nll:.6f} +/- {result.nll_se:.6f}")
    return EXIT_OK


def count_rows(cfg: dict) -> list[dict]:
    """Formula and enumerated flow-parameter counts for every requested configuration."""
    def as_list(v):
        return v if isinstance(v, list) else [v]

    if "D" not in cfg or "K" not in cfg:
        raise ConfigError("params needs D and K")
    variants = [cfg["variant"]] if "variant" in cfg else [f.value for f in FlowFamily]
    rows = []
    for variant in variants:
        for d in as_list(cfg["D"]):
            for k in as_list(cfg["K"]):
                single = dict(cfg, D=d, K=k, variant=variant)
                fc = flow_config(single, cfg.get("E", 256), d)
                hyper = Hypernetwork(fc, torch.Generator().manual_seed(cfg["seed"]))
                rows.append({"variant": variant, "D": d, "K": k, "E": fc.feature_dim,
                             "formula": count_parameters(fc),
                             "enumerated": hyper.enumerate_flow_parameters()})
    return rows


def cmd_params(args) -> int:
    rows = count_rows(load_config(args.config))
    print(f"{'variant':<8} {'D':>4} {'K':>4} {'E':>5} {'formula':>12} {'enumerated':>12}")
    for r in rows:
        flag = "" if r["formula"] == r["enumerated"] else "  MISMATCH"
        print(f"{r['variant']:<8} {r['D']:>4} {r['K']:>4} {r['E']:>5} "
              f"{r['formula']:>12,} {r['enumerated']:>12,}{flag}")
    return EXIT_OK if all(r["formula"] == r["enumerated"] for r in rows) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snflows", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config: bool):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed (overrides the config seed)")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    p = sub.add_parser("check", help="run a property suite and emit a JSON report")
    common(p, config=False)
    p.add_argument("--suite", default="all", choices=checks.SUITES + ("all",))
    p.add_argument("--dims", type=int, default=8, help="largest dimension in the instance grid")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("fit-target", help="fit a flow posterior to a target density")
    common(p, config=True)
    p.set_defaults(func=cmd_fit_target)

    p = sub.add_parser("train-vae", help="train the toy VAE and estimate its NLL")
    common(p, config=True)
    p.add_argument("--importance-samples", type=int, help="importance samples for the NLL")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("params", help="compare closed-form and enumerated parameter counts")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "dims", 1) < 1 or (getattr(args, "importance_samples", None) or 1) < 1:
        print("error: --dims and --importance-samples must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc} (after {len(exc.trace)} epochs)", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
