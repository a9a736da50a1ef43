"""Command-line experiment runner: ``specter train|evaluate|inspect|sample-network``.

Exit status is 0 on success, 1 on a runtime error and 2 on an invalid
config (or a policy file that does not fit the config's spaces).
"""

from __future__ import annotations

import argparse
import decimal
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import config as config_mod
from .errors import ConfigError, DimensionMismatch, SpecterError
from .examples import build, get
from .io import atomic_write_bytes, atomic_write_text, csv_text
from .learn import (
    dump_policy,
    evaluate,
    init_policies,
    load_policy,
    make_mapping,
    train,
    trainable_scalars,
)
from .net import sample_network
from .rng import make_rng

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
METRIC_COLUMNS = ["iteration", "policy_id", "mean_return", "episodes", "agents"]
EVAL_COLUMNS = ["setting", "scope", "entity", "metric", "value"]


# --------------------------------------------------------------------------
# Argument helpers
# --------------------------------------------------------------------------


def parse_sets(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value", field=key or item)
        out[key.strip()] = config_mod.parse_value(value.strip())
    return out


def parse_sweep(text: str) -> tuple[str, list[float | int]]:
    """``key=a:b:step`` to the inclusive grid ``a, a+step, ..., <= b``."""
    key, sep, rng = text.partition("=")
    parts = rng.split(":")
    if not sep or not key or len(parts) != 3:
        raise ConfigError(f"sweep {text!r} is not key=a:b:step", field="--sweep")
    try:
        a, b, step = (decimal.Decimal(p) for p in parts)
    except decimal.InvalidOperation:
        raise ConfigError(f"sweep bounds in {text!r} must be numbers", field="--sweep") from None
    if step <= 0 or b < a:
        raise ConfigError("sweep needs step > 0 and a <= b", field="--sweep")
    integral = all(x == x.to_integral_value() for x in (a, b, step))
    values: list[float | int] = []
    v = a
    while v <= b:
        values.append(int(v) if integral else float(v))
        v += step
    return key.strip(), values


def load(args, extra: dict[str, Any] | None = None):
    overrides = parse_sets(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    overrides.update(extra or {})
    cfg = config_mod.load_config(args.config, overrides)
    return cfg, build(cfg)


def output_dir(args, cfg) -> Path:
    return Path(args.out if getattr(args, "out", None) else cfg.output_dir)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg, definition = load(args)
    env = get(cfg.environment)
    mapping = make_mapping(definition, cfg.sharing, cfg.family_policy)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    every = max(1, cfg.train.iterations // 10)

    def progress(it, rows):
        if not args.quiet and (it % every == 0 or it == cfg.train.iterations - 1):
            summary = " ".join(f"{r['policy_id']}={r['mean_return']:.3f}" for r in rows)
            print(f"iteration {it}: {summary}", file=sys.stderr)

    result = train(definition, mapping, cfg.train, getattr(env, "agent_metrics", None), workers, progress=progress)
    out = output_dir(args, cfg)
    extra = sorted({k for row in result.log for k in row} - set(METRIC_COLUMNS))
    atomic_write_text(out / "metrics.csv", csv_text(METRIC_COLUMNS + extra, result.log))
    for pid, pol in sorted(result.policies.items()):
        atomic_write_bytes(out / "policies" / f"{pid}.bin", dump_policy(pol))
    atomic_write_text(out / "config.resolved", cfg.resolved_text())
    print(f"trained {len(result.policies)} policies for {cfg.train.iterations} iterations -> {out}")
    return EXIT_OK


def load_policies(directory: Path, definition, mapping) -> dict:
    expected = init_policies(definition, mapping)
    policies = {}
    for pid, ref in expected.items():
        path = directory / f"{pid}.bin"
        if not path.exists():
            raise SpecterError(f"policy file {str(path)!r} not found")
        pol = load_policy(path)
        if pol.weights.shape != ref.weights.shape:
            raise DimensionMismatch(
                f"policy {pid!r} has shape {pol.weights.shape} but the config needs {ref.weights.shape}"
            )
        policies[pid] = pol
    return policies


def cmd_evaluate(args) -> int:
    if args.episodes < 0:
        raise ConfigError("--episodes must be >= 0", field="--episodes")
    settings: list[tuple[str, dict[str, Any]]] = [("", {})]
    if args.sweep:
        key, values = parse_sweep(args.sweep)
        settings = [(f"{key}={v}", {key: v}) for v in values]
    rows: list[dict] = []
    trace_lines: list[str] = []
    episode_offset = 0
    cfg = None
    for label, extra in settings:
        cfg, definition = load(args, extra)
        env = get(cfg.environment)
        mapping = make_mapping(definition, cfg.sharing, cfg.family_policy)
        policies = load_policies(Path(args.policies), definition, mapping)
        records, traces = evaluate(
            definition, policies, mapping, args.episodes, cfg.seed,
            getattr(env, "summarize", None), keep_traces=args.trace, greedy=not args.sample,
        )
        rows.extend({"setting": label, **r} for r in records)
        for i, tr in enumerate(traces):
            trace_lines.extend(tr.to_jsonl(episode_offset + i))
        episode_offset += len(traces)
    out = output_dir(args, cfg)
    atomic_write_text(out / "eval.csv", csv_text(EVAL_COLUMNS, rows))
    if args.trace:
        atomic_write_text(out / "trace.jsonl", "".join(line + "\n" for line in trace_lines))
    print(f"evaluated {args.episodes} episodes x {len(settings)} settings -> {out}")
    return EXIT_OK


def describe(cfg, definition) -> list[str]:
    shared = make_mapping(definition, True, cfg.family_policy)
    mapping = make_mapping(definition, cfg.sharing, cfg.family_policy)
    net = sample_network(definition.network_spec, make_rng(cfg.seed, 0))
    degree = {a: 0 for a in definition.agents}
    for a, b in net.sorted_edges():
        degree[a] += 1
        degree[b] += 1
    families: dict[str, int] = {}
    for spec in definition.agents.values():
        families[spec.family] = families.get(spec.family, 0) + 1
    lines = [
        f"environment: {cfg.environment}",
        f"agents: {len(definition.agents)}",
        f"learning agents: {len(definition.learning_agents)}",
        "families: " + ", ".join(f"{f}={n}" for f, n in sorted(families.items())),
        f"sharing: {'on' if cfg.sharing else 'off'}",
        f"policies: {len(mapping.policy_ids)}",
        f"policies under sharing: {len(shared.policy_ids)}",
        f"trainable scalars: {trainable_scalars(init_policies(definition, mapping))}",
        f"specification parameters: {cfg.spec_param_count}",
        f"stage graph: {definition.stage_graph()}",
        f"horizon: {definition.horizon}",
        f"network: {len(definition.network_spec.edge_probabilities)} candidate edges, "
        f"{len(net.sorted_edges())} in sample",
    ]
    for a in sorted(degree):
        lines.append(f"  {a}: degree {degree[a]}")
    return lines


def cmd_inspect(args) -> int:
    cfg, definition = load(args)
    print("\n".join(describe(cfg, definition)))
    return EXIT_OK


def cmd_sample_network(args) -> int:
    if args.samples < 1:
        raise ConfigError("--samples must be >= 1", field="--samples")
    cfg, definition = load(args)
    spec = definition.network_spec
    pairs = list(spec.edge_probabilities)
    counts = np.zeros(len(pairs))
    rng = make_rng(cfg.seed, 1)
    for _ in range(args.samples):
        net = sample_network(spec, rng)
        counts += [net.has_edge(a, b) for a, b in pairs]
    print("a,b,p,frequency")
    for (a, b), c in zip(pairs, counts):
        print(f"{a},{b},{spec.edge_probabilities[(a, b)]:g},{c / args.samples:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("config", help="config file, or the name of a shipped environment")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p = sub.add_parser("train", help="train policies and write metrics, policies and the resolved config")
    common(p)
    p.add_argument("--workers", type=int, help="concurrent rollout processes (default: CPU count)")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--quiet", action="store_true", help="no progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="roll out trained policies without updates")
    common(p)
    p.add_argument("--policies", required=True, help="directory holding <policy_id>.bin files")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--trace", action="store_true", help="also write trace.jsonl")
    p.add_argument("--sweep", metavar="KEY=A:B:STEP", help="evaluate once per value of KEY")
    p.add_argument("--sample", action="store_true", help="sample actions instead of acting greedily")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarize a config without training")
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sample-network", help="print empirical edge frequencies")
    common(p)
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_sample_network)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpecterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
