"""Experiment configuration: TOML files layered over per-environment defaults.

A config names an ``environment`` and may override any part of that
environment's shipped default.  Agent families are declared as::

    [agent_family.travel]
    count = 2
    theme = "Travel"                      # plain scalar: family attribute
    budget = { uniform = [5.0, 15.0] }    # table: type parameter

Type parameters take exactly one of ``constant``, ``uniform = [a, b]`` or
``categorical = { values = [...], weights = [...] }``; an optional
``support = [a, b]`` fixes the normalization range of a constant.
"""

from __future__ import annotations

import copy
import math
import re
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .agents import Categorical, Constant, Distribution, Supertype, Uniform
from .errors import ConfigError, SpecterError
from .learn import TrainConfig

TOP_LEVEL_KEYS = {
    "environment",
    "seed",
    "sharing",
    "output_dir",
    "env",
    "agent_family",
    "network",
    "fsm",
    "train",
}
# Tables a user config replaces wholesale instead of merging key by key.
REPLACE_TABLES = {"agent_family"}


@dataclass
class FamilyConfig:
    name: str
    count: int
    supertype: Supertype
    attrs: dict[str, Any] = field(default_factory=dict)
    policy: str | None = None

    @property
    def spec_param_count(self) -> int:
        return 1 + self.supertype.spec_param_count

    def agent_ids(self) -> list[str]:
        return [f"{self.name}_{i}" for i in range(self.count)]


@dataclass
class ExperimentConfig:
    environment: str
    seed: int
    sharing: bool
    output_dir: str
    env: dict[str, Any]
    families: dict[str, FamilyConfig]
    network_edges: list[tuple[str, str, float]]
    fsm: dict[str, Any]
    train: TrainConfig
    raw: dict[str, Any]

    @property
    def spec_param_count(self) -> int:
        return sum(f.spec_param_count for f in self.families.values())

    @property
    def family_policy(self) -> dict[str, str]:
        return {name: f.policy for name, f in self.families.items() if f.policy}

    def resolved_text(self) -> str:
        return tomli_w.dumps(self.raw)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def parse_toml(text: str, source: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{source}: {exc}", line=int(m.group(1)) if m else None) from None


def default_config(environment: str) -> dict:
    try:
        text = resources.files("specter.configs").joinpath(f"{environment}.toml").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown environment {environment!r}", field="environment") from None
    return parse_toml(text, f"{environment}.toml")


def read_config_tree(path: str | Path) -> dict:
    """Read a config file; a bare registered environment name loads its default."""
    p = Path(path)
    if not p.exists():
        if re.fullmatch(r"[A-Za-z_][\w\-]*", str(path)):
            tree = default_config(str(path))
            tree.setdefault("environment", str(path))
            return tree
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse_toml(p.read_text(), str(p))


def deep_merge(base: dict, over: Mapping, top: bool = True) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and not (top and k in REPLACE_TABLES):
            out[k] = deep_merge(out[k], v, top=False)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_path(tree: dict, dotted: str, value: Any) -> None:
    """Assign ``value`` at a dotted key path.

    ``agent_family.<f>.<param>`` given a plain number replaces the type
    parameter with a constant that keeps the old distribution's support.
    """
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}", field=dotted)
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot descend into non-table {k!r}", field=dotted)
        node = nxt
    last = keys[-1]
    old = node.get(last)
    if (
        len(keys) == 3
        and keys[0] == "agent_family"
        and isinstance(old, dict)
        and isinstance(value, (int, float))
        and not isinstance(value, bool)
    ):
        value = _constant_like(old, float(value))
    node[last] = value


def _constant_like(old: dict, value: float) -> dict:
    out: dict[str, Any] = {"constant": value}
    if "support" in old:
        out["support"] = old["support"]
    elif "uniform" in old and isinstance(old["uniform"], list) and len(old["uniform"]) == 2:
        out["support"] = list(old["uniform"])
    elif "categorical" in old:
        vals = old["categorical"].get("values", [])
        if vals:
            out["support"] = [min(vals), max(vals)]
    return out


def family_override_key(tree: dict, key: str) -> str:
    """Expand ``family.param`` shorthand to ``agent_family.family.param``."""
    head = key.split(".", 1)[0]
    if head not in TOP_LEVEL_KEYS and head in tree.get("agent_family", {}):
        return f"agent_family.{key}"
    return key


def load_tree(path: str | Path, overrides: Mapping[str, Any] | None = None) -> dict:
    user = read_config_tree(path)
    env_name = user.get("environment")
    if not isinstance(env_name, str):
        raise ConfigError("missing environment name", field="environment")
    tree = deep_merge(default_config(env_name), user)
    for key, value in (overrides or {}).items():
        set_path(tree, family_override_key(tree, key), value)
    return tree


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    return build_config(load_tree(path, overrides))


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def _num(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"expected a finite number, got {v!r}", field=where)
    return float(v)


def parse_distribution(spec: Any, where: str) -> Distribution:
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return Constant(_num(spec, where))
    if not isinstance(spec, Mapping):
        raise ConfigError("type parameter must be a number or a distribution table", field=where)
    kinds = [k for k in ("constant", "uniform", "categorical") if k in spec]
    if len(kinds) != 1:
        raise ConfigError("specify exactly one of constant / uniform / categorical", field=where)
    extra = set(spec) - {"constant", "uniform", "categorical", "support"}
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}", field=where)
    kind = kinds[0]
    try:
        if kind == "constant":
            support = None
            if "support" in spec:
                s = spec["support"]
                if not isinstance(s, list) or len(s) != 2:
                    raise ConfigError("support needs exactly two bounds [low, high]", field=f"{where}.support")
                support = (_num(s[0], f"{where}.support"), _num(s[1], f"{where}.support"))
            return Constant(_num(spec["constant"], f"{where}.constant"), support)
        if kind == "uniform":
            b = spec["uniform"]
            if not isinstance(b, list) or len(b) != 2:
                raise ConfigError("uniform needs exactly two bounds [low, high]", field=f"{where}.uniform")
            return Uniform(_num(b[0], f"{where}.uniform"), _num(b[1], f"{where}.uniform"))
        c = spec["categorical"]
        if not isinstance(c, Mapping) or "values" not in c or "weights" not in c:
            raise ConfigError("categorical needs values and weights", field=f"{where}.categorical")
        return Categorical(
            tuple(_num(v, f"{where}.categorical.values") for v in c["values"]),
            tuple(_num(w, f"{where}.categorical.weights") for w in c["weights"]),
        )
    except SpecterError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), field=where) from None


def parse_family(name: str, tree: Any) -> FamilyConfig:
    where = f"agent_family.{name}"
    if not isinstance(tree, Mapping):
        raise ConfigError("family must be a table", field=where)
    if "count" not in tree:
        raise ConfigError("missing agent count", field=f"{where}.count")
    count = tree["count"]
    if isinstance(count, bool) or not isinstance(count, int) or count < 0:
        raise ConfigError("count must be a nonnegative integer", field=f"{where}.count")
    policy = tree.get("policy")
    if policy is not None and not isinstance(policy, str):
        raise ConfigError("policy must be a string", field=f"{where}.policy")
    attrs, dims = {}, []
    for key, value in tree.items():
        if key in ("count", "policy"):
            continue
        if isinstance(value, Mapping):
            dims.append((key, parse_distribution(value, f"{where}.{key}")))
        else:
            attrs[key] = value
    return FamilyConfig(name, count, Supertype(tuple(dims)), attrs, policy)


def _train_config(tree: Mapping, seed: int) -> TrainConfig:
    if not isinstance(tree, Mapping):
        raise ConfigError("train must be a table", field="train")
    known = {f.name for f in fields(TrainConfig)} - {"seed"}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", field="train")
    try:
        return TrainConfig(seed=seed, **tree)
    except (TypeError, SpecterError) as exc:
        raise ConfigError(str(exc), field="train") from None


def build_config(tree: dict) -> ExperimentConfig:
    unknown = set(tree) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}", field=sorted(unknown)[0])
    env_name = tree.get("environment")
    if not isinstance(env_name, str):
        raise ConfigError("missing environment name", field="environment")
    if "seed" not in tree:
        raise ConfigError("a seed is required", field="seed")
    seed = tree["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer", field="seed")
    sharing = tree.get("sharing", True)
    if not isinstance(sharing, bool):
        raise ConfigError("sharing must be true or false", field="sharing")
    families_tree = tree.get("agent_family", {})
    if not isinstance(families_tree, Mapping):
        raise ConfigError("agent_family must be a table", field="agent_family")
    families = {name: parse_family(name, ft) for name, ft in families_tree.items()}
    net = tree.get("network", {})
    edges = []
    for i, e in enumerate(net.get("edges", [])):
        where = f"network.edges[{i}]"
        if not isinstance(e, list) or len(e) not in (2, 3) or not all(isinstance(x, str) for x in e[:2]):
            raise ConfigError("edge entries are [a, b] or [a, b, probability]", field=where)
        p = _num(e[2], where) if len(e) == 3 else 1.0
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"probability {p} outside [0, 1]", field=where)
        edges.append((e[0], e[1], p))
    fsm = tree.get("fsm", {})
    if "horizon" in fsm and (isinstance(fsm["horizon"], bool) or not isinstance(fsm["horizon"], int) or fsm["horizon"] < 1):
        raise ConfigError("horizon must be a positive integer", field="fsm.horizon")
    out_dir = tree.get("output_dir", f"runs/{env_name}")
    if not isinstance(out_dir, str):
        raise ConfigError("output_dir must be a string", field="output_dir")
    resolved = copy.deepcopy(tree)
    resolved.setdefault("sharing", sharing)
    resolved.setdefault("output_dir", out_dir)
    cfg = ExperimentConfig(
        environment=env_name,
        seed=seed,
        sharing=sharing,
        output_dir=out_dir,
        env=dict(tree.get("env", {})),
        families=families,
        network_edges=edges,
        fsm=dict(fsm),
        train=_train_config(tree.get("train", {}), seed),
        raw=resolved,
    )
    train_tree = dict(resolved.get("train", {}))
    for f in fields(TrainConfig):
        if f.name != "seed":
            train_tree.setdefault(f.name, getattr(cfg.train, f.name))
    resolved["train"] = train_tree
    return cfg
