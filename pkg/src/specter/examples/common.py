"""Helpers shared by the bundled environments."""

from __future__ import annotations

from typing import Any, Iterable, Mapping

from ..agents import AgentSpec
from ..comm import ResolverConfig
from ..config import ExperimentConfig, FamilyConfig
from ..envs import EPISODE_END, FsmEnvironmentDefinition, FsmStage
from ..errors import ConfigError, SpecterError
from ..net import StochasticNetworkSpec


def env_param(cfg: ExperimentConfig, key: str, default: Any, kind: type | tuple = (int, float)) -> Any:
    value = cfg.env.get(key, default)
    if kind in ((int, float), float) and isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", field=f"env.{key}")
    if not isinstance(value, kind):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}", field=f"env.{key}")
    return value


def require_params(fam: FamilyConfig, names: Iterable[str]) -> None:
    for name in names:
        if name not in fam.supertype.names:
            raise ConfigError("missing type parameter", field=f"agent_family.{fam.name}.{name}")


def resolver_from(cfg: ExperimentConfig) -> ResolverConfig:
    tree = cfg.env.get("resolver", {})
    try:
        return ResolverConfig(tree.get("ordering", "round_batch"), tree.get("max_rounds", 32))
    except SpecterError as exc:
        raise ConfigError(str(exc), field="env.resolver") from None


def network_spec(
    vertices: Iterable[str], default_edges: Mapping[tuple[str, str], float], cfg: ExperimentConfig
) -> StochasticNetworkSpec:
    """Default edges of the environment, then the config's ``network.edges`` on top."""
    probs = dict(default_edges)
    vs = set(vertices)
    for i, (a, b, p) in enumerate(cfg.network_edges):
        for v in (a, b):
            if v not in vs:
                raise ConfigError(f"unknown agent {v!r}", field=f"network.edges[{i}]")
        if a == b:
            raise ConfigError("self-loop", field=f"network.edges[{i}]")
        probs[(a, b)] = p
    try:
        return StochasticNetworkSpec.create(vs, probs)
    except SpecterError as exc:
        raise ConfigError(str(exc), field="network") from None


def finish_definition(
    name: str,
    cfg: ExperimentConfig,
    agents: Mapping[str, AgentSpec],
    net: StochasticNetworkSpec,
    stages: Mapping[str, FsmStage],
    initial: str,
    horizon: int,
    groups: Mapping[str, Iterable[str]] | None = None,
    on_reset=None,
) -> FsmEnvironmentDefinition:
    """Apply ``[fsm]`` overrides and validate.

    ``fsm.stages.<id>.acting`` may list agent ids, family names or the
    environment's named groups; ``fsm.stages.<id>.next`` maps labels to
    stage ids (or ``episode_end``).
    """
    groups = {k: list(v) for k, v in (groups or {}).items()}
    for fam in cfg.families.values():
        groups.setdefault(fam.name, fam.agent_ids())
    stages = dict(stages)
    for sid, over in cfg.fsm.get("stages", {}).items():
        where = f"fsm.stages.{sid}"
        if not isinstance(over, Mapping):
            raise ConfigError("stage override must be a table", field=where)
        base = stages.get(sid)
        acting = base.acting if base else frozenset()
        if "acting" in over:
            members: set[str] = set()
            for item in over["acting"]:
                if item in groups:
                    members.update(groups[item])
                elif item in agents:
                    members.add(item)
                else:
                    raise ConfigError(f"unknown agent or group {item!r}", field=f"{where}.acting")
            acting = frozenset(members)
        nxt = dict(over.get("next", base.next if base else {}))
        for label, target in nxt.items():
            if target != EPISODE_END and target not in stages and target not in cfg.fsm.get("stages", {}):
                raise ConfigError(f"unknown stage {target!r}", field=f"{where}.next.{label}")
        stages[sid] = FsmStage(sid, acting, nxt, base.outcome if base else None)
    initial = cfg.fsm.get("initial_stage", initial)
    horizon = cfg.fsm.get("horizon", horizon)
    try:
        return FsmEnvironmentDefinition(
            agents=dict(agents),
            network_spec=net,
            stages=stages,
            initial_stage=initial,
            horizon=horizon,
            resolver=resolver_from(cfg),
            name=name,
            on_reset=on_reset,
        )
    except SpecterError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), field="fsm") from None
