"""Bundled environments, resolvable by name from a config's ``environment`` key.

Each module exposes ``build(cfg)`` returning an
:class:`~specter.envs.FsmEnvironmentDefinition`, ``agent_metrics(trace)``
for per-iteration training logs and ``summarize(definition, traces)`` for
evaluation records.
"""

from __future__ import annotations

import importlib
from types import ModuleType

from ..errors import ConfigError

REGISTRY = {
    "ads": "specter.examples.ads",
    "supply": "specter.examples.supply",
    "dealer": "specter.examples.dealer",
    "bandit": "specter.examples.bandit",
}


def get(name: str) -> ModuleType:
    try:
        return importlib.import_module(REGISTRY[name])
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; known: {sorted(REGISTRY)}", field="environment") from None


def build(cfg):
    return get(cfg.environment).build(cfg)
