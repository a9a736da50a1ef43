"""Multi-armed bandit: every agent pulls an arm each step.

Used as the smallest end-to-end learning check and as a host for arbitrary
type parameters (the families' supertypes only augment observations).
"""

from __future__ import annotations

import numpy as np

from ..agents import ActionSpace, AgentBehavior, AgentSpec, ObservationSpace
from ..config import ExperimentConfig
from ..envs import EpisodeTrace, FsmEnvironmentDefinition, FsmStage
from ..errors import ConfigError
from .common import env_param, finish_definition, network_spec

NAME = "bandit"
METRICS = ("mean_return",)


class ArmPuller(AgentBehavior):
    observation_space = ObservationSpace(())

    def __init__(self, arm_rewards: tuple[float, ...]):
        self.arm_rewards = arm_rewards
        self.action_space = ActionSpace.ladder("arm", range(len(arm_rewards)))

    def init_state(self, agent, type_, rng):
        return {"last": -1}

    def decode_action(self, ctx, action):
        ctx.mutate("set", last=action)

    def compute_reward(self, ctx):
        return self.arm_rewards[ctx.state["last"]]


def build(cfg: ExperimentConfig) -> FsmEnvironmentDefinition:
    rewards = env_param(cfg, "arm_rewards", [1.0, 0.0], list)
    if not rewards or not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in rewards):
        raise ConfigError("arm_rewards must be a nonempty list of numbers", field="env.arm_rewards")
    horizon = env_param(cfg, "horizon", 1, int)
    behavior = ArmPuller(tuple(float(r) for r in rewards))
    agents = {}
    for fam in cfg.families.values():
        for aid in fam.agent_ids():
            agents[aid] = AgentSpec(aid, behavior, fam.supertype, fam.name)
    if not agents:
        raise ConfigError("at least one agent is required", field="agent_family")
    net = network_spec(agents, {}, cfg)
    stages = {"play": FsmStage("play", frozenset(agents), {"ok": "play"})}
    return finish_definition(NAME, cfg, agents, net, stages, "play", horizon)


def agent_metrics(trace: EpisodeTrace) -> dict[str, dict[str, float]]:
    return {}


def summarize(definition: FsmEnvironmentDefinition, traces: list[EpisodeTrace]) -> list[dict]:
    from ..learn import mean_return_summary

    records = mean_return_summary(definition, traces)
    arm_counts: dict[str, np.ndarray] = {}
    for tr in traces:
        for rec in tr.records:
            for a, act in rec.actions.items():
                fam = definition.agents[a].family
                n = len(definition.agents[a].behavior.action_space)
                arm_counts.setdefault(fam, np.zeros(n))[act] += 1
    for fam in sorted(arm_counts):
        c = arm_counts[fam]
        records.append({"scope": "family", "entity": fam, "metric": "arm0_rate", "value": float(c[0] / c.sum())})
    return records
