"""Dealer / non-strategic clients: allocate a finite budget against random demand.

Single self-looping stage in which the dealer and every client act.  Each
client holds a current demand (published to the dealer as a view) and
draws the next one; the dealer allocates to every client, clients answer
with their filling ratio, and the dealer is rewarded with an aggregate of
those utilities.

The dealer's discrete action is a joint choice of one allocation level per
client and one global proportion level; the allocation to client ``i`` is
``level_i * proportion * max_allocation``, scaled down together when the
total would exceed the remaining budget.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from ..agents import ActionSpace, Action, AgentBehavior, AgentSpec, ObservationSpace, Supertype
from ..config import ExperimentConfig
from ..envs import EpisodeTrace, FsmEnvironmentDefinition, FsmStage
from ..errors import ConfigError, SpecterError
from .common import env_param, finish_definition, network_spec

NAME = "dealer"
DEALER = "dealer"
AGGREGATIONS = ("utilitarian", "egalitarian", "nash")


def filling_ratio(allocation: float, demand: float) -> float:
    if demand <= 0:
        return 1.0
    return min(max(allocation, 0.0) / demand, 1.0)


def aggregate(utilities: Sequence[float], method: str) -> float:
    u = np.asarray(utilities, dtype=float)
    if method == "utilitarian":
        return float(u.sum())
    if method == "egalitarian":
        return float(u.min()) if len(u) else 0.0
    if method == "nash":
        return float(np.prod(u))
    raise SpecterError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")


def draw_demand(rng: np.random.Generator, q: float, mu: float, sigma: float) -> int:
    """Bernoulli-Normal mixture: with probability q a rounded, floored-at-0 normal draw, else 0."""
    if rng.random() < q:
        return max(0, int(round(rng.normal(mu, sigma))))
    return 0


def joint_levels(n_clients: int, levels: Sequence[float], proportions: Sequence[float]) -> list[tuple]:
    """All (level_0, ..., level_{n-1}, proportion) combinations, in action-index order."""
    return [combo + (p,) for combo in itertools.product(levels, repeat=n_clients) for p in proportions]


def allocate(choice: Sequence[float], max_allocation: float, remaining: float) -> np.ndarray:
    *levels, prop = choice
    want = np.asarray(levels, dtype=float) * prop * max_allocation
    total = want.sum()
    if total > remaining and total > 0:
        want *= max(remaining, 0.0) / total
    return want


class Client(AgentBehavior):
    scripted = True

    def __init__(self, q: float, mu: float, sigma: float):
        self.q, self.mu, self.sigma = q, mu, sigma

    def init_state(self, agent, type_, rng):
        return {"demand": draw_demand(rng, self.q, self.mu, self.sigma), "utility": 1.0}

    def decode_action(self, ctx, action):
        # the next demand lands after this step's allocations are answered
        ctx.mutate("set", demand=draw_demand(ctx.rng, self.q, self.mu, self.sigma))

    def handle_message(self, ctx, msg):
        if msg.payload.kind == "allocation":
            u = filling_ratio(float(msg.payload["amount"]), ctx.state["demand"])
            ctx.mutate("set", utility=u)
            ctx.send(msg.sender, "utility", value=u)

    def compute_reward(self, ctx):
        return ctx.state["utility"]

    def generate_views(self, ctx):
        return {a: {"demand": ctx.state["demand"]} for a in ctx.neighbors if a == DEALER}


class Dealer(AgentBehavior):
    def __init__(self, clients: list[str], cfg: dict):
        self.clients = clients
        self.budget = cfg["budget"]
        self.max_allocation = cfg["max_allocation"]
        self.norm = cfg["normalization"]
        self.horizon = cfg["horizon"]
        self.method = cfg["aggregation"]
        self.choices = joint_levels(len(clients), cfg["allocation_levels"], cfg["proportion_levels"])
        self.action_space = ActionSpace(
            tuple(Action("alloc_" + "_".join(f"{v:g}" for v in c), None) for c in self.choices)
        )
        names = [f"{k}_{c}" for k in ("cum_alloc", "cum_demand", "demand") for c in clients]
        self.observation_space = ObservationSpace.unit(names + ["remaining_budget", "elapsed"])

    def init_state(self, agent, type_, rng):
        n = len(self.clients)
        return {
            "remaining": self.budget,
            "cum_alloc": [0.0] * n,
            "cum_demand": [0.0] * n,
            "utilities": [0.0] * n,
            "steps": 0,
        }

    def demands(self, ctx) -> list[float]:
        out = []
        for c in self.clients:
            v = ctx.view(c) if ctx.is_connected(c) else None
            out.append(float(v["demand"]) if v is not None else 0.0)
        return out

    def encode_observation(self, ctx):
        s = ctx.state
        return np.concatenate(
            [
                np.array(s["cum_alloc"]) / self.norm,
                np.array(s["cum_demand"]) / self.norm,
                np.array(self.demands(ctx)) / self.norm,
                [s["remaining"] / self.budget if self.budget > 0 else 0.0, s["steps"] / self.horizon],
            ]
        )

    def decode_action(self, ctx, action):
        s = ctx.state
        alloc = allocate(self.choices[action], self.max_allocation, s["remaining"])
        demands = self.demands(ctx)
        args = {f"alloc_{i}": float(a) for i, a in enumerate(alloc)}
        args.update({f"demand_{i}": d for i, d in enumerate(demands)})
        ctx.mutate("record", **args)
        for c, a in zip(self.clients, alloc):
            if ctx.is_connected(c):
                ctx.send(c, "allocation", amount=float(a))

    def handle_message(self, ctx, msg):
        if msg.payload.kind == "utility":
            ctx.mutate("utility", index=self.clients.index(msg.sender), value=float(msg.payload["value"]))

    def compute_reward(self, ctx):
        return aggregate(ctx.state["utilities"], self.method)

    def mutate_record(self, s, **args):
        n = len(self.clients)
        alloc = [args[f"alloc_{i}"] for i in range(n)]
        dem = [args[f"demand_{i}"] for i in range(n)]
        s["remaining"] = max(0.0, s["remaining"] - math.fsum(alloc))
        s["cum_alloc"] = [a + b for a, b in zip(s["cum_alloc"], alloc)]
        s["cum_demand"] = [a + b for a, b in zip(s["cum_demand"], dem)]
        # unanswered clients count as unserved
        s["utilities"] = [1.0 if d <= 0 else 0.0 for d in dem]
        s["steps"] += 1

    def mutate_utility(self, s, index: int, value: float):
        s["utilities"][index] = value


def build(cfg: ExperimentConfig) -> FsmEnvironmentDefinition:
    n = env_param(cfg, "clients", 2, int)
    if n < 1:
        raise ConfigError("at least one client is required", field="env.clients")
    method = env_param(cfg, "aggregation", "utilitarian", str)
    if method not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {list(AGGREGATIONS)}", field="env.aggregation")
    demand = cfg.env.get("demand", {})
    q = float(demand.get("q", 0.5))
    mu = float(demand.get("mu", 5.0))
    sigma = float(demand.get("sigma", 2.0))
    if not 0.0 <= q <= 1.0 or sigma < 0:
        raise ConfigError("need 0 <= q <= 1 and sigma >= 0", field="env.demand")
    horizon = env_param(cfg, "horizon", 20, int)
    if horizon < 1:
        raise ConfigError("horizon must be >= 1", field="env.horizon")
    params = {
        "budget": float(env_param(cfg, "budget", 60.0)),
        "max_allocation": float(env_param(cfg, "max_allocation", 8.0)),
        "normalization": float(env_param(cfg, "normalization", 100.0)),
        "allocation_levels": [float(x) for x in env_param(cfg, "allocation_levels", [0.0, 0.25, 0.5, 0.75, 1.0], list)],
        "proportion_levels": [float(x) for x in env_param(cfg, "proportion_levels", [0.5, 1.0], list)],
        "horizon": cfg.fsm.get("horizon", horizon),
        "aggregation": method,
    }
    if params["budget"] < 0 or params["max_allocation"] < 0 or params["normalization"] <= 0:
        raise ConfigError("budget and max_allocation must be >= 0, normalization > 0", field="env")
    if not params["allocation_levels"] or not params["proportion_levels"]:
        raise ConfigError("allocation and proportion levels must be nonempty", field="env.allocation_levels")

    clients = [f"client_{i}" for i in range(n)]
    agents = {DEALER: AgentSpec(DEALER, Dealer(clients, params), Supertype(), "dealer")}
    client = Client(q, mu, sigma)
    for c in clients:
        agents[c] = AgentSpec(c, client, Supertype(), "client")
    net = network_spec(agents, {(DEALER, c): 1.0 for c in clients}, cfg)
    stages = {"allocate": FsmStage("allocate", frozenset(agents), {"ok": "allocate"})}
    groups = {"dealer": [DEALER], "clients": clients}
    return finish_definition(NAME, cfg, agents, net, stages, "allocate", horizon, groups)


def agent_metrics(trace: EpisodeTrace) -> dict[str, dict[str, float]]:
    s = (trace.final_states or {}).get(DEALER)
    if s is None:
        return {}
    return {DEALER: {"spent": float(sum(s["cum_alloc"])), "demand": float(sum(s["cum_demand"]))}}


def summarize(definition: FsmEnvironmentDefinition, traces: list[EpisodeTrace]) -> list[dict]:
    from ..learn import mean_return_summary

    records = mean_return_summary(definition, traces)
    ms = [agent_metrics(t).get(DEALER) for t in traces]
    ms = [m for m in ms if m]
    if ms:
        for name in ("spent", "demand"):
            records.append({"scope": "family", "entity": "dealer", "metric": name, "value": float(np.mean([m[name] for m in ms]))})
    return records
