"""Episode orchestration: finite-state-machine stages over the step pipeline.

One call to :func:`step` executes one stage:

1. ``decode_action`` for every acting agent (messages + deferred mutations)
2. enqueue the messages and resolve the queue to exhaustion
3. apply mutations
4. refresh views
5. compute rewards for the acting agents
6. advance the FSM through the stage's transition rule
7. collect observations for the next stage's acting agents
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from . import comm
from .agents import AgentSpec, TypeVector, augment_observation, resample_all
from .comm import Delivery, Message, MessageQueue, Mutation, Payload, ResolverConfig, ViewStore
from .errors import InvalidAction, InvalidDefinition, SpecterError, WrongActingSet
from .net import AgentId, NetworkTopology, StochasticNetworkSpec, sample_network

EPISODE_END = "episode_end"
DEFAULT_LABEL = "ok"


@dataclass(frozen=True)
class FsmStage:
    id: str
    acting: frozenset[AgentId]
    next: Mapping[str, str]
    # Called after rewards; returns the outcome label that picks the transition.
    outcome: Callable[["EpisodeState"], str] | None = None

    def transition(self, state: "EpisodeState") -> str:
        label = self.outcome(state) if self.outcome is not None else DEFAULT_LABEL
        try:
            return self.next[label]
        except KeyError:
            raise InvalidDefinition(f"stage {self.id!r} has no transition for label {label!r}") from None


@dataclass
class FsmEnvironmentDefinition:
    agents: Mapping[AgentId, AgentSpec]
    network_spec: StochasticNetworkSpec
    stages: Mapping[str, FsmStage]
    initial_stage: str
    horizon: int
    resolver: ResolverConfig = field(default_factory=ResolverConfig)
    name: str = "env"
    # Optional hook run at the end of reset, e.g. to seed environment-level state.
    on_reset: Callable[["EpisodeState"], None] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.horizon < 1:
            raise InvalidDefinition("horizon must be a positive integer")
        if self.initial_stage not in self.stages:
            raise InvalidDefinition(f"initial stage {self.initial_stage!r} is not defined")
        for aid, spec in self.agents.items():
            if spec.id != aid:
                raise InvalidDefinition(f"agent key {aid!r} does not match spec id {spec.id!r}")
            if aid not in self.network_spec.vertices:
                raise InvalidDefinition(f"agent {aid!r} is not a network vertex")
        for sid, stage in self.stages.items():
            if stage.id != sid:
                raise InvalidDefinition(f"stage key {sid!r} does not match stage id {stage.id!r}")
            if not stage.acting:
                raise InvalidDefinition(f"stage {sid!r} has no acting agents")
            unknown = set(stage.acting) - set(self.agents)
            if unknown:
                raise InvalidDefinition(f"stage {sid!r} acting set has unknown agents {sorted(unknown)}")
            if not stage.next:
                raise InvalidDefinition(f"stage {sid!r} has no transitions")
            for label, target in stage.next.items():
                if target != EPISODE_END and target not in self.stages:
                    raise InvalidDefinition(f"stage {sid!r} label {label!r} targets unknown stage {target!r}")
        unreachable = set(self.stages) - set(self.reachable_stages())
        if unreachable:
            raise InvalidDefinition(f"stages unreachable from {self.initial_stage!r}: {sorted(unreachable)}")

    def reachable_stages(self) -> list[str]:
        seen = [self.initial_stage]
        i = 0
        while i < len(seen):
            for target in self.stages[seen[i]].next.values():
                if target != EPISODE_END and target not in seen:
                    seen.append(target)
            i += 1
        return seen

    def stage_graph(self) -> str:
        """Human-readable walk of the default ("ok") path, e.g. ``a → b → a``."""
        path = [self.initial_stage]
        visited = {self.initial_stage}
        current = self.initial_stage
        while True:
            nxt = self.stages[current].next
            target = nxt.get(DEFAULT_LABEL, next(iter(nxt.values())))
            path.append(target)
            if target == EPISODE_END or target in visited:
                break
            visited.add(target)
            current = target
        text = " → ".join(path)
        branches = [
            f"{sid}[{label}] → {t}"
            for sid, st in self.stages.items()
            for label, t in st.next.items()
            if label != DEFAULT_LABEL
        ]
        return text if not branches else text + " (branches: " + ", ".join(branches) + ")"

    @property
    def learning_agents(self) -> list[AgentId]:
        return sorted(a for a, s in self.agents.items() if s.learning)

    @property
    def acting_agents(self) -> set[AgentId]:
        return set().union(*(s.acting for s in self.stages.values()))


class AgentContext:
    """Everything a behavior hook may touch during an episode.

    Behaviors see the network only through their own neighbor list and
    reach other agents only via :meth:`send` and the view accessors.
    """

    __slots__ = ("id", "spec", "type", "state", "scratch", "_episode", "_outbox")

    def __init__(self, spec: AgentSpec, type_: TypeVector, state: Any, episode: "EpisodeState"):
        self.id = spec.id
        self.spec = spec
        self.type = type_
        self.state = state
        # Transient per-step bookkeeping (e.g. bids collected during one
        # resolution); cleared before every step, never carried over.
        self.scratch: dict[str, Any] = {}
        self._episode = episode
        self._outbox: list[tuple[AgentId, Payload]] = []

    @property
    def rng(self) -> np.random.Generator:
        return self._episode.rng

    @property
    def stage(self) -> str:
        return self._episode.stage

    @property
    def step_index(self) -> int:
        return self._episode.steps

    @property
    def neighbors(self) -> tuple[AgentId, ...]:
        return self._episode.network.neighbors(self.id)

    def is_connected(self, other: AgentId) -> bool:
        return self._episode.network.has_edge(self.id, other)

    def send(self, recipient: AgentId, kind: str, **body) -> None:
        self._outbox.append((recipient, Payload(kind, body)))

    def mutate(self, change: str, **args) -> None:
        self._episode.mutations.append(Mutation(self.id, change, args))

    def view(self, owner: AgentId) -> Payload | None:
        return self._episode.views.read(self._episode.network, self.id, owner)

    def views(self) -> dict[AgentId, Payload]:
        return self._episode.views.context(self._episode.network, self.id)

    def take_outbox(self) -> list[tuple[AgentId, Payload]]:
        out, self._outbox = self._outbox, []
        return out


@dataclass
class StepRecord:
    stage: str
    actions: dict[AgentId, int]
    rewards: dict[AgentId, float]
    deliveries: list[Delivery]
    observations: dict[AgentId, np.ndarray] | None = None
    # (first, last) instrumentation ticks per pipeline phase; -1 when empty.
    phase_ticks: dict[str, tuple[int, int]] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)


@dataclass
class EpisodeTrace:
    network: NetworkTopology
    types: dict[AgentId, TypeVector]
    records: list[StepRecord] = field(default_factory=list)
    view_reads: list[comm.ViewRead] | None = None
    final_states: dict[AgentId, Any] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, episode: int = 0) -> list[str]:
        lines = []
        for t, rec in enumerate(self.records):
            lines.append(
                json.dumps(
                    {
                        "episode": episode,
                        "step": t,
                        "stage": rec.stage,
                        "actions": dict(sorted(rec.actions.items())),
                        "rewards": {k: round(v, 12) for k, v in sorted(rec.rewards.items())},
                    },
                    sort_keys=False,
                )
            )
            for d in rec.deliveries:
                lines.append(json.dumps({"episode": episode, "step": t, **d.as_dict()}))
        return lines


@dataclass
class StepResult:
    observations: dict[AgentId, np.ndarray]
    rewards: dict[AgentId, float]
    done: bool
    info: dict[str, Any]


class EpisodeState:
    """Mutable state of one running episode (single-threaded)."""

    def __init__(self, definition: FsmEnvironmentDefinition, rng: np.random.Generator, audit: bool = False):
        self.definition = definition
        self.rng = rng
        self.network: NetworkTopology = NetworkTopology(frozenset(), frozenset())
        self.types: dict[AgentId, TypeVector] = {}
        self.contexts: dict[AgentId, AgentContext] = {}
        self.queue = MessageQueue()
        self.views = ViewStore(audit=audit)
        self.mutations: list[Mutation] = []
        self.stage = definition.initial_stage
        self.steps = 0
        self.done = False
        self.clock = 0
        # Free-form environment-level scratch space (never visible to agents).
        self.env: dict[str, Any] = {}
        self.history: list[StepRecord] = []

    def observe(self, agent: AgentId) -> np.ndarray:
        spec = self.definition.agents[agent]
        ctx = self.contexts[agent]
        raw = spec.behavior.encode_observation(ctx)
        raw = spec.behavior.observation_space.clip(np.asarray(raw, dtype=float))
        return augment_observation(raw, ctx.type, spec.supertype)

    def observations(self) -> dict[AgentId, np.ndarray]:
        return {a: self.observe(a) for a in sorted(self.definition.stages[self.stage].acting)}

    def state_of(self, agent: AgentId) -> Any:
        return self.contexts[agent].state

    def _tick(self) -> int:
        self.clock += 1
        return self.clock


def reset(
    definition: FsmEnvironmentDefinition, rng: np.random.Generator, audit: bool = False
) -> tuple[dict[AgentId, np.ndarray], EpisodeState]:
    """Start an episode: resample network and types, reset agents and views."""
    state = EpisodeState(definition, rng, audit=audit)
    state.network = sample_network(definition.network_spec, rng)
    state.types = resample_all({a: s.supertype for a, s in definition.agents.items()}, rng)
    for aid in sorted(definition.agents):
        spec = definition.agents[aid]
        st = spec.behavior.init_state(aid, state.types[aid], rng)
        state.contexts[aid] = AgentContext(spec, state.types[aid], st, state)
    if definition.on_reset is not None:
        definition.on_reset(state)
    _publish_views(state)
    return state.observations(), state


def _publish_views(state: EpisodeState) -> None:
    for aid in sorted(state.contexts):
        ctx = state.contexts[aid]
        views = ctx.spec.behavior.generate_views(ctx)
        if views:
            for audience, payload in views.items():
                if not isinstance(payload, Payload):
                    payload = Payload("view", dict(payload))
                state.views.publish(state.network, aid, audience, payload)


def step(state: EpisodeState, actions: Mapping[AgentId, int], keep_observations: dict | None = None) -> StepResult:
    if state.done:
        raise SpecterError("episode is done; call reset")
    d = state.definition
    stage = d.stages[state.stage]
    if set(actions) != set(stage.acting):
        raise WrongActingSet(set(stage.acting), set(actions))
    acting = sorted(stage.acting)
    ticks: dict[str, tuple[int, int]] = {}

    for ctx in state.contexts.values():
        if ctx.scratch:
            ctx.scratch.clear()

    # (1) decode
    start = state.clock + 1
    outgoing: list[tuple[AgentId, AgentId, Payload]] = []
    for aid in acting:
        ctx = state.contexts[aid]
        space = ctx.spec.behavior.action_space
        a = actions[aid]
        if not isinstance(a, (int, np.integer)) or not 0 <= int(a) < len(space):
            raise InvalidAction(aid, a)
        ctx.spec.behavior.decode_action(ctx, int(a))
        outgoing.extend((aid, r, p) for r, p in ctx.take_outbox())
        state._tick()
    ticks["decode"] = (start, state.clock)

    # (2) enqueue + resolve
    for sender, recipient, payload in outgoing:
        state.queue.send(state.network, sender, recipient, payload)

    def make_handler(ctx: AgentContext):
        behavior = ctx.spec.behavior

        def handler(msg: Message):
            state._tick()
            behavior.handle_message(ctx, msg)
            return ctx.take_outbox()

        return handler

    handlers = {aid: make_handler(ctx) for aid, ctx in state.contexts.items()}
    start = state.clock + 1
    log = comm.resolve(state.queue, state.network, handlers, d.resolver)
    ticks["resolve"] = (start, state.clock) if log else (-1, -1)

    # (3) mutations
    start = state.clock + 1
    for m in state.mutations:
        ctx = state.contexts[m.target]
        ctx.spec.behavior.apply_mutation(ctx.state, m.change, m.args)
        state._tick()
    n_mut = len(state.mutations)
    state.mutations = []
    ticks["mutate"] = (start, state.clock) if n_mut else (-1, -1)

    # (4) views
    _publish_views(state)

    # (5) rewards
    start = state.clock + 1
    rewards = {}
    for aid in acting:
        ctx = state.contexts[aid]
        rewards[aid] = float(ctx.spec.behavior.compute_reward(ctx))
        state._tick()
    ticks["reward"] = (start, state.clock)

    # (6) transition
    target = stage.transition(state)
    state.steps += 1
    done = target == EPISODE_END or state.steps >= d.horizon
    info = {
        "stage": stage.id,
        "step": state.steps - 1,
        "deliveries": len(log),
        "rounds": max((x.round for x in log), default=0),
        "mutations": n_mut,
    }
    record = StepRecord(stage.id, dict(actions), rewards, log, keep_observations, ticks, info)
    state.history.append(record)
    if done:
        state.done = True
        return StepResult({}, rewards, True, info)
    state.stage = target

    # (7) observations
    return StepResult(state.observations(), rewards, False, info)


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int: ...


def run_episode(
    definition: FsmEnvironmentDefinition,
    policies: Mapping[str, Policy],
    mapping: Mapping[AgentId, str],
    rng: np.random.Generator,
    greedy: bool = False,
    keep_observations: bool = False,
    audit: bool = False,
) -> EpisodeTrace:
    """Reset, then act/step until done.

    Scripted agents always take action 0; every learning agent that acts
    must appear in ``mapping``.  Environment dynamics and action sampling
    use separate child streams of ``rng``.
    """
    env_rng, act_rng = rng.spawn(2)
    obs, state = reset(definition, env_rng, audit=audit)
    while True:
        actions = {}
        for aid, o in obs.items():
            spec = definition.agents[aid]
            if spec.behavior.scripted:
                actions[aid] = 0
                continue
            try:
                pid = mapping[aid]
            except KeyError:
                raise SpecterError(f"no policy mapped for learning agent {aid!r}") from None
            actions[aid] = policies[pid].act(o, act_rng, greedy)
        kept = {a: o for a, o in obs.items() if not definition.agents[a].behavior.scripted} if keep_observations else None
        result = step(state, actions, kept)
        if result.done:
            break
        obs = result.observations
    return EpisodeTrace(
        state.network,
        state.types,
        state.history,
        state.views.reads,
        {a: c.state for a, c in state.contexts.items()},
    )
