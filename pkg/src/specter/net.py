"""Agent connectivity: static and stochastic undirected networks.

The network is the only channel through which agents may exchange
information.  A :class:`NetworkTopology` is immutable; a
:class:`StochasticNetworkSpec` yields a fresh topology per episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import InvalidProbability, SelfLoop, UnknownVertex

AgentId = str
Pair = tuple[AgentId, AgentId]


def canonical(a: AgentId, b: AgentId) -> Pair:
    """Order-independent key for the unordered pair {a, b}."""
    return (a, b) if a <= b else (b, a)


def _validate_pair(vertices: frozenset[AgentId], a: AgentId, b: AgentId) -> Pair:
    if a == b:
        raise SelfLoop((a, b))
    for v in (a, b):
        if v not in vertices:
            raise UnknownVertex(v)
    return canonical(a, b)


@dataclass(frozen=True)
class NetworkTopology:
    vertices: frozenset[AgentId]
    edges: frozenset[Pair]
    _adjacency: Mapping[AgentId, tuple[AgentId, ...]] = field(
        default=None, repr=False, compare=False, hash=False
    )

    def __post_init__(self):
        adj: dict[AgentId, list[AgentId]] = {v: [] for v in self.vertices}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        object.__setattr__(
            self, "_adjacency", {v: tuple(sorted(ns)) for v, ns in adj.items()}
        )

    def neighbors(self, agent: AgentId) -> tuple[AgentId, ...]:
        try:
            return self._adjacency[agent]
        except KeyError:
            raise UnknownVertex(agent) from None

    def has_edge(self, a: AgentId, b: AgentId) -> bool:
        if a == b:
            return False
        return canonical(a, b) in self.edges

    def degree(self, agent: AgentId) -> int:
        return len(self.neighbors(agent))

    def sorted_edges(self) -> list[Pair]:
        return sorted(self.edges)


def build_static(vertices: Iterable[AgentId], edges: Iterable[tuple[AgentId, AgentId]]) -> NetworkTopology:
    """Validate and freeze a topology.

    Raises :class:`SelfLoop` or :class:`UnknownVertex` instead of silently
    dropping bad edges.
    """
    vs = frozenset(vertices)
    es = frozenset(_validate_pair(vs, a, b) for a, b in edges)
    return NetworkTopology(vs, es)


def neighbors(net: NetworkTopology, agent: AgentId) -> list[AgentId]:
    return list(net.neighbors(agent))


def has_edge(net: NetworkTopology, a: AgentId, b: AgentId) -> bool:
    return net.has_edge(a, b)


@dataclass(frozen=True)
class StochasticNetworkSpec:
    """Per-pair Bernoulli edge model.  Pairs absent from the map never connect."""

    vertices: frozenset[AgentId]
    edge_probabilities: Mapping[Pair, float]

    @classmethod
    def create(
        cls,
        vertices: Iterable[AgentId],
        edge_probabilities: Mapping[tuple[AgentId, AgentId], float] | Iterable[tuple],
    ) -> "StochasticNetworkSpec":
        vs = frozenset(vertices)
        items = edge_probabilities.items() if isinstance(edge_probabilities, Mapping) else (
            ((e[0], e[1]), e[2] if len(e) > 2 else 1.0) for e in edge_probabilities
        )
        probs: dict[Pair, float] = {}
        for (a, b), p in items:
            key = _validate_pair(vs, a, b)
            p = float(p)
            if not 0.0 <= p <= 1.0:
                raise InvalidProbability(key, p)
            probs[key] = p
        return cls(vs, dict(sorted(probs.items())))

    @classmethod
    def from_topology(cls, net: NetworkTopology) -> "StochasticNetworkSpec":
        return cls(net.vertices, {e: 1.0 for e in net.sorted_edges()})

    @property
    def is_static(self) -> bool:
        return all(p in (0.0, 1.0) for p in self.edge_probabilities.values())

    def with_probabilities(self, updates: Mapping[tuple[AgentId, AgentId], float]) -> "StochasticNetworkSpec":
        merged = dict(self.edge_probabilities)
        merged.update({canonical(a, b): p for (a, b), p in updates.items()})
        return StochasticNetworkSpec.create(self.vertices, merged)


def sample_network(spec: StochasticNetworkSpec, rng: np.random.Generator) -> NetworkTopology:
    """Draw one topology; each candidate edge is kept independently with its probability.

    Consumes exactly one uniform draw per candidate pair, in sorted pair order,
    so the result depends only on the network spec object and the generator state.
    """
    pairs = list(spec.edge_probabilities)
    if not pairs:
        return NetworkTopology(spec.vertices, frozenset())
    probs = np.fromiter(spec.edge_probabilities.values(), dtype=float, count=len(pairs))
    keep = rng.random(len(pairs)) < probs
    return NetworkTopology(spec.vertices, frozenset(p for p, k in zip(pairs, keep) if k))
