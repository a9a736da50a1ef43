"""Agent abstraction and the Type/Supertype parameterization.

A *Type* is the vector of parameters that instantiates an agent's reward
function (a budget, a cost of carry, a risk aversion).  A *Supertype* is a
per-dimension distribution over that space; every episode each agent draws
a fresh Type from its family's Supertype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import numpy as np

from .errors import SpecterError, TypeMismatch
from .net import AgentId

if TYPE_CHECKING:
    from .comm import Message
    from .envs import AgentContext


# --------------------------------------------------------------------------
# Distributions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float
    # Normalization range; lets a fixed evaluation value be placed on the
    # scale a policy was trained with.  None means "no range": maps to 0.5.
    support: tuple[float, float] | None = None

    n_params = 1

    def sample(self, rng: np.random.Generator) -> float:
        return self.value

    def normalize(self, v: float) -> float:
        if self.support is None or self.support[1] <= self.support[0]:
            return 0.5
        lo, hi = self.support
        return min(1.0, max(0.0, (v - lo) / (hi - lo)))

    def bounds(self) -> tuple[float, float]:
        return (self.value, self.value)


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    n_params = 2

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise SpecterError("uniform bounds must be finite")
        if self.low > self.high:
            raise SpecterError(f"uniform bounds out of order: {self.low} > {self.high}")

    @property
    def support(self) -> tuple[float, float]:
        return (self.low, self.high)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def normalize(self, v: float) -> float:
        if self.high <= self.low:
            return 0.5
        return min(1.0, max(0.0, (v - self.low) / (self.high - self.low)))

    def bounds(self) -> tuple[float, float]:
        return (self.low, self.high)


@dataclass(frozen=True)
class Categorical:
    values: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.values or len(self.values) != len(self.weights):
            raise SpecterError("categorical needs matching nonempty values and weights")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise SpecterError("categorical weights must be nonnegative and sum to 1")

    @property
    def n_params(self) -> int:
        return len(self.values) + len(self.weights)

    @property
    def support(self) -> tuple[float, float]:
        return (min(self.values), max(self.values))

    def sample(self, rng: np.random.Generator) -> float:
        return self.values[int(rng.choice(len(self.values), p=self.weights))]

    def normalize(self, v: float) -> float:
        k = len(self.values)
        if k == 1:
            return 0.5
        try:
            return self.values.index(v) / (k - 1)
        except ValueError:
            raise TypeMismatch(f"{v!r} is not a categorical value") from None

    def bounds(self) -> tuple[float, float]:
        return self.support


Distribution = Constant | Uniform | Categorical


@dataclass(frozen=True)
class TypeVector:
    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise TypeMismatch("type names and values differ in length")
        if len(set(self.names)) != len(self.names):
            raise TypeMismatch("duplicate type parameter names")

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def get(self, name: str, default: float | None = None) -> float | None:
        return self[name] if name in self.names else default

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values))


EMPTY_TYPE = TypeVector((), ())


@dataclass(frozen=True)
class Supertype:
    dimensions: tuple[tuple[str, Distribution], ...] = ()

    def __post_init__(self):
        names = [n for n, _ in self.dimensions]
        if len(set(names)) != len(names):
            raise SpecterError("duplicate supertype dimension names")

    @classmethod
    def of(cls, **dims: Distribution) -> "Supertype":
        return cls(tuple(dims.items()))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.dimensions)

    def __len__(self) -> int:
        return len(self.dimensions)

    def distribution(self, name: str) -> Distribution:
        for n, d in self.dimensions:
            if n == name:
                return d
        raise KeyError(name)

    @property
    def spec_param_count(self) -> int:
        return sum(d.n_params for _, d in self.dimensions)


def sample_type(st: Supertype, rng: np.random.Generator) -> TypeVector:
    return TypeVector(st.names, tuple(float(d.sample(rng)) for _, d in st.dimensions))


def resample_all(
    assignments: Mapping[AgentId, Supertype], rng: np.random.Generator
) -> dict[AgentId, TypeVector]:
    """One independent draw per agent, in sorted agent order."""
    return {a: sample_type(assignments[a], rng) for a in sorted(assignments)}


def augment_observation(obs: Sequence[float] | np.ndarray, t: TypeVector, st: Supertype) -> np.ndarray:
    """Append the type, each value scaled to [0, 1] by its distribution's support."""
    if t.names != st.names:
        raise TypeMismatch(f"type {t.names} does not match supertype {st.names}")
    base = np.asarray(obs, dtype=float)
    if not st.dimensions:
        return base.copy()
    extra = [d.normalize(v) for (_, d), v in zip(st.dimensions, t.values)]
    return np.concatenate([base, np.asarray(extra, dtype=float)])


# --------------------------------------------------------------------------
# Spaces
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSpace:
    dimensions: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        for name, lo, hi in self.dimensions:
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise SpecterError(f"bad bounds for observation dimension {name!r}")

    @classmethod
    def unit(cls, names: Sequence[str]) -> "ObservationSpace":
        return cls(tuple((n, 0.0, 1.0) for n in names))

    def __len__(self) -> int:
        return len(self.dimensions)

    @property
    def low(self) -> np.ndarray:
        return np.array([d[1] for d in self.dimensions], dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.array([d[2] for d in self.dimensions], dtype=float)

    def clip(self, obs: np.ndarray) -> np.ndarray:
        if not self.dimensions:
            return np.zeros(0)
        return np.clip(obs, self.low, self.high)


@dataclass(frozen=True)
class Action:
    name: str
    value: float | None = None


@dataclass(frozen=True)
class ActionSpace:
    actions: tuple[Action, ...]

    def __post_init__(self):
        if not self.actions:
            raise SpecterError("action space must be nonempty")
        names = [a.name for a in self.actions]
        if len(set(names)) != len(names):
            raise SpecterError("duplicate action names")

    @classmethod
    def ladder(cls, prefix: str, values: Sequence[float]) -> "ActionSpace":
        return cls(tuple(Action(f"{prefix}_{i}", float(v)) for i, v in enumerate(values)))

    @classmethod
    def single(cls, name: str = "noop") -> "ActionSpace":
        return cls((Action(name),))

    def __len__(self) -> int:
        return len(self.actions)

    def value(self, index: int) -> float | None:
        return self.actions[index].value

    def values(self) -> list[float | None]:
        return [a.value for a in self.actions]


# --------------------------------------------------------------------------
# Behavior interface
# --------------------------------------------------------------------------


class AgentBehavior:
    """Hooks an environment calls on each agent.

    Subclasses set ``observation_space`` and ``action_space`` and override
    the hooks they need.  Scripted behaviors (``scripted = True``) are not
    trained: they expose a single action and encode all their logic in the
    hooks.  Inside any hook, ``ctx.send`` queues a message to a neighbor and
    ``ctx.mutate`` defers an update to the agent's own state until message
    resolution has finished.
    """

    observation_space: ObservationSpace = ObservationSpace(())
    action_space: ActionSpace = ActionSpace.single()
    scripted: bool = False

    def init_state(self, agent: AgentId, type_: TypeVector, rng: np.random.Generator) -> Any:
        return {}

    def encode_observation(self, ctx: "AgentContext") -> np.ndarray:
        return np.zeros(len(self.observation_space))

    def decode_action(self, ctx: "AgentContext", action: int) -> None:
        pass

    def handle_message(self, ctx: "AgentContext", msg: "Message") -> None:
        pass

    def compute_reward(self, ctx: "AgentContext") -> float:
        return 0.0

    def generate_views(self, ctx: "AgentContext") -> Mapping[AgentId, Any] | None:
        return None

    def apply_mutation(self, state: Any, change: str, args: Mapping[str, Any]) -> None:
        """Default mutation semantics: ``set`` assigns and ``add`` increments fields.

        Any other change name dispatches to a ``mutate_<change>`` method.
        """
        if change == "set":
            for k, v in args.items():
                _setfield(state, k, v)
        elif change == "add":
            for k, v in args.items():
                _setfield(state, k, _getfield(state, k) + v)
        else:
            method = getattr(self, f"mutate_{change}", None)
            if method is None:
                raise SpecterError(f"{type(self).__name__} has no mutation {change!r}")
            method(state, **args)


def _setfield(state: Any, key: str, value: Any) -> None:
    if isinstance(state, dict):
        state[key] = value
    else:
        setattr(state, key, value)


def _getfield(state: Any, key: str) -> Any:
    return state[key] if isinstance(state, dict) else getattr(state, key)


@dataclass
class AgentSpec:
    """One agent of an environment: its behavior, family and type distribution."""

    id: AgentId
    behavior: AgentBehavior
    supertype: Supertype = field(default_factory=Supertype)
    family: str = ""

    @property
    def learning(self) -> bool:
        return not self.behavior.scripted

    @property
    def augmented_dim(self) -> int:
        return len(self.behavior.observation_space) + len(self.supertype)
