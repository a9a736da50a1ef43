"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class SpecterError(Exception):
    """Base class for all framework errors."""


class TopologyError(SpecterError):
    pass


class SelfLoop(TopologyError):
    def __init__(self, pair: tuple[str, str]):
        super().__init__(f"self-loop on {pair[0]!r}")
        self.pair = pair


class UnknownVertex(TopologyError):
    def __init__(self, vertex: str):
        super().__init__(f"unknown vertex {vertex!r}")
        self.vertex = vertex


class InvalidProbability(TopologyError):
    def __init__(self, pair: tuple[str, str], p: float):
        super().__init__(f"edge {pair} has probability {p!r} outside [0, 1]")
        self.pair = pair
        self.p = p


class CommError(SpecterError):
    pass


class NoEdge(CommError):
    """Raised whenever information would cross a pair of agents without an edge."""

    def __init__(self, sender: str, recipient: str):
        super().__init__(f"no edge between {sender!r} and {recipient!r}")
        self.sender = sender
        self.recipient = recipient


class UnknownAgent(CommError):
    def __init__(self, agent: str):
        super().__init__(f"unknown agent {agent!r}")
        self.agent = agent


class MaxRoundsExceeded(CommError):
    def __init__(self, max_rounds: int, pending: int):
        super().__init__(
            f"message resolution exceeded {max_rounds} rounds with {pending} messages pending"
        )
        self.max_rounds = max_rounds
        self.pending = pending


class TypeMismatch(SpecterError):
    pass


class EnvironmentError_(SpecterError):
    """Episode orchestration errors (trailing underscore avoids the builtin)."""


class WrongActingSet(EnvironmentError_):
    def __init__(self, expected: set[str], got: set[str]):
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        super().__init__(f"wrong acting set: missing={missing} unexpected={extra}")
        self.expected = expected
        self.got = got


class InvalidAction(EnvironmentError_):
    def __init__(self, agent: str, index: int):
        super().__init__(f"invalid action index {index!r} for agent {agent!r}")
        self.agent = agent
        self.index = index


class InvalidDefinition(EnvironmentError_):
    pass


class DimensionMismatch(SpecterError):
    pass


class BudgetExceeded(SpecterError):
    def __init__(self, agent: str, bid: float, budget: float):
        super().__init__(f"{agent!r} bid {bid} exceeds remaining budget {budget}")
        self.agent = agent


class UnknownTheme(SpecterError):
    def __init__(self, theme: str):
        super().__init__(f"unknown theme {theme!r}")
        self.theme = theme


class ConfigError(SpecterError):
    """Invalid experiment configuration; ``field`` names the offending key path."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field:
            loc.append(f"field {field!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
