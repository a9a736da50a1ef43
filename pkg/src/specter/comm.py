"""Network-enforced information sharing.

Two mechanisms exist:

* **Messages** are queued and delivered to a handler on the recipient.  A
  handler may answer with further messages; the queue is resolved until it
  is empty (or the round guard trips).
* **Views** are per-(owner, audience) snapshots that the audience reads
  whenever it wants.  Access is gated on the *current* network at read time.

Every crossing is checked against the topology; a missing edge raises
:class:`~specter.errors.NoEdge`.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Mapping, Optional

from .errors import CommError, MaxRoundsExceeded, NoEdge, UnknownAgent
from .net import AgentId, NetworkTopology

Scalar = float | int | bool | str
_SCALARS = (float, int, bool, str)


@dataclass(frozen=True)
class Payload:
    """Flat, serializable message/view content."""

    kind: str
    body: Mapping[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        if not self.kind:
            raise CommError("payload kind must be nonempty")
        for k, v in self.body.items():
            if not isinstance(v, _SCALARS):
                raise CommError(f"payload field {k!r} is not a scalar: {type(v).__name__}")

    def __getitem__(self, key: str) -> Scalar:
        return self.body[key]

    def get(self, key: str, default=None):
        return self.body.get(key, default)


@dataclass(frozen=True)
class Message:
    sender: AgentId
    recipient: AgentId
    payload: Payload
    sequence: int = -1
    round: int = 1


@dataclass(frozen=True)
class View:
    owner: AgentId
    audience: AgentId
    payload: Payload
    revision: int


@dataclass(frozen=True)
class Mutation:
    """Deferred update of the producing agent's own state."""

    target: AgentId
    change: str
    args: Mapping[str, Scalar] = field(default_factory=dict)


@dataclass(frozen=True)
class ResolverConfig:
    ordering: Literal["fifo", "round_batch"] = "round_batch"
    max_rounds: int = 32

    def __post_init__(self):
        if self.ordering not in ("fifo", "round_batch"):
            raise CommError(f"unknown resolver ordering {self.ordering!r}")
        if self.max_rounds < 1:
            raise CommError("max_rounds must be >= 1")


@dataclass(frozen=True)
class Delivery:
    round: int
    sequence: int
    sender: AgentId
    recipient: AgentId
    kind: str

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "sequence": self.sequence,
            "sender": self.sender,
            "recipient": self.recipient,
            "kind": self.kind,
        }


def _check_pair(net: NetworkTopology, a: AgentId, b: AgentId) -> None:
    for agent in (a, b):
        if agent not in net.vertices:
            raise UnknownAgent(agent)
    if not net.has_edge(a, b):
        raise NoEdge(a, b)


class MessageQueue:
    """Pending messages plus the sequence counter that orders them."""

    def __init__(self) -> None:
        self._pending: deque[Message] = deque()
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self._pending)

    def __iter__(self):
        return iter(self._pending)

    def send(
        self,
        net: NetworkTopology,
        sender: AgentId,
        recipient: AgentId,
        payload: Payload,
        round: int = 1,
    ) -> Message:
        """Edge-check and append; the queue is untouched if the check fails."""
        _check_pair(net, sender, recipient)
        msg = Message(sender, recipient, payload, next(self._counter), round)
        self._pending.append(msg)
        return msg

    def enqueue(self, net: NetworkTopology, msg: Message) -> Message:
        return self.send(net, msg.sender, msg.recipient, msg.payload, msg.round)

    def popleft(self) -> Message:
        return self._pending.popleft()

    def drain(self) -> list[Message]:
        out = list(self._pending)
        self._pending.clear()
        return out


def enqueue(queue: MessageQueue, net: NetworkTopology, msg: Message) -> MessageQueue:
    queue.enqueue(net, msg)
    return queue


Response = tuple[AgentId, Payload]
Handler = Callable[[Message], Optional[Iterable[Response]]]


def resolve(
    queue: MessageQueue,
    net: NetworkTopology,
    handlers: Mapping[AgentId, Handler],
    cfg: ResolverConfig = ResolverConfig(),
) -> list[Delivery]:
    """Deliver until the queue is empty and return the delivery log.

    A message's round is its reply depth: messages queued before resolution
    are round 1, replies to a round-r message are round r+1.  ``fifo``
    delivers in ascending sequence; ``round_batch`` delivers a whole round at
    once, grouped by recipient (then sequence), before any of its replies.
    Replies are sent by the handler's owner and are edge-checked.
    """
    log: list[Delivery] = []

    def deliver(msg: Message) -> None:
        if msg.round > cfg.max_rounds:
            raise MaxRoundsExceeded(cfg.max_rounds, len(queue) + 1)
        log.append(Delivery(msg.round, msg.sequence, msg.sender, msg.recipient, msg.payload.kind))
        handler = handlers.get(msg.recipient)
        if handler is None:
            return
        replies = handler(msg)
        if replies:
            for recipient, payload in replies:
                queue.send(net, msg.recipient, recipient, payload, msg.round + 1)

    if cfg.ordering == "fifo":
        while queue:
            deliver(queue.popleft())
    else:
        while queue:
            batch = queue.drain()
            batch.sort(key=lambda m: (m.round, m.recipient, m.sequence))
            for msg in batch:
                deliver(msg)
    return log


@dataclass(frozen=True)
class ViewRead:
    reader: AgentId
    owner: AgentId
    revision: int


class ViewStore:
    """Current views keyed by (owner, audience).

    When ``audit`` is enabled every successful read is recorded for
    replay against the topology (no-leak checks).
    """

    def __init__(self, audit: bool = False) -> None:
        self._views: dict[tuple[AgentId, AgentId], View] = {}
        self.reads: list[ViewRead] | None = [] if audit else None

    def __len__(self) -> int:
        return len(self._views)

    def clear(self) -> None:
        self._views.clear()
        if self.reads is not None:
            self.reads.clear()

    def publish(self, net: NetworkTopology, owner: AgentId, audience: AgentId, payload: Payload) -> View:
        _check_pair(net, owner, audience)
        prev = self._views.get((owner, audience))
        view = View(owner, audience, payload, 1 if prev is None else prev.revision + 1)
        self._views[(owner, audience)] = view
        return view

    def read(self, net: NetworkTopology, reader: AgentId, owner: AgentId) -> Payload | None:
        _check_pair(net, owner, reader)
        view = self._views.get((owner, reader))
        if view is None:
            return None
        if self.reads is not None:
            self.reads.append(ViewRead(reader, owner, view.revision))
        return view.payload

    def revision(self, owner: AgentId, audience: AgentId) -> int:
        view = self._views.get((owner, audience))
        return 0 if view is None else view.revision

    def context(self, net: NetworkTopology, reader: AgentId) -> dict[AgentId, Payload]:
        out: dict[AgentId, Payload] = {}
        for owner in net.neighbors(reader):
            payload = self.read(net, reader, owner)
            if payload is not None:
                out[owner] = payload
        return out


def publish_view(store: ViewStore, net: NetworkTopology, owner: AgentId, audience: AgentId, payload: Payload) -> ViewStore:
    store.publish(net, owner, audience, payload)
    return store


def read_view(store: ViewStore, net: NetworkTopology, reader: AgentId, owner: AgentId) -> Payload | None:
    return store.read(net, reader, owner)


def collect_context(store: ViewStore, net: NetworkTopology, reader: AgentId) -> dict[AgentId, Payload]:
    return store.context(net, reader)
