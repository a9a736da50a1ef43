import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specter.comm import (
    Message,
    MessageQueue,
    Payload,
    ResolverConfig,
    ViewStore,
    collect_context,
    enqueue,
    publish_view,
    read_view,
    resolve,
)
from specter.errors import CommError, MaxRoundsExceeded, NoEdge, UnknownAgent
from specter.net import StochasticNetworkSpec, build_static, sample_network

NET = build_static("abc", [("a", "b")])


def msg(s, r, kind="ping"):
    return Message(s, r, Payload(kind, {}))


def test_payload_validation():
    with pytest.raises(CommError):
        Payload("", {})
    with pytest.raises(CommError):
        Payload("x", {"v": [1, 2]})


def test_enqueue_along_edge():
    q = MessageQueue()
    enqueue(q, NET, msg("a", "b"))
    assert len(q) == 1


def test_enqueue_without_edge_leaves_queue_unchanged():
    q = MessageQueue()
    with pytest.raises(NoEdge):
        enqueue(q, NET, msg("a", "c"))
    with pytest.raises(NoEdge):
        enqueue(q, NET, msg("a", "a"))
    with pytest.raises(UnknownAgent):
        enqueue(q, NET, msg("a", "zz"))
    assert len(q) == 0


def test_sequence_monotone():
    q = MessageQueue()
    seqs = [q.send(NET, "a", "b", Payload("x")).sequence for _ in range(5)]
    assert seqs == sorted(seqs) and len(set(seqs)) == 5


def test_resolve_empty():
    assert resolve(MessageQueue(), NET, {}) == []


@pytest.mark.parametrize("ordering", ["fifo", "round_batch"])
def test_resolve_reply_once(ordering):
    # Hand trace: a->b delivered (round 1); b replies b->a (round 2); a answers nothing.
    q = MessageQueue()
    enqueue(q, NET, msg("a", "b", "hello"))
    handlers = {"b": lambda m: [("a", Payload("reply"))], "a": lambda m: None}
    log = resolve(q, NET, handlers, ResolverConfig(ordering))
    assert [(d.round, d.sender, d.recipient, d.kind) for d in log] == [
        (1, "a", "b", "hello"),
        (2, "b", "a", "reply"),
    ]
    assert len(q) == 0


def test_resolve_cycle_guard():
    q = MessageQueue()
    enqueue(q, NET, msg("a", "b"))
    handlers = {"a": lambda m: [("b", Payload("ping"))], "b": lambda m: [("a", Payload("pong"))]}
    with pytest.raises(MaxRoundsExceeded):
        resolve(q, NET, handlers, ResolverConfig("fifo", max_rounds=10))


def test_resolver_config_validation():
    with pytest.raises(CommError):
        ResolverConfig(max_rounds=0)
    with pytest.raises(CommError):
        ResolverConfig("lifo")


def test_handler_reply_checked_against_network():
    q = MessageQueue()
    enqueue(q, NET, msg("a", "b"))
    with pytest.raises(NoEdge):
        resolve(q, NET, {"b": lambda m: [("c", Payload("leak"))]})


def test_round_batch_groups_by_recipient():
    net = build_static("abc", [("a", "b"), ("a", "c"), ("b", "c")])
    q = MessageQueue()
    for s, r in [("a", "c"), ("a", "b"), ("b", "c"), ("c", "b")]:
        q.send(net, s, r, Payload("x"))
    log = resolve(q, net, {}, ResolverConfig("round_batch"))
    assert [d.recipient for d in log] == ["b", "b", "c", "c"]
    fifo_q = MessageQueue()
    for s, r in [("a", "c"), ("a", "b"), ("b", "c"), ("c", "b")]:
        fifo_q.send(net, s, r, Payload("x"))
    fifo = resolve(fifo_q, net, {}, ResolverConfig("fifo"))
    assert [d.sequence for d in fifo] == sorted(d.sequence for d in fifo)


def _chatter(k):
    """Handlers that answer for k rounds then stop; ring a-b-c-d."""

    def h(me, nxt):
        def f(m):
            r = int(m.payload["r"])
            return [(nxt, Payload("hop", {"r": r + 1}))] if r < k else None

        return f

    return {"a": h("a", "b"), "b": h("b", "c"), "c": h("c", "d"), "d": h("d", "a")}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.sampled_from(["fifo", "round_batch"]), st.integers(1, 3))
def test_resolve_terminates_with_traceable_count(k, ordering, starters):
    net = build_static("abcd", [("a", "b"), ("b", "c"), ("c", "d"), ("d", "a")])
    senders = ["a", "b", "c"][:starters]
    nxt = {"a": "b", "b": "c", "c": "d"}

    def run():
        q = MessageQueue()
        for s in senders:
            q.send(net, s, nxt[s], Payload("hop", {"r": 0}))
        return resolve(q, net, _chatter(k), ResolverConfig(ordering, max_rounds=16))

    log = run()
    # each starter yields a chain of k+1 deliveries
    assert len(log) == starters * (k + 1)
    assert max(d.round for d in log) == k + 1
    assert run() == log
    if ordering == "fifo":
        assert [d.sequence for d in log] == sorted(d.sequence for d in log)


def test_views_publish_and_revisions():
    store = ViewStore()
    publish_view(store, NET, "a", "b", Payload("v", {"x": 1}))
    assert store.revision("a", "b") == 1
    publish_view(store, NET, "a", "b", Payload("v", {"x": 2}))
    assert store.revision("a", "b") == 2
    assert read_view(store, NET, "b", "a")["x"] == 2
    with pytest.raises(NoEdge):
        publish_view(store, NET, "a", "c", Payload("v"))


def test_read_view_absent_and_resample():
    store = ViewStore()
    assert read_view(store, NET, "b", "a") is None
    spec = StochasticNetworkSpec.create("ab", {("a", "b"): 1.0})
    net1 = sample_network(spec, np.random.default_rng(0))
    publish_view(store, net1, "a", "b", Payload("v", {"x": 1}))
    assert read_view(store, net1, "b", "a")["x"] == 1
    net2 = sample_network(StochasticNetworkSpec.create("ab", {("a", "b"): 0.0}), np.random.default_rng(0))
    with pytest.raises(NoEdge):
        read_view(store, net2, "b", "a")


def test_reading_does_not_mutate():
    store = ViewStore()
    publish_view(store, NET, "a", "b", Payload("v", {"x": 1}))
    for _ in range(3):
        read_view(store, NET, "b", "a")
    assert store.revision("a", "b") == 1 and len(store) == 1


def test_collect_context():
    net = build_static("rabc", [("r", "a"), ("r", "b"), ("a", "c")])
    store = ViewStore()
    assert collect_context(store, build_static("rx", []), "r") == {}
    publish_view(store, net, "a", "r", Payload("v", {"x": 1}))
    assert set(collect_context(store, net, "r")) == {"a"}
    publish_view(store, net, "a", "c", Payload("v", {"x": 9}))
    assert collect_context(store, net, "r")["a"]["x"] == 1
    assert "a" in collect_context(store, net, "c")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd"), st.integers(0, 9)), max_size=30))
def test_per_audience_isolation(pubs):
    net = build_static("abcd", [(x, y) for x in "abcd" for y in "abcd" if x < y])
    store = ViewStore()
    last = {}
    for owner, audience, val in pubs:
        if owner == audience:
            continue
        store.publish(net, owner, audience, Payload("v", {"val": val, "to": audience}))
        last[(owner, audience)] = val
    for (owner, audience), val in last.items():
        p = store.read(net, audience, owner)
        assert p["to"] == audience and p["val"] == val
