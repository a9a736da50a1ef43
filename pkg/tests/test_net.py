import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specter.errors import InvalidProbability, SelfLoop, UnknownVertex
from specter.net import (
    StochasticNetworkSpec,
    build_static,
    has_edge,
    neighbors,
    sample_network,
)


def test_build_static_one_edge():
    net = build_static({"a", "b", "c"}, {("a", "b")})
    assert len(net.edges) == 1
    assert net.vertices == {"a", "b", "c"}


def test_build_static_rejects_self_loop():
    with pytest.raises(SelfLoop):
        build_static({"a"}, {("a", "a")})


def test_build_static_rejects_unknown_vertex():
    with pytest.raises(UnknownVertex) as exc:
        build_static({"a", "b"}, {("a", "c")})
    assert exc.value.vertex == "c"


def test_undirected_duplicates_collapse():
    net = build_static("ab", [("a", "b"), ("b", "a")])
    assert len(net.edges) == 1


def test_neighbors():
    assert neighbors(build_static("abc", []), "a") == []
    net = build_static("abc", [("a", "c"), ("a", "b")])
    assert neighbors(net, "a") == ["b", "c"]
    with pytest.raises(UnknownVertex):
        neighbors(net, "d")


def test_has_edge():
    net = build_static("ab", [("a", "b")])
    assert has_edge(net, "a", "b") and has_edge(net, "b", "a")
    assert not has_edge(net, "a", "a")
    assert not has_edge(net, "a", "zzz")


def test_probability_validation():
    with pytest.raises(InvalidProbability):
        StochasticNetworkSpec.create("ab", {("a", "b"): 1.5})
    with pytest.raises(SelfLoop):
        StochasticNetworkSpec.create("ab", {("a", "a"): 0.5})


def test_degenerate_probabilities():
    rng = np.random.default_rng(0)
    pairs = [("a", "b"), ("b", "c"), ("a", "c")]
    full = StochasticNetworkSpec.create("abc", {p: 1.0 for p in pairs})
    empty = StochasticNetworkSpec.create("abc", {p: 0.0 for p in pairs})
    for _ in range(50):
        assert len(sample_network(full, rng).edges) == 3
        assert len(sample_network(empty, rng).edges) == 0


def test_monte_carlo_frequency():
    spec = StochasticNetworkSpec.create("ab", {("a", "b"): 0.3})
    rng = np.random.default_rng(42)
    n = 10_000
    hits = sum(sample_network(spec, rng).has_edge("a", "b") for _ in range(n))
    assert 0.285 <= hits / n <= 0.315


names = st.sampled_from(list("abcdef"))


@st.composite
def specs(draw):
    vs = sorted(set(draw(st.lists(names, min_size=2, max_size=6, unique=True))))
    probs = {}
    for i, a in enumerate(vs):
        for b in vs[i + 1 :]:
            if draw(st.booleans()):
                probs[(a, b)] = draw(st.sampled_from([0.0, 0.2, 0.5, 1.0]))
    return StochasticNetworkSpec.create(vs, probs)


@settings(max_examples=60, deadline=None)
@given(specs(), st.integers(0, 2**32 - 1))
def test_sampling_properties(spec, seed):
    a = sample_network(spec, np.random.default_rng(seed))
    b = sample_network(spec, np.random.default_rng(seed))
    assert a == b
    allowed = {k for k, p in spec.edge_probabilities.items() if p > 0}
    assert a.edges <= allowed
    assert a.vertices == spec.vertices
    for x in spec.vertices:
        for y in spec.vertices:
            assert a.has_edge(x, y) == a.has_edge(y, x)
