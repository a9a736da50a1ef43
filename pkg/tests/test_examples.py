import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specter.config import load_config
from specter.envs import EpisodeTrace, reset, step
from specter.errors import BudgetExceeded, ConfigError, SpecterError, UnknownTheme
from specter.examples import REGISTRY, ads, build, dealer, get, supply
from specter.rng import make_rng


def random_rollout(definition, seed, action_fn=None):
    """Step an episode with uniformly random (or scripted) learner actions,
    snapshotting every agent state after each step."""
    rng = np.random.default_rng(seed)
    obs, state = reset(definition, make_rng(seed))
    snaps = [copy.deepcopy({a: state.state_of(a) for a in definition.agents})]
    while True:
        acts = {}
        for a in obs:
            b = definition.agents[a].behavior
            if b.scripted:
                acts[a] = 0
            elif action_fn is not None:
                acts[a] = action_fn(a, state)
            else:
                acts[a] = int(rng.integers(len(b.action_space)))
        res = step(state, acts)
        snaps.append(copy.deepcopy({a: state.state_of(a) for a in definition.agents}))
        if res.done:
            break
        obs = res.observations
    trace = EpisodeTrace(state.network, state.types, state.history, None, {a: state.state_of(a) for a in definition.agents})
    return trace, snaps


def shops_of(d):
    return sorted(a for a, sp in d.agents.items() if isinstance(sp.behavior, supply.Shop))


def test_registry_and_unknown_name():
    assert {"ads", "supply", "dealer"} <= set(REGISTRY)
    with pytest.raises(ConfigError):
        get("nope")


# --------------------------------------------------------------------------
# Auction
# --------------------------------------------------------------------------


def test_second_price_examples():
    rng = make_rng(0)
    out = ads.run_auction({"a": 3.0, "b": 5.0, "c": 2.0}, rng)
    assert (out.winner, out.price) == ("b", 3.0)
    assert ads.run_auction({"a": 0.0, "b": 0.0}, rng) == ads.AuctionOutcome(None, 0.0)
    assert ads.run_auction({}, rng) == ads.AuctionOutcome(None, 0.0)
    assert ads.run_auction({"a": 0.7}, rng) == ads.AuctionOutcome("a", 0.0)


def test_tie_break_frequency():
    rng = make_rng(123)
    n = 10_000
    outs = [ads.run_auction({"a": 4.0, "b": 4.0}, rng) for _ in range(n)]
    assert {o.price for o in outs} == {4.0}
    freq = sum(o.winner == "a" for o in outs) / n
    assert abs(freq - 0.5) < 0.02


def test_auction_input_validation():
    rng = make_rng(0)
    with pytest.raises(SpecterError):
        ads.run_auction({"a": -1.0}, rng)
    with pytest.raises(SpecterError):
        ads.run_auction({"a": math.nan}, rng)
    with pytest.raises(BudgetExceeded):
        ads.run_auction({"a": 2.0}, rng, budgets={"a": 1.0})


@settings(max_examples=300, deadline=None)
@given(bids=st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 10, allow_nan=False), max_size=6), seed=st.integers(0, 999))
def test_payment_dominance(bids, seed):
    out = ads.run_auction(bids, make_rng(seed))
    if out.winner is None:
        assert all(b == 0 for b in bids.values())
        assert out.price == 0.0
    else:
        assert bids[out.winner] == max(bids.values()) > 0
        assert 0 <= out.price <= bids[out.winner]


# --------------------------------------------------------------------------
# Clicks
# --------------------------------------------------------------------------


def _users():
    return ads.parse_users(load_config("ads"), ads.DEFAULT_THEMES)


def test_click_outcomes():
    u1, u2 = _users()
    rng = make_rng(5)
    assert all(ads.click_outcome(u1, "Travel", rng) for _ in range(1000))
    assert not any(ads.click_outcome(u2, "Travel", rng) for _ in range(1000))
    freq = np.mean([ads.click_outcome(u2, "Tech", rng) for _ in range(10_000)])
    assert abs(freq - 0.2) < 0.015
    with pytest.raises(UnknownTheme):
        ads.click_outcome(u1, "Cooking", rng)


def test_user_profile_validation():
    with pytest.raises(SpecterError):
        ads.UserProfile("x", {"Travel": 1.5})


# --------------------------------------------------------------------------
# Ads environment
# --------------------------------------------------------------------------


def test_ads_default_config():
    cfg = load_config("ads")
    d = build(cfg)
    fams = {f.name: f for f in cfg.families.values()}
    assert {n: f.count for n, f in fams.items()} == {"travel": 2, "tech": 2, "sport": 2}
    bounds = {n: f.supertype.distribution("budget").bounds() for n, f in fams.items()}
    assert bounds == {"travel": (5.0, 15.0), "tech": (10.0, 20.0), "sport": (7.0, 17.0)}
    adv = d.agents["travel_0"].behavior
    np.testing.assert_allclose(adv.bids, np.linspace(0.0, 1.0, 11))


def test_bid_masking():
    adv = build(load_config("ads")).agents["travel_0"].behavior
    assert adv.affordable(10, 0.35) == pytest.approx(0.3)
    assert adv.affordable(2, 5.0) == pytest.approx(0.2)
    assert adv.affordable(5, 0.05) == 0.0


def test_budget_binds_before_horizon_at_top_bid():
    # always bidding the top level exhausts even the largest Travel budget
    cfg = load_config("ads", {"travel.budget": 15})
    d = build(cfg)
    trace, _ = random_rollout(d, 0, action_fn=lambda a, s: 10)
    spends = [math.fsum(s["payments"]) for a, s in trace.final_states.items() if a.startswith("travel")]
    assert len(spends) == 2
    m = ads.agent_metrics(trace)
    assert sum(m[a]["spend"] for a in m) > 0


@pytest.mark.parametrize("seed", range(5))
def test_budget_conservation(seed):
    d = build(load_config("ads"))
    trace, snaps = random_rollout(d, seed)
    for aid, s in trace.final_states.items():
        if not aid.startswith(("travel", "tech", "sport")):
            continue
        rem = [snap[aid]["remaining"] for snap in snaps]
        assert all(b <= a + 1e-12 for a, b in zip(rem, rem[1:]))
        spend = math.fsum(s["payments"])
        assert spend <= s["budget"] + 1e-9
        assert abs((s["budget"] - spend) - s["remaining"]) <= 1e-9
        assert all(p >= 0 for p in s["payments"])


def test_ads_rewards_match_clicks_and_prices():
    d = build(load_config("ads"))
    trace, snaps = random_rollout(d, 7)
    for t, rec in enumerate(trace.records):
        for aid, r in rec.rewards.items():
            if not isinstance(d.agents[aid].behavior, ads.Advertiser):
                continue
            s = snaps[t + 1][aid]
            assert r == pytest.approx(float(s["last_clicked"]) - s["last_price"])


def _trace_with(payments, clicks, seen=(1, 0), won=(1, 0), aid="travel_0"):
    d = build(load_config("ads"))
    st_ = {"budget": 10.0, "payments": list(payments), "remaining": 10.0 - sum(payments),
           "seen": list(seen), "won": list(won), "clicks": clicks}
    return d, EpisodeTrace(None, {}, [], None, {aid: st_})


def test_cost_per_click_examples():
    d, tr = _trace_with([2.0], 1)
    recs = {(r["entity"], r["metric"]): r["value"] for r in ads.summarize(d, [tr]) if r["scope"] == "family"}
    assert recs[("travel", "cost_per_click")] == 2.0
    assert recs[("travel", "win_rate_user_1")] == 1.0
    assert ("travel", "win_rate_user_2") not in recs
    d, tr = _trace_with([2.0], 0)
    metrics = {r["metric"] for r in ads.summarize(d, [tr])}
    assert "cost_per_click" not in metrics


# --------------------------------------------------------------------------
# Supply
# --------------------------------------------------------------------------


def test_supply_configs():
    cfg = load_config("supply")
    fam = next(iter(cfg.families.values()))
    assert fam.count == 1
    assert fam.supertype.distribution("cost_of_carry").bounds() == (0.0, 2.0)
    ev = load_config("supply_eval")
    d = build(ev)
    types = reset(d, make_rng(0))[1].types
    assert [types[a]["cost_of_carry"] for a in shops_of(d)] == [0.1, 0.7, 1.5, 1.9]
    # fixed values keep the training support, so the type feature is scaled alike
    assert {tuple(d.agents[a].supertype.distribution("cost_of_carry").support) for a in shops_of(d)} == {(0.0, 2.0)}
    shop = d.agents[shops_of(d)[0]].behavior
    assert (shop.p.demand_low, shop.p.demand_high, shop.p.unit_price, shop.p.restock_cost, shop.p.max_restock) == (1, 10, 1.0, 0.5, 20)


def test_myopic_optimum_is_interior():
    p = supply.SupplyParams()
    assert [supply.myopic_optimal_restock(c, p) for c in (0.1, 0.7, 1.5, 1.9)] == [5, 3, 2, 2]
    # exhaustive oracle agrees with a direct closed form of E[min(d, q)]
    for q in range(21):
        sales = np.mean([min(d, q) for d in range(1, 11)])
        assert supply.expected_cycle_profit(q, 0.0, p) == pytest.approx(sales - 0.5 * q)
    assert 0 < supply.myopic_optimal_restock(0.1, p) < p.max_restock


@pytest.mark.parametrize("seed", range(5))
def test_inventory_conservation(seed):
    d = build(load_config("supply_eval", {"env.cycles": 6}))
    trace, snaps = random_rollout(d, seed)
    for aid in shops_of(d):
        inv = [snap[aid].inventory for snap in snaps]
        assert min(inv) >= 0
        prev = 0
        for restock, orders, sales, leftover, _ in trace.final_states[aid].history:
            assert leftover == prev + restock - sales
            assert 0 <= sales <= orders
            prev = leftover


def test_supply_stage_actions_and_profit():
    d = build(load_config("supply", {"env.cycles": 3}))
    trace, _ = random_rollout(d, 1)
    p = supply.SupplyParams()
    s = trace.final_states["shop_0"]
    c = trace.types["shop_0"]["cost_of_carry"]
    assert len(s.history) == 3
    rewards = [rec.rewards["shop_0"] for rec in trace.records if rec.stage == "restock"]
    assert rewards[0] == 0.0
    for (restock, _, sales, leftover, profit), r in zip(s.history, rewards[1:]):
        assert profit == pytest.approx(p.unit_price * sales - p.restock_cost * restock - c * leftover)
        assert r == pytest.approx(profit)


def test_supply_metric_examples():
    d = build(load_config("supply", {"env.cycles": 4}))
    never, _ = random_rollout(d, 0, action_fn=lambda a, s: 0)
    m = supply.agent_metrics(never)["shop_0"]
    assert m["sales"] == 0 and m["missed_sales"] == m["orders"] > 0
    always, _ = random_rollout(d, 0, action_fn=lambda a, s: 20)
    m = supply.agent_metrics(always)["shop_0"]
    assert m["missed_sales"] == 0
    recs = {(r["scope"], r["metric"]): r["value"] for r in supply.summarize(d, [always])}
    assert recs[("family", "modal_restock")] == 20
    assert recs[("family", "revenue")] == pytest.approx(m["sales"])


def test_customer_picks_cheapest_then_lexicographic():
    cust = supply.Customer(supply.SupplyParams())

    class Ctx:
        def __init__(self, views):
            self._v = views

        def views(self):
            return self._v

    assert cust.choose_shop(Ctx({"b": {"unit_price": 1.0}, "a": {"unit_price": 2.0}})) == "b"
    assert cust.choose_shop(Ctx({"b": {"unit_price": 1.0}, "a": {"unit_price": 1.0}})) == "a"
    assert cust.choose_shop(Ctx({})) is None


def test_supply_rejects_bad_params():
    with pytest.raises(ConfigError):
        build(load_config("supply", {"env.demand_low": 5, "env.demand_high": 2}))
    with pytest.raises(ConfigError):
        build(load_config("supply", {"env.cycles": 0}))


# --------------------------------------------------------------------------
# Dealer
# --------------------------------------------------------------------------


def test_aggregations():
    u = [0.5, 1.0, 0.2]
    assert dealer.aggregate(u, "utilitarian") == pytest.approx(1.7)
    assert dealer.aggregate(u, "egalitarian") == 0.2
    assert dealer.aggregate(u, "nash") == pytest.approx(0.1)
    with pytest.raises(SpecterError):
        dealer.aggregate(u, "median")


def test_filling_ratio_identities():
    assert dealer.filling_ratio(3.0, 0.0) == 1.0
    assert dealer.filling_ratio(5.0, 5.0) == 1.0
    assert dealer.filling_ratio(2.0, 8.0) == 0.25
    assert dealer.filling_ratio(9.0, 3.0) == 1.0


def test_allocation_respects_budget():
    np.testing.assert_allclose(dealer.allocate((1.0, 0.5, 1.0), 8.0, 100.0), [8.0, 4.0])
    np.testing.assert_allclose(dealer.allocate((1.0, 1.0, 1.0), 8.0, 4.0), [2.0, 2.0])
    np.testing.assert_allclose(dealer.allocate((1.0, 1.0, 1.0), 8.0, 0.0), [0.0, 0.0])


def test_dealer_action_space_size():
    d = build(load_config("dealer"))
    assert len(d.agents["dealer"].behavior.action_space) == 5 * 5 * 2


@pytest.mark.parametrize("method", dealer.AGGREGATIONS)
def test_dealer_rollout_invariants(method):
    d = build(load_config("dealer", {"env.aggregation": method}))
    horizon = d.horizon
    for seed in range(3):
        trace, snaps = random_rollout(d, seed)
        rem = [snap["dealer"]["remaining"] for snap in snaps]
        assert all(b <= a + 1e-12 for a, b in zip(rem, rem[1:]))
        for t, rec in enumerate(trace.records):
            s = snaps[t + 1]["dealer"]
            assert s["steps"] == t + 1
            assert 0 <= s["steps"] / horizon <= 1
            utils = s["utilities"]
            assert all(0.0 <= x <= 1.0 for x in utils)
            r = rec.rewards["dealer"]
            assert r == pytest.approx(dealer.aggregate(utils, method))
            for c in [a for a, sp in d.agents.items() if sp.family == "client"]:
                assert 0.0 <= rec.rewards[c] <= 1.0
