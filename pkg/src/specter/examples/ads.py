"""Digital ads market: a publisher, an ad exchange and budgeted advertisers.

Each cycle has two stages.  In ``impression`` the publisher picks a user and
asks the exchange to auction the slot; the exchange forwards the user's
features to every connected advertiser.  In ``bidding`` the advertisers bid
from a discrete ladder, the exchange runs a sealed-bid second-price
auction, the winner sends its ad to the publisher and the publisher replies
with the click outcome.  All of this happens by messages inside one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..agents import ActionSpace, AgentBehavior, AgentSpec, ObservationSpace, Supertype
from ..config import ExperimentConfig
from ..envs import EpisodeTrace, FsmEnvironmentDefinition, FsmStage
from ..errors import BudgetExceeded, ConfigError, SpecterError, UnknownTheme
from .common import env_param, finish_definition, network_spec, require_params

NAME = "ads"
PUBLISHER = "publisher"
EXCHANGE = "exchange"
DEFAULT_THEMES = ("Travel", "Tech", "Sport")
DEFAULT_BIDS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class UserProfile:
    id: str
    click_probabilities: Mapping[str, float]
    # Inert demographic features: shown to bidders, not used by any model.
    age: float = 0.0
    zip_area: float = 0.0

    def __post_init__(self):
        for theme, p in self.click_probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise SpecterError(f"click probability for {theme!r} must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class AuctionOutcome:
    winner: str | None
    price: float
    clicked: bool = False


def run_auction(
    bids: Mapping[str, float],
    rng: np.random.Generator,
    budgets: Mapping[str, float] | None = None,
) -> AuctionOutcome:
    """Sealed-bid second-price auction.

    The highest positive bid wins (ties broken uniformly at random) and pays
    the highest competing bid, or 0 with no competition.  No positive bid,
    no winner.
    """
    for a, b in bids.items():
        if not math.isfinite(b) or b < 0:
            raise SpecterError(f"bid of {a!r} must be finite and nonnegative, got {b}")
        if budgets is not None and b > budgets.get(a, math.inf):
            raise BudgetExceeded(a, b, budgets[a])
    positive = {a: b for a, b in bids.items() if b > 0}
    if not positive:
        return AuctionOutcome(None, 0.0)
    top = max(positive.values())
    leaders = sorted(a for a, b in positive.items() if b == top)
    winner = leaders[int(rng.integers(len(leaders)))] if len(leaders) > 1 else leaders[0]
    price = max((b for a, b in bids.items() if a != winner), default=0.0)
    return AuctionOutcome(winner, float(price))


def click_outcome(user: UserProfile, theme: str, rng: np.random.Generator) -> bool:
    try:
        p = user.click_probabilities[theme]
    except KeyError:
        raise UnknownTheme(theme) from None
    return bool(rng.random() < p)


# --------------------------------------------------------------------------
# Behaviors
# --------------------------------------------------------------------------


class Publisher(AgentBehavior):
    scripted = True

    def __init__(self, users: tuple[UserProfile, ...]):
        self.users = users

    def init_state(self, agent, type_, rng):
        return {"user": -1}

    def decode_action(self, ctx, action):
        u = int(ctx.rng.integers(len(self.users)))
        ctx.mutate("set", user=u)
        if ctx.is_connected(EXCHANGE):
            prof = self.users[u]
            ctx.send(EXCHANGE, "impression_request", user=u, age=prof.age, zip_area=prof.zip_area)

    def handle_message(self, ctx, msg):
        if msg.payload.kind == "ad":
            u = ctx.state["user"]
            clicked = click_outcome(self.users[u], msg.payload["theme"], ctx.rng)
            ctx.send(msg.sender, "click_result", clicked=clicked)


class Exchange(AgentBehavior):
    scripted = True

    def init_state(self, agent, type_, rng):
        return {"expected": 0}

    def handle_message(self, ctx, msg):
        kind = msg.payload.kind
        if kind == "impression_request":
            bidders = [a for a in ctx.neighbors if a != msg.sender]
            for a in bidders:
                ctx.send(a, "impression", **msg.payload.body)
            ctx.mutate("set", expected=len(bidders))
        elif kind == "bid":
            bids = ctx.scratch.setdefault("bids", {})
            bids[msg.sender] = float(msg.payload["amount"])
            if len(bids) == ctx.state["expected"]:
                out = run_auction(bids, ctx.rng)
                for a in sorted(bids):
                    won = a == out.winner
                    ctx.send(a, "auction_result", won=won, price=out.price if won else 0.0)


class Advertiser(AgentBehavior):
    def __init__(self, theme: str, themes: tuple[str, ...], users: tuple[UserProfile, ...], bids, cfg: dict):
        self.theme = theme
        self.themes = themes
        self.users = users
        self.click_value = cfg["click_value"]
        self.budget_scale = cfg["budget_scale"]
        self.action_space = ActionSpace.ladder("bid", bids)
        self.bids = np.array(bids, dtype=float)
        names = ["remaining_budget"] + [f"user_{u.id}" for u in users] + [f"theme_{t}" for t in themes]
        self.observation_space = ObservationSpace.unit(names + ["age", "zip_area"])

    def init_state(self, agent, type_, rng):
        n = len(self.users)
        return {
            "budget": float(type_["budget"]),
            "payments": [],
            "remaining": float(type_["budget"]),
            "pending_user": -1,
            "pending_age": 0.0,
            "pending_zip": 0.0,
            "last_price": 0.0,
            "last_clicked": False,
            "seen": [0] * n,
            "won": [0] * n,
            "clicks": 0,
        }

    def encode_observation(self, ctx):
        s = ctx.state
        user = np.zeros(len(self.users))
        if s["pending_user"] >= 0:
            user[s["pending_user"]] = 1.0
        theme = np.array([t == self.theme for t in self.themes], dtype=float)
        extra = [s["pending_age"] / 100.0, s["pending_zip"] / 9.0]
        return np.concatenate([[s["remaining"] / self.budget_scale], user, theme, extra])

    def affordable(self, action: int, remaining: float) -> float:
        """Bid of ``action``, masked down to the highest level the budget covers."""
        ok = np.nonzero(self.bids[: action + 1] <= remaining)[0]
        return float(self.bids[ok[-1]]) if len(ok) else 0.0

    def decode_action(self, ctx, action):
        s = ctx.state
        ctx.mutate("clear")
        if s["pending_user"] < 0 or not ctx.is_connected(EXCHANGE):
            return
        ctx.send(EXCHANGE, "bid", amount=self.affordable(action, s["remaining"]))

    def handle_message(self, ctx, msg):
        kind = msg.payload.kind
        body = msg.payload.body
        if kind == "impression":
            ctx.mutate("impression", user=body["user"], age=body["age"], zip_area=body["zip_area"])
        elif kind == "auction_result" and body["won"]:
            # state is untouched until resolution ends, so the user is still pending
            ctx.mutate("pay", price=body["price"], user=ctx.state["pending_user"])
            if ctx.is_connected(PUBLISHER):
                ctx.send(PUBLISHER, "ad", theme=self.theme)
        elif kind == "click_result" and body["clicked"]:
            ctx.mutate("click")

    def compute_reward(self, ctx):
        s = ctx.state
        return self.click_value * float(s["last_clicked"]) - s["last_price"]

    # mutations -----------------------------------------------------------

    def mutate_clear(self, s):
        s["last_price"] = 0.0
        s["last_clicked"] = False
        s["pending_user"] = -1

    def mutate_impression(self, s, user, age, zip_area):
        s["pending_user"] = int(user)
        s["pending_age"] = float(age)
        s["pending_zip"] = float(zip_area)
        s["seen"][int(user)] += 1

    def mutate_pay(self, s, price, user):
        s["payments"].append(float(price))
        s["remaining"] = s["budget"] - math.fsum(s["payments"])
        s["last_price"] = float(price)
        s["won"][int(user)] += 1

    def mutate_click(self, s):
        s["last_clicked"] = True
        s["clicks"] += 1


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def parse_users(cfg: ExperimentConfig, themes: tuple[str, ...]) -> tuple[UserProfile, ...]:
    tree = cfg.env.get("users")
    if not isinstance(tree, Mapping) or not tree:
        raise ConfigError("at least one user profile is required", field="env.users")
    users = []
    for uid in sorted(tree):
        where = f"env.users.{uid}"
        prof = dict(tree[uid])
        age = prof.pop("age", 0.0)
        zip_area = prof.pop("zip_area", 0.0)
        missing = [t for t in themes if t not in prof]
        if missing:
            raise ConfigError(f"missing click probabilities for {missing}", field=where)
        unknown = sorted(set(prof) - set(themes))
        if unknown:
            raise ConfigError(f"unknown themes {unknown}", field=where)
        try:
            users.append(UserProfile(uid, {t: float(prof[t]) for t in themes}, float(age), float(zip_area)))
        except (SpecterError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), field=where) from None
    return tuple(users)


def build(cfg: ExperimentConfig) -> FsmEnvironmentDefinition:
    themes = tuple(env_param(cfg, "themes", list(DEFAULT_THEMES), list))
    users = parse_users(cfg, themes)
    bids = env_param(cfg, "bid_levels", list(DEFAULT_BIDS), list)
    if not bids or any(isinstance(b, bool) or not isinstance(b, (int, float)) or b < 0 for b in bids):
        raise ConfigError("bid_levels must be a nonempty list of nonnegative numbers", field="env.bid_levels")
    if sorted(bids) != list(bids):
        raise ConfigError("bid_levels must be ascending", field="env.bid_levels")
    params = {
        "click_value": float(env_param(cfg, "click_value", 1.0)),
        "budget_scale": float(env_param(cfg, "budget_scale", 20.0)),
    }
    if params["budget_scale"] <= 0:
        raise ConfigError("budget_scale must be positive", field="env.budget_scale")

    agents: dict[str, AgentSpec] = {
        PUBLISHER: AgentSpec(PUBLISHER, Publisher(users), Supertype(), "publisher"),
        EXCHANGE: AgentSpec(EXCHANGE, Exchange(), Supertype(), "exchange"),
    }
    advertisers = []
    for fam in cfg.families.values():
        theme = fam.attrs.get("theme")
        if theme not in themes:
            raise ConfigError(f"theme must be one of {list(themes)}, got {theme!r}", field=f"agent_family.{fam.name}.theme")
        require_params(fam, ["budget"])
        lo = fam.supertype.distribution("budget").bounds()[0]
        if lo < 0:
            raise ConfigError("budgets must be nonnegative", field=f"agent_family.{fam.name}.budget")
        behavior = Advertiser(theme, themes, users, tuple(float(b) for b in bids), params)
        for aid in fam.agent_ids():
            if aid in agents:
                raise ConfigError(f"duplicate agent id {aid!r}", field=f"agent_family.{fam.name}")
            agents[aid] = AgentSpec(aid, behavior, fam.supertype, fam.name)
            advertisers.append(aid)
    if not advertisers:
        raise ConfigError("at least one advertiser family is required", field="agent_family")

    edges = {(PUBLISHER, EXCHANGE): 1.0}
    for a in advertisers:
        edges[(EXCHANGE, a)] = 1.0
        edges[(PUBLISHER, a)] = 1.0
    net = network_spec(agents, edges, cfg)
    stages = {
        "impression": FsmStage("impression", frozenset({PUBLISHER}), {"ok": "bidding"}),
        "bidding": FsmStage("bidding", frozenset(advertisers), {"ok": "impression"}),
    }
    horizon = env_param(cfg, "horizon", 120, int)
    groups = {"publisher": [PUBLISHER], "exchange": [EXCHANGE], "advertisers": advertisers}
    return finish_definition(NAME, cfg, agents, net, stages, "impression", horizon, groups)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _advertisers(trace: EpisodeTrace):
    for aid in sorted(trace.final_states or {}):
        s = trace.final_states[aid]
        if isinstance(s, dict) and "payments" in s:
            yield aid, s


def agent_metrics(trace: EpisodeTrace) -> dict[str, dict[str, float]]:
    out = {}
    for aid, s in _advertisers(trace):
        m = {"spend": math.fsum(s["payments"]), "clicks": float(s["clicks"])}
        for u, (seen, won) in enumerate(zip(s["seen"], s["won"])):
            if seen:
                m[f"win_rate_u{u + 1}"] = won / seen
        out[aid] = m
    return out


def summarize(definition: FsmEnvironmentDefinition, traces: list[EpisodeTrace]) -> list[dict]:
    """Per-family (and per-agent) win rate per user, cost per click and spend.

    Win rate is auctions won over auctions entered, where entering means
    receiving the impression.  Cost per click is total spend over total
    clicks.  Undefined ratios (no impressions, no clicks) are omitted.
    """
    users = next(iter(a.behavior.users for a in definition.agents.values() if isinstance(a.behavior, Advertiser)))
    agg: dict[tuple[str, str], dict] = {}
    for tr in traces:
        for aid, s in _advertisers(tr):
            fam = definition.agents[aid].family
            for key in (("family", fam), ("agent", aid)):
                acc = agg.setdefault(key, {"seen": np.zeros(len(users)), "won": np.zeros(len(users)), "pay": [], "clicks": 0, "n": 0})
                acc["seen"] += s["seen"]
                acc["won"] += s["won"]
                acc["pay"].extend(s["payments"])
                acc["clicks"] += s["clicks"]
                acc["n"] += 1
    records = []
    for scope in ("family", "agent"):
        for (sc, entity), acc in sorted(agg.items()):
            if sc != scope:
                continue
            for u, prof in enumerate(users):
                seen = acc["seen"][u]
                if seen:
                    rate = float(acc["won"][u] / seen)
                    records.append({"scope": scope, "entity": entity, "metric": f"win_rate_{prof.id}", "value": rate})
            spend = math.fsum(acc["pay"])
            if acc["clicks"]:
                cpc = spend / acc["clicks"]
                records.append({"scope": scope, "entity": entity, "metric": "cost_per_click", "value": cpc})
            records.append({"scope": scope, "entity": entity, "metric": "spend", "value": spend / acc["n"]})
            records.append({"scope": scope, "entity": entity, "metric": "clicks", "value": acc["clicks"] / acc["n"]})
    return records
