"""Supply chain: shops restock from a factory and sell to customers.

A cycle is two stages.  In ``restock`` every shop orders a quantity from
the factory (which always delivers) and publishes its unit price to its
customers.  In ``sale`` every customer draws a demand, picks the cheapest
connected shop from the price views and orders; the shop fills what its
inventory allows.

Shops act only in ``restock``, so a cycle's profit

    unit_price * sales - restock_cost * restock - cost_of_carry * leftover

is settled and paid as the reward of the *next* restock step.  Episodes
end on a restock step so the last cycle is settled too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..agents import ActionSpace, AgentBehavior, AgentSpec, ObservationSpace, Supertype
from ..config import ExperimentConfig
from ..envs import EpisodeTrace, FsmEnvironmentDefinition, FsmStage
from ..errors import ConfigError
from .common import env_param, finish_definition, network_spec, require_params

NAME = "supply"
FACTORY = "factory"


@dataclass
class ShopState:
    inventory: int = 0
    last_orders_received: int = 0
    last_sales: int = 0
    last_leftover: int = 0
    cost_of_carry: float = 0.0
    unit_price: float = 1.0
    # current cycle
    restock: int = 0
    orders: int = 0
    sales: int = 0
    open_cycle: bool = False
    reward_due: float = 0.0
    # settled cycles, for metrics
    history: list[tuple[int, int, int, int, float]] = field(default_factory=list)


@dataclass(frozen=True)
class SupplyParams:
    unit_price: float = 1.0
    restock_cost: float = 0.5
    max_restock: int = 20
    demand_low: int = 1
    demand_high: int = 10
    obs_scale: float = 20.0
    coc_scale: float = 2.0


class Factory(AgentBehavior):
    scripted = True

    def handle_message(self, ctx, msg):
        if msg.payload.kind == "restock_order":
            ctx.send(msg.sender, "delivery", quantity=msg.payload["quantity"])


class Shop(AgentBehavior):
    def __init__(self, params: SupplyParams):
        self.p = params
        self.action_space = ActionSpace.ladder("restock", range(params.max_restock + 1))
        self.observation_space = ObservationSpace(
            (
                ("last_orders", 0.0, 1.0),
                ("last_sales", 0.0, 1.0),
                ("last_leftover", 0.0, 1.0),
                ("cost_of_carry", -1.0, 1.0),
            )
        )

    def init_state(self, agent, type_, rng):
        return ShopState(cost_of_carry=float(type_["cost_of_carry"]), unit_price=self.p.unit_price)

    @staticmethod
    def last_cycle(s: ShopState) -> tuple[int, int, int]:
        """Orders, sales and leftover of the latest sale, settled or not."""
        if s.open_cycle:
            return s.orders, s.sales, s.inventory
        return s.last_orders_received, s.last_sales, s.last_leftover

    def encode_observation(self, ctx):
        s: ShopState = ctx.state
        k = self.p.obs_scale
        orders, sales, leftover = self.last_cycle(s)
        return np.array(
            [
                orders / k,
                sales / k,
                leftover / k,
                # centred on the scale's midpoint so it does not alias the bias column
                2.0 * s.cost_of_carry / self.p.coc_scale - 1.0,
            ]
        )

    def decode_action(self, ctx, action):
        ctx.mutate("settle")
        if ctx.is_connected(FACTORY):
            ctx.send(FACTORY, "restock_order", quantity=int(action))

    def handle_message(self, ctx, msg):
        kind = msg.payload.kind
        if kind == "delivery":
            ctx.mutate("receive", quantity=int(msg.payload["quantity"]))
        elif kind == "order":
            s: ShopState = ctx.state
            sold_so_far = ctx.scratch.get("sold", 0)
            want = int(msg.payload["quantity"])
            sold = min(want, s.inventory - sold_so_far)
            ctx.scratch["sold"] = sold_so_far + sold
            ctx.mutate("sell", orders=want, sales=sold)
            ctx.send(msg.sender, "fill", quantity=sold)

    def compute_reward(self, ctx):
        return ctx.state.reward_due

    def generate_views(self, ctx):
        price = {"unit_price": ctx.state.unit_price}
        return {a: price for a in ctx.neighbors if a != FACTORY}

    # mutations -----------------------------------------------------------

    def mutate_settle(self, s: ShopState):
        if not s.open_cycle:
            s.reward_due = 0.0
            return
        leftover = s.inventory
        profit = s.unit_price * s.sales - self.p.restock_cost * s.restock - s.cost_of_carry * leftover
        s.history.append((s.restock, s.orders, s.sales, leftover, profit))
        s.last_orders_received, s.last_sales, s.last_leftover = s.orders, s.sales, leftover
        s.reward_due = profit
        s.restock = s.orders = s.sales = 0
        s.open_cycle = False

    def mutate_receive(self, s: ShopState, quantity: int):
        s.inventory += quantity
        s.restock = quantity
        s.open_cycle = True

    def mutate_sell(self, s: ShopState, orders: int, sales: int):
        s.orders += orders
        s.sales += sales
        s.inventory -= sales


class Customer(AgentBehavior):
    scripted = True

    def __init__(self, params: SupplyParams):
        self.p = params

    def init_state(self, agent, type_, rng):
        return {"demand": 0, "filled": 0}

    def choose_shop(self, ctx) -> str | None:
        prices = {o: v["unit_price"] for o, v in ctx.views().items() if v.get("unit_price") is not None}
        if not prices:
            return None
        return min(sorted(prices), key=lambda o: prices[o])

    def decode_action(self, ctx, action):
        demand = int(ctx.rng.integers(self.p.demand_low, self.p.demand_high + 1))
        ctx.mutate("add", demand=demand)
        shop = self.choose_shop(ctx)
        if shop is not None:
            ctx.send(shop, "order", quantity=demand)

    def handle_message(self, ctx, msg):
        if msg.payload.kind == "fill":
            ctx.mutate("add", filled=int(msg.payload["quantity"]))


# --------------------------------------------------------------------------
# Oracle
# --------------------------------------------------------------------------


def expected_cycle_profit(q: int, cost_of_carry: float, params: SupplyParams, inventory: int = 0) -> float:
    """Exact expected one-cycle profit of restocking ``q`` (demand enumerated)."""
    d = np.arange(params.demand_low, params.demand_high + 1)
    stock = inventory + q
    sales = np.minimum(d, stock)
    leftover = stock - sales
    profit = params.unit_price * sales - params.restock_cost * q - cost_of_carry * leftover
    return float(profit.mean())


def myopic_optimal_restock(cost_of_carry: float, params: SupplyParams = SupplyParams(), inventory: int = 0) -> int:
    values = [expected_cycle_profit(q, cost_of_carry, params, inventory) for q in range(params.max_restock + 1)]
    return int(np.argmax(values))


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


def params_from(cfg: ExperimentConfig) -> SupplyParams:
    p = SupplyParams(
        unit_price=float(env_param(cfg, "unit_price", 1.0)),
        restock_cost=float(env_param(cfg, "restock_cost", 0.5)),
        max_restock=env_param(cfg, "max_restock", 20, int),
        demand_low=env_param(cfg, "demand_low", 1, int),
        demand_high=env_param(cfg, "demand_high", 10, int),
        obs_scale=float(env_param(cfg, "obs_scale", 20.0)),
        coc_scale=float(env_param(cfg, "coc_scale", 2.0)),
    )
    if p.unit_price <= 0:
        raise ConfigError("unit_price must be positive", field="env.unit_price")
    if p.restock_cost < 0:
        raise ConfigError("restock_cost must be nonnegative", field="env.restock_cost")
    if p.max_restock < 0:
        raise ConfigError("max_restock must be nonnegative", field="env.max_restock")
    if not 0 <= p.demand_low <= p.demand_high:
        raise ConfigError("need 0 <= demand_low <= demand_high", field="env.demand_low")
    if p.obs_scale <= 0 or p.coc_scale <= 0:
        raise ConfigError("scales must be positive", field="env.obs_scale")
    return p


def build(cfg: ExperimentConfig) -> FsmEnvironmentDefinition:
    params = params_from(cfg)
    per_shop = env_param(cfg, "customers_per_shop", 1, int)
    if per_shop < 1:
        raise ConfigError("customers_per_shop must be >= 1", field="env.customers_per_shop")
    shop_behavior = Shop(params)
    customer_behavior = Customer(params)
    agents: dict[str, AgentSpec] = {FACTORY: AgentSpec(FACTORY, Factory(), Supertype(), "factory")}
    shops: list[str] = []
    for fam in cfg.families.values():
        require_params(fam, ["cost_of_carry"])
        if fam.supertype.distribution("cost_of_carry").bounds()[0] < 0:
            raise ConfigError("cost_of_carry must be nonnegative", field=f"agent_family.{fam.name}.cost_of_carry")
        for aid in fam.agent_ids():
            agents[aid] = AgentSpec(aid, shop_behavior, fam.supertype, fam.name)
            shops.append(aid)
    if not shops:
        raise ConfigError("at least one shop family is required", field="agent_family")
    customers = []
    edges = {}
    for i, shop in enumerate(shops):
        edges[(FACTORY, shop)] = 1.0
        for j in range(per_shop):
            cid = f"customer_{i * per_shop + j}"
            agents[cid] = AgentSpec(cid, customer_behavior, Supertype(), "customer")
            customers.append(cid)
            edges[(shop, cid)] = 1.0
    net = network_spec(agents, edges, cfg)
    stages = {
        "restock": FsmStage("restock", frozenset(shops), {"ok": "sale"}),
        "sale": FsmStage("sale", frozenset(customers), {"ok": "restock"}),
    }
    cycles = env_param(cfg, "cycles", 10, int)
    if cycles < 1:
        raise ConfigError("cycles must be >= 1", field="env.cycles")
    groups = {"shops": shops, "customers": customers, "factory": [FACTORY]}
    return finish_definition(NAME, cfg, agents, net, stages, "restock", 2 * cycles + 1, groups)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

METRIC_NAMES = ("restock", "orders", "sales", "missed_sales", "leftover", "revenue", "profit")


def _cycle_metrics(s: ShopState) -> dict[str, float]:
    if not s.history:
        return {}
    h = np.array(s.history, dtype=float)
    restock, orders, sales, leftover, profit = h.T
    return {
        "restock": float(restock.mean()),
        "orders": float(orders.mean()),
        "sales": float(sales.mean()),
        "missed_sales": float((orders - sales).mean()),
        "leftover": float(leftover.mean()),
        "revenue": float((s.unit_price * sales).mean()),
        "profit": float(profit.mean()),
    }


def agent_metrics(trace: EpisodeTrace) -> dict[str, dict[str, float]]:
    return {a: _cycle_metrics(s) for a, s in sorted((trace.final_states or {}).items()) if isinstance(s, ShopState)}


def restock_actions(trace: EpisodeTrace) -> dict[str, list[int]]:
    """Restock quantities of settled cycles per shop (the trailing restock is excluded)."""
    return {a: [int(c[0]) for c in s.history] for a, s in (trace.final_states or {}).items() if isinstance(s, ShopState)}


def summarize(definition: FsmEnvironmentDefinition, traces: list[EpisodeTrace]) -> list[dict]:
    """Episode-averaged per-cycle metrics per shop and per family, plus the modal restock."""
    per: dict[tuple[str, str], list[dict]] = {}
    modes: dict[tuple[str, str], list[int]] = {}
    for tr in traces:
        for aid, s in sorted((tr.final_states or {}).items()):
            if not isinstance(s, ShopState) or not s.history:
                continue
            fam = definition.agents[aid].family
            m = _cycle_metrics(s)
            for key in (("family", fam), ("agent", aid)):
                per.setdefault(key, []).append(m)
                modes.setdefault(key, []).extend(int(c[0]) for c in s.history)
    records = []
    for scope in ("family", "agent"):
        for (sc, entity), ms in sorted(per.items()):
            if sc != scope:
                continue
            for name in METRIC_NAMES:
                records.append({"scope": scope, "entity": entity, "metric": name, "value": float(np.mean([m[name] for m in ms]))})
            counts = np.bincount(modes[(sc, entity)])
            records.append({"scope": scope, "entity": entity, "metric": "modal_restock", "value": float(np.argmax(counts))})
    return records
