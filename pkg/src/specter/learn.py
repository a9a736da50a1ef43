"""Softmax-linear policies trained with episodic REINFORCE and an EMA baseline.

Agents of one family can share a single parameter set: their trajectories
are pooled and a single averaged update is applied per iteration.  Because
observations carry the agent's normalized Type, one shared policy can still
condition on budget, cost of carry, etc.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .envs import EpisodeTrace, FsmEnvironmentDefinition, run_episode
from .errors import DimensionMismatch, SpecterError
from .net import AgentId
from .rng import episode_rng

MAGIC = b"SPCTR1"


class LinearSoftmaxPolicy:
    """pi(a | o) = softmax(W [o; 1])_a with W of shape (actions, features + 1)."""

    def __init__(self, weights: np.ndarray):
        w = np.array(weights, dtype=float)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise DimensionMismatch(f"weights must be a nonempty matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise SpecterError("policy weights must be finite")
        self.weights = w

    @classmethod
    def zeros(cls, n_actions: int, obs_dim: int) -> "LinearSoftmaxPolicy":
        return cls(np.zeros((n_actions, obs_dim + 1)))

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def n_params(self) -> int:
        return self.weights.size

    def copy(self) -> "LinearSoftmaxPolicy":
        return LinearSoftmaxPolicy(self.weights.copy())

    def logits(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (self.obs_dim,):
            raise DimensionMismatch(f"observation length {obs.shape} incompatible with {self.weights.shape} weights")
        return self.weights[:, :-1] @ obs + self.weights[:, -1]

    def probabilities(self, obs: np.ndarray) -> np.ndarray:
        return _softmax(self.logits(obs))

    def act(self, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
        if greedy:
            # np.argmax returns the lowest index among ties
            return int(np.argmax(self.logits(obs)))
        p = self.probabilities(obs)
        idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        return min(idx, self.n_actions - 1)

    def __eq__(self, other) -> bool:
        return isinstance(other, LinearSoftmaxPolicy) and np.array_equal(self.weights, other.weights)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def action_probabilities(p: LinearSoftmaxPolicy, obs: np.ndarray) -> np.ndarray:
    return p.probabilities(obs)


def act(p: LinearSoftmaxPolicy, obs: np.ndarray, rng: np.random.Generator, greedy: bool = False) -> int:
    return p.act(obs, rng, greedy)


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, D)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if len(self.actions) == 0:
            raise SpecterError("trajectory is empty")
        self.observations = obs.reshape(len(self.actions), -1)
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if not (len(self.observations) == len(self.actions) == len(self.rewards)):
            raise DimensionMismatch("trajectory columns differ in length")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def _check_traj(p: LinearSoftmaxPolicy, traj: Trajectory) -> None:
    if len(traj) == 0:
        raise SpecterError("trajectory is empty")
    if traj.observations.shape[1] != p.obs_dim:
        raise DimensionMismatch(
            f"trajectory observations have {traj.observations.shape[1]} features, policy expects {p.obs_dim}"
        )


def _features(obs: np.ndarray) -> np.ndarray:
    return np.hstack([obs, np.ones((len(obs), 1))])


def _batch_probs(p: LinearSoftmaxPolicy, x: np.ndarray) -> np.ndarray:
    z = x @ p.weights.T
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_gradient(
    p: LinearSoftmaxPolicy,
    trajectory: Trajectory,
    gamma: float,
    baseline: float = 0.0,
    advantages: np.ndarray | None = None,
) -> np.ndarray:
    """Likelihood-ratio gradient  sum_t (G_t - b) grad log pi(a_t | o_t).

    For a softmax-linear policy grad_W log pi(a | o) = (e_a - pi(.|o)) x^T
    with x = [o; 1].  ``advantages`` overrides (G_t - b) when supplied.
    """
    _check_traj(p, trajectory)
    adv = discounted_returns(trajectory.rewards, gamma) - baseline if advantages is None else advantages
    x = _features(trajectory.observations)
    probs = _batch_probs(p, x)
    coef = -probs
    coef[np.arange(len(trajectory)), trajectory.actions] += 1.0
    coef *= np.asarray(adv)[:, None]
    return coef.T @ x


def surrogate_objective(p: LinearSoftmaxPolicy, trajectory: Trajectory, gamma: float, baseline: float = 0.0) -> float:
    """sum_t (G_t - b) log pi(a_t | o_t); its gradient is :func:`policy_gradient`."""
    _check_traj(p, trajectory)
    adv = discounted_returns(trajectory.rewards, gamma) - baseline
    x = _features(trajectory.observations)
    z = x @ p.weights.T
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return float(np.sum(adv * logp[np.arange(len(trajectory)), trajectory.actions]))


# --------------------------------------------------------------------------
# Mapping agents to policies
# --------------------------------------------------------------------------


@dataclass
class PolicyMapping:
    assignment: dict[AgentId, str]
    shared: bool = True

    def agents_of(self, policy_id: str) -> list[AgentId]:
        return sorted(a for a, p in self.assignment.items() if p == policy_id)

    @property
    def policy_ids(self) -> list[str]:
        return sorted(set(self.assignment.values()))

    def __getitem__(self, agent: AgentId) -> str:
        return self.assignment[agent]

    def __contains__(self, agent: AgentId) -> bool:
        return agent in self.assignment

    def get(self, agent, default=None):
        return self.assignment.get(agent, default)


def make_mapping(
    definition: FsmEnvironmentDefinition,
    shared: bool = True,
    family_policy: Mapping[str, str] | None = None,
) -> PolicyMapping:
    """Assign each learning agent a policy id.

    Shared: one id per family (``family_policy`` may rename a family's id so
    several families reuse one policy).  Independent: one id per agent.
    """
    family_policy = family_policy or {}
    assignment = {}
    for aid in definition.learning_agents:
        fam = definition.agents[aid].family or aid
        assignment[aid] = family_policy.get(fam, fam) if shared else aid
    return PolicyMapping(assignment, shared)


def init_policies(definition: FsmEnvironmentDefinition, mapping: PolicyMapping) -> dict[str, LinearSoftmaxPolicy]:
    policies: dict[str, LinearSoftmaxPolicy] = {}
    for pid in mapping.policy_ids:
        shapes = {
            (len(definition.agents[a].behavior.action_space), definition.agents[a].augmented_dim)
            for a in mapping.agents_of(pid)
        }
        if len(shapes) != 1:
            raise DimensionMismatch(f"agents sharing policy {pid!r} have different spaces: {sorted(shapes)}")
        n_actions, dim = shapes.pop()
        policies[pid] = LinearSoftmaxPolicy.zeros(n_actions, dim)
    return policies


def trainable_scalars(policies: Mapping[str, LinearSoftmaxPolicy]) -> int:
    return sum(p.n_params for p in policies.values())


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    episodes_per_iteration: int = 8
    iterations: int = 100
    learning_rate: float = 0.05
    discount: float = 0.99
    baseline_decay: float = 0.9
    seed: int = 0
    normalize_advantages: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise SpecterError("learning_rate must be > 0")
        if self.episodes_per_iteration < 1:
            raise SpecterError("episodes_per_iteration must be >= 1")
        if self.iterations < 0:
            raise SpecterError("iterations must be >= 0")
        if not 0.0 <= self.discount <= 1.0:
            raise SpecterError("discount must lie in [0, 1]")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise SpecterError("baseline_decay must lie in [0, 1)")


AgentMetricsFn = Callable[[EpisodeTrace], Mapping[AgentId, Mapping[str, float]]]


def trajectories_from_trace(trace: EpisodeTrace) -> dict[AgentId, Trajectory]:
    obs: dict[AgentId, list] = {}
    acts: dict[AgentId, list] = {}
    rews: dict[AgentId, list] = {}
    for rec in trace.records:
        if not rec.observations:
            continue
        for aid, o in rec.observations.items():
            obs.setdefault(aid, []).append(o)
            acts.setdefault(aid, []).append(rec.actions[aid])
            rews.setdefault(aid, []).append(rec.rewards[aid])
    return {a: Trajectory(np.array(obs[a]), acts[a], rews[a]) for a in sorted(obs)}


@dataclass
class Rollout:
    trajectories: dict[AgentId, Trajectory]
    metrics: dict[AgentId, dict[str, float]]


def _rollout(args) -> Rollout:
    definition, policies, mapping, seed, iteration, episode, metrics_fn = args
    rng = episode_rng(seed, iteration, episode)
    trace = run_episode(definition, policies, mapping, rng, keep_observations=True)
    metrics = {a: dict(m) for a, m in metrics_fn(trace).items()} if metrics_fn else {}
    return Rollout(trajectories_from_trace(trace), metrics)


class _Pool:
    """Runs rollouts inline or on worker processes; results keep submission order."""

    def __init__(self, workers: int):
        self.workers = max(1, int(workers))
        self._exec = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, fn, items: Sequence) -> list:
        if self._exec is None:
            return [fn(x) for x in items]
        chunk = max(1, math.ceil(len(items) / (self.workers * 2)))
        return list(self._exec.map(fn, items, chunksize=chunk))

    def close(self) -> None:
        if self._exec is not None:
            self._exec.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainResult:
    policies: dict[str, LinearSoftmaxPolicy]
    log: list[dict] = field(default_factory=list)
    baselines: dict[str, float] = field(default_factory=dict)

    def returns(self, policy_id: str | None = None) -> np.ndarray:
        """Per-iteration mean return for one policy, or the agent-weighted mean over all."""
        iters = sorted({r["iteration"] for r in self.log})
        out = []
        for it in iters:
            rows = [r for r in self.log if r["iteration"] == it and (policy_id is None or r["policy_id"] == policy_id)]
            w = np.array([r["agents"] for r in rows], dtype=float)
            v = np.array([r["mean_return"] for r in rows], dtype=float)
            out.append(float((w * v).sum() / w.sum()))
        return np.array(out)


def update_policies(
    policies: Mapping[str, LinearSoftmaxPolicy],
    pooled: Mapping[str, list[Trajectory]],
    baselines: dict[str, float],
    cfg: TrainConfig,
) -> None:
    """One averaged gradient-ascent step per policy, then move its EMA baseline."""
    for pid in sorted(pooled):
        trajs = pooled[pid]
        if not trajs:
            continue
        pol = policies[pid]
        rets = [discounted_returns(t.rewards, cfg.discount) for t in trajs]
        flat = np.concatenate(rets)
        b = baselines.get(pid, float(flat.mean()))
        advs = [r - b for r in rets]
        if cfg.normalize_advantages:
            std = float(np.concatenate(advs).std())
            if std > 1e-12:
                advs = [a / std for a in advs]
        grad = np.zeros_like(pol.weights)
        for t, a in zip(trajs, advs):
            grad += policy_gradient(pol, t, cfg.discount, advantages=a)
        pol.weights += cfg.learning_rate * grad / len(trajs)
        baselines[pid] = cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * float(flat.mean())


def train(
    definition: FsmEnvironmentDefinition,
    mapping: PolicyMapping,
    cfg: TrainConfig,
    metrics_fn: AgentMetricsFn | None = None,
    workers: int = 1,
    policies: Mapping[str, LinearSoftmaxPolicy] | None = None,
    progress: Callable[[int, list[dict]], None] | None = None,
) -> TrainResult:
    """Bulk-synchronous training: roll out a batch, pool per policy, update, repeat.

    Episode ``j`` of iteration ``i`` always uses the stream derived from
    ``(cfg.seed, i, j)``, so results do not depend on ``workers``.
    """
    pols = {k: v.copy() for k, v in policies.items()} if policies else init_policies(definition, mapping)
    result = TrainResult(pols)
    with _Pool(workers) as pool:
        for it in range(cfg.iterations):
            jobs = [
                (definition, pols, mapping.assignment, cfg.seed, it, ep, metrics_fn)
                for ep in range(cfg.episodes_per_iteration)
            ]
            rollouts = pool.map(_rollout, jobs)
            pooled: dict[str, list[Trajectory]] = {pid: [] for pid in pols}
            for ro in rollouts:
                for aid, traj in ro.trajectories.items():
                    pooled[mapping[aid]].append(traj)
            rows = _iteration_rows(it, rollouts, mapping, cfg.episodes_per_iteration)
            update_policies(pols, pooled, result.baselines, cfg)
            result.log.extend(rows)
            if progress is not None:
                progress(it, rows)
    return result


def _iteration_rows(it: int, rollouts: list[Rollout], mapping: PolicyMapping, episodes: int) -> list[dict]:
    rows = []
    for pid in mapping.policy_ids:
        agents = mapping.agents_of(pid)
        totals = [ro.trajectories[a].total_reward for ro in rollouts for a in agents if a in ro.trajectories]
        row = {
            "iteration": it,
            "policy_id": pid,
            "mean_return": float(np.mean(totals)) if totals else 0.0,
            "episodes": episodes,
            "agents": len(agents),
        }
        names = sorted({k for ro in rollouts for a in agents for k in ro.metrics.get(a, {})})
        for name in names:
            vals = [ro.metrics[a][name] for ro in rollouts for a in agents if name in ro.metrics.get(a, {})]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            row[name] = float(np.mean(vals)) if vals else float("nan")
        rows.append(row)
    return rows


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing means: element ``i`` averages ``values[i : i + window]``."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise SpecterError("window must be >= 1")
    if len(v) < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def iterations_to_converge(
    returns: Sequence[float], tol: float = 0.05, window: int = 10, smooth: int = 1
) -> int | None:
    """First iteration from which ``window`` consecutive values stay within
    ``tol`` (relative) of the final value; None if no such run exists.

    With ``smooth > 1`` the test runs on the ``smooth``-iteration moving
    average, and the returned index is the last iteration of the first
    averaged block (the point at which convergence is observable).
    """
    r = moving_average(returns, smooth) if smooth > 1 else np.asarray(returns, dtype=float)
    if len(r) < window:
        return None
    final = r[-1]
    scale = abs(final) if abs(final) > 1e-12 else 1.0
    ok = np.abs(r - final) <= tol * scale
    for i in range(len(r) - window + 1):
        if ok[i : i + window].all():
            return i + smooth - 1
    return None


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def evaluate(
    definition: FsmEnvironmentDefinition,
    policies: Mapping[str, LinearSoftmaxPolicy],
    mapping: PolicyMapping | Mapping[AgentId, str],
    episodes: int,
    seed: int,
    summarize: Callable[[FsmEnvironmentDefinition, list[EpisodeTrace]], list[dict]] | None = None,
    keep_traces: bool = False,
    greedy: bool = True,
) -> tuple[list[dict], list[EpisodeTrace]]:
    """Rollouts with no parameter updates, greedy unless ``greedy=False``
    (then actions are sampled from the policies).

    Returns metric records ``{scope, entity, metric, value}`` and, if
    requested, the traces.  Without an environment summarizer the records
    hold mean return per agent and per family.
    """
    assignment = mapping.assignment if isinstance(mapping, PolicyMapping) else dict(mapping)
    traces = [
        run_episode(definition, policies, assignment, episode_rng(seed, 0, ep), greedy=greedy)
        for ep in range(episodes)
    ]
    if not traces:
        return [], []
    summary = summarize(definition, traces) if summarize else mean_return_summary(definition, traces)
    return summary, traces if keep_traces else []


def mean_return_summary(definition: FsmEnvironmentDefinition, traces: list[EpisodeTrace]) -> list[dict]:
    per_agent: dict[AgentId, list[float]] = {}
    for tr in traces:
        totals: dict[AgentId, float] = {}
        for rec in tr.records:
            for a, r in rec.rewards.items():
                totals[a] = totals.get(a, 0.0) + r
        for a, v in totals.items():
            per_agent.setdefault(a, []).append(v)
    records = []
    families: dict[str, list[float]] = {}
    for a in sorted(per_agent):
        if definition.agents[a].behavior.scripted:
            continue
        m = float(np.mean(per_agent[a]))
        records.append({"scope": "agent", "entity": a, "metric": "mean_return", "value": m})
        families.setdefault(definition.agents[a].family or a, []).append(m)
    for fam in sorted(families):
        records.append({"scope": "family", "entity": fam, "metric": "mean_return", "value": float(np.mean(families[fam]))})
    return records


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def dump_policy(p: LinearSoftmaxPolicy) -> bytes:
    a, f = p.weights.shape
    return MAGIC + struct.pack("<II", a, f) + np.ascontiguousarray(p.weights, dtype="<f8").tobytes()


def load_policy_bytes(data: bytes) -> LinearSoftmaxPolicy:
    head = len(MAGIC) + 8
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise SpecterError("not a policy file (bad magic)")
    a, f = struct.unpack("<II", data[len(MAGIC) : head])
    body = data[head:]
    if len(body) != 8 * a * f:
        raise SpecterError(f"policy file body has {len(body)} bytes, expected {8 * a * f}")
    return LinearSoftmaxPolicy(np.frombuffer(body, dtype="<f8").reshape(a, f).astype(float))


def save_policy(path: str | Path, p: LinearSoftmaxPolicy) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), dump_policy(p))


def load_policy(path: str | Path) -> LinearSoftmaxPolicy:
    return load_policy_bytes(Path(path).read_bytes())
