"""Scenarios, training / evaluation loops, metrics and lambda sweeps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .agent import AgentConfig, EcoAgent, RandomAgent
from .core import ConfigError, EnvironmentConfig, derive_seed
from .env import Environment, TrajectoryLogger

log = logging.getLogger(__name__)

SCENARIO_NAMES = ("saturated_log", "linear", "subgroup_init", "subgroup_slope")
DEFAULT_LAMBDAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_LRS = (0.1, 0.03, 0.01)


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    config: EnvironmentConfig
    description: str = ""

    def __post_init__(self):
        groups = self.config.provider_groups
        if self.name in ("subgroup_init", "subgroup_slope"):
            if len(groups) != 2:
                raise ConfigError(f"{self.name}: needs exactly two provider groups")
            a, b = groups
            fa, fb = a.satisfaction_fn, b.satisfaction_fn
            same_rest = {k: v for k, v in vars(a).items() if k != "satisfaction_fn"} == \
                {k: v for k, v in vars(b).items() if k != "satisfaction_fn"}
            if self.name == "subgroup_init":
                ok = same_rest and fa.kind == fb.kind and fa.coefficient == fb.coefficient
                if not ok or fa.offset_x0 == fb.offset_x0:
                    raise ConfigError("subgroup_init: groups must differ only in offset_x0")
            else:
                ok = same_rest and fa.kind == fb.kind == "linear" and fa.offset_x0 == fb.offset_x0
                if not ok or not fb.coefficient > fa.coefficient:
                    raise ConfigError("subgroup_slope: groups must be linear and differ only "
                                      "in slope, with group B steeper")

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "config": self.config.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        unknown = sorted(set(data) - {"name", "description", "config"})
        if unknown:
            raise ConfigError(f"<root>: unknown field(s) {unknown}")
        if "config" not in data:
            raise ConfigError("config: missing")
        try:
            cfg = EnvironmentConfig.from_dict(data["config"])
        except ConfigError as exc:
            raise ConfigError(f"config.{exc}") from exc
        return cls(str(data.get("name", "custom")), cfg, str(data.get("description", "")))


def load_scenario(name_or_path) -> Scenario:
    """Built-in scenario by name, or a scenario JSON file."""
    if str(name_or_path) in SCENARIO_NAMES:
        text = resources.files("ecosim.scenarios").joinpath(f"{name_or_path}.json").read_text()
    else:
        path = Path(name_or_path)
        if not path.suffix == ".json" or not path.exists():
            raise ConfigError(f"unknown scenario {name_or_path!r}; built-ins are "
                              f"{', '.join(SCENARIO_NAMES)}")
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return Scenario.from_dict(data)


# ---------------------------------------------------------------------------
# Episode logs and metrics
# ---------------------------------------------------------------------------


@dataclass
class EpisodeLog:
    initial_satisfaction: dict
    groups: dict  # provider id -> group index
    outcomes: list = field(default_factory=list)
    satisfaction_before: list = field(default_factory=list)  # per step: pid -> S
    viable: list = field(default_factory=list)  # viable count before step 0, then after each step
    final_satisfaction: dict = field(default_factory=dict)
    final_viable: dict = field(default_factory=dict)  # provider id -> bool


def decompose_provider_reward(log_: EpisodeLog):
    """Split each provider-step reward into drift, exposure and user-feedback shares.

    Each component of the raw feedback is mapped through the satisfaction
    increment in proportion to its share of the raw feedback. Returns a dict
    pid -> (T_c, 3) array with columns (drift, rec, feedback).
    """
    out: dict = {}
    for outcome in log_.outcomes:
        for pid, (drift, rec, fb) in outcome.feedback_components.items():
            r = outcome.provider_rewards[pid]
            p = drift + rec + fb
            if p == 0:
                row = (0.0, 0.0, 0.0)
            else:
                rec_part = rec / p * r
                fb_part = fb / p * r
                row = (r - rec_part - fb_part, rec_part, fb_part)
            out.setdefault(pid, []).append(row)
    return {pid: np.array(rows) for pid, rows in out.items()}


METRIC_FIELDS = (
    "user_accumulated_reward", "provider_accumulated_reward", "viable_providers",
    "user_reward_per_user", "provider_reward_per_provider",
    "rec_part", "feedback_part", "drift_part",
)


def episode_metrics(log_: EpisodeLog, num_groups: int, num_users: int) -> dict:
    user = sum(float(np.nansum(o.user_rewards)) for o in log_.outcomes)
    provider = sum(sum(o.provider_rewards.values()) for o in log_.outcomes)
    parts = decompose_provider_reward(log_)
    stacked = np.concatenate(list(parts.values())) if parts else np.zeros((0, 3))
    recs = np.zeros(num_groups)
    for o in log_.outcomes:
        for pid, items in o.recommendations.items():
            recs[log_.groups[pid]] += len(items)
    viable = np.zeros(num_groups)
    for pid, ok in log_.final_viable.items():
        viable[log_.groups[pid]] += ok
    n_prov = len(log_.initial_satisfaction)
    return {
        "user_accumulated_reward": user,
        "provider_accumulated_reward": provider,
        "viable_providers": float(log_.viable[-1]),
        "user_reward_per_user": user / num_users,
        "provider_reward_per_provider": provider / max(n_prov, 1),
        "drift_part": float(stacked[:, 0].sum()),
        "rec_part": float(stacked[:, 1].sum()),
        "feedback_part": float(stacked[:, 2].sum()),
        "viable_series": list(log_.viable),
        "group_recommendations": recs.tolist(),
        "group_viable": viable.tolist(),
    }


def run_episodes(agent, config: EnvironmentConfig, seeds: Sequence[int], mode: str = "sample",
                 on_step=None):
    """Roll out ``len(seeds)`` environments in lockstep; returns (logs, agent batch).

    ``on_step(env_index, actions, outcome)`` is called after every environment step.
    """
    envs = [Environment(config, s) for s in seeds]
    logs = [EpisodeLog(dict(e.initial_satisfaction), {p: v.group for p, v in e.providers.items()},
                       viable=[len(e.viable_provider_ids)]) for e in envs]
    obs = [e.observation() for e in envs]
    agent.begin(obs, seeds, mode)
    while not all(e.done for e in envs):
        live = [None if e.done else o for e, o in zip(envs, obs)]
        actions = agent.select(live)
        outcomes = [None] * len(envs)
        for i, env in enumerate(envs):
            if live[i] is None:
                continue
            logs[i].satisfaction_before.append(
                {p: env.providers[p].satisfaction for p in env.viable_provider_ids})
            obs[i], outcomes[i] = env.step(list(actions[i]))
            logs[i].outcomes.append(outcomes[i])
            logs[i].viable.append(len(env.viable_provider_ids))
            if on_step is not None:
                on_step(i, actions[i], outcomes[i])
        agent.observe(outcomes)
    for env, lg in zip(envs, logs):
        lg.final_satisfaction = {p: v.satisfaction for p, v in env.providers.items()}
        lg.final_viable = {p: v.viable for p, v in env.providers.items()}
    return logs, agent.finish()


def mean_se(values) -> tuple:
    """Column means and standard errors of a (n, ...) array; SE is None when n < 2."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return None, None
    m = v.mean(axis=0)
    se = v.std(axis=0, ddof=1) / math.sqrt(len(v)) if len(v) > 1 else None
    if v.ndim == 1:
        return float(m), (None if se is None else float(se))
    return m.tolist(), ([None] * len(m) if se is None else se.tolist())


def summarize(rows: Sequence[dict]) -> dict:
    """Mean and standard error of every metric over independent episodes."""
    out = {"n": len(rows)}
    for key in METRIC_FIELDS:
        out[f"{key}_mean"], out[f"{key}_se"] = mean_se([r[key] for r in rows])
    for key in ("group_recommendations", "group_viable"):
        out[f"{key}_mean"], out[f"{key}_se"] = mean_se([r[key] for r in rows])
    if rows:
        length = max(len(r["viable_series"]) for r in rows)
        out["viable_series_mean"] = np.mean(
            [_pad(r["viable_series"], length) for r in rows], axis=0).tolist()
    return out


def _pad(series, length=None):
    length = length or len(series)
    s = list(series)
    return s + [s[-1]] * (length - len(s))


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    agent: EcoAgent
    curves: list


def make_agent(scenario: Scenario, lam: float, learning_rate: float, seed: int,
               **overrides) -> EcoAgent:
    cfg = scenario.config
    ac = AgentConfig(num_topics=cfg.num_topics, lam=lam, learning_rate=learning_rate,
                     gamma_user=cfg.gamma_user, gamma_provider=cfg.gamma_provider,
                     seed=derive_seed(seed, "agent"), **overrides)
    return EcoAgent(ac)


def train(scenario: Scenario, lam: float, learning_rate: float, epochs: int, seed: int, *,
          envs_per_epoch: int = 10, patience: Optional[int] = 30, smoothing: int = 10,
          agent_overrides: Optional[dict] = None, progress=None) -> TrainResult:
    """On-policy training: each epoch rolls out fresh environments then updates once.

    Stops early when the smoothed realized objective has not improved for
    ``patience`` epochs (``None`` disables early stopping).
    """
    agent = make_agent(scenario, lam, learning_rate, seed, **(agent_overrides or {}))
    cfg = scenario.config
    curves = []
    best, best_epoch = -math.inf, 0
    for epoch in range(epochs):
        seeds = [derive_seed(seed, "train-env", epoch, i) for i in range(envs_per_epoch)]
        logs, batch = run_episodes(agent, cfg, seeds)
        stats_ = agent.update(batch)
        ms = [episode_metrics(lg, len(cfg.provider_groups), cfg.num_users) for lg in logs]
        u = float(np.mean([m["user_accumulated_reward"] for m in ms]))
        p = float(np.mean([m["provider_accumulated_reward"] for m in ms]))
        row = {"epoch": epoch, **stats_, "user_reward": u, "provider_reward": p,
               "viable_providers": float(np.mean([m["viable_providers"] for m in ms])),
               "realized_objective": (1 - lam) * u + lam * p}
        curves.append(row)
        if progress:
            progress(row)
        # plateau tracking starts once the actor is learning and the window is full
        start = agent.config.actor_warmup + smoothing - 1
        if patience is not None and epoch >= start:
            score = float(np.mean([c["realized_objective"] for c in curves[-smoothing:]]))
            if score > best:
                best, best_epoch = score, epoch
            elif epoch - best_epoch >= patience:
                log.info("early stop at epoch %d (plateau since %d)", epoch, best_epoch)
                break
    return TrainResult(agent, curves)


def evaluate(agent, scenario: Scenario, n_rollouts: int = 50, seed: int = 0, *,
             mode: str = "sample", batch_size: int = 10, collect_pairs: bool = True) -> dict:
    """Mean and standard error of rollout metrics over fresh evaluation environments."""
    cfg = scenario.config
    rows, pairs = [], []
    for start in range(0, n_rollouts, batch_size):
        idx = range(start, min(start + batch_size, n_rollouts))
        seeds = [derive_seed(seed, "eval-env", i) for i in idx]
        logs, batch = run_episodes(agent, cfg, seeds, mode)
        rows.extend(episode_metrics(lg, len(cfg.provider_groups), cfg.num_users) for lg in logs)
        if collect_pairs and isinstance(agent, EcoAgent):
            pairs.extend(_uplift_pairs(agent, batch, logs))
    result = summarize(rows)
    result["episodes"] = rows
    result["uplift_pairs"] = pairs
    return result


def write_trajectories(agent, scenario: Scenario, n_rollouts: int, seed: int, path,
                       mode: str = "sample", batch_size: int = 10):
    """Replay the evaluation episodes of ``evaluate`` and log every step as JSON lines."""
    with TrajectoryLogger(path) as logger:
        for start in range(0, n_rollouts, batch_size):
            idx = list(range(start, min(start + batch_size, n_rollouts)))
            seeds = [derive_seed(seed, "eval-env", i) for i in idx]
            run_episodes(agent, scenario.config, seeds, mode,
                         on_step=lambda j, a, out: logger.log(idx[j], a, out))


def _uplift_pairs(agent: EcoAgent, batch, logs) -> list:
    """(provider satisfaction before the step, predicted uplift) for every event."""
    out = []
    for rec, (fact, cf) in zip(batch.records, agent.uplifts(batch)):
        sat = logs[rec.env].satisfaction_before[rec.step]
        pids = rec.group_provider[rec.chosen_group]
        out.extend((sat[int(p)], float(u)) for p, u in zip(pids, fact - cf))
    return out


def uplift_satisfaction_correlation(pairs: Sequence) -> dict:
    """Pearson and Spearman coefficients; ``None`` when undefined."""
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(arr) < 2 or np.ptp(arr[:, 0]) == 0 or np.ptp(arr[:, 1]) == 0:
        return {"n": len(arr), "pearson": None, "spearman": None}
    return {"n": len(arr),
            "pearson": float(stats.pearsonr(arr[:, 0], arr[:, 1])[0]),
            "spearman": float(stats.spearmanr(arr[:, 0], arr[:, 1])[0])}


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


SCATTER_POINTS = 2000


def scatter_sample(pairs, limit: int = SCATTER_POINTS) -> list:
    """Evenly strided, order-preserving subsample of (satisfaction, uplift) pairs."""
    if len(pairs) <= limit:
        return [list(map(float, p)) for p in pairs]
    idx = np.linspace(0, len(pairs) - 1, limit).round().astype(int)
    return [list(map(float, pairs[i])) for i in idx]


@dataclass
class SweepResult:
    scenario: str
    group_names: list
    linear: bool = False
    rows: list = field(default_factory=list)  # one per (lambda, lr)
    selected: dict = field(default_factory=dict)  # lambda -> index into rows
    random: Optional[dict] = None

    def selected_rows(self) -> list:
        return [self.rows[self.selected[k]] for k in sorted(self.selected)]

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "group_names": list(self.group_names),
                "linear": self.linear, "rows": self.rows,
                "selected": [[k, v] for k, v in sorted(self.selected.items())],
                "random": self.random}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(d["scenario"], d["group_names"], d["linear"], d["rows"],
                   {float(k): int(v) for k, v in d["selected"]}, d["random"])


def evaluation_row(agent, scenario: Scenario, rollouts: int, seed: int, mode: str = "sample") -> dict:
    """Evaluation summary with the scatter data reduced to a bounded sample."""
    ev = evaluate(agent, scenario, rollouts, seed, mode=mode)
    ev.pop("episodes")
    pairs = ev.pop("uplift_pairs")
    ev["correlation"] = uplift_satisfaction_correlation(pairs)
    ev["scatter"] = scatter_sample(pairs)
    return ev


def _sweep_job(args):
    scenario, lam, lr, epochs, seed, rollouts, eval_seed, patience, mode = args
    res = train(scenario, lam, lr, epochs, seed, patience=patience)
    ev = evaluation_row(res.agent, scenario, rollouts, eval_seed, mode)
    obj = None
    if ev["n"]:
        obj = (1 - lam) * ev["user_accumulated_reward_mean"] \
            + lam * ev["provider_accumulated_reward_mean"]
    return {"lambda": lam, "lr": lr, "objective": obj, "epochs_run": len(res.curves),
            "curves": res.curves, **ev}


def group_names(scenario: Scenario) -> list:
    n = len(scenario.config.provider_groups)
    return ["A", "B"] if n == 2 else [str(i) for i in range(n)]


def lambda_sweep(scenario: Scenario, lambdas=DEFAULT_LAMBDAS, lrs=DEFAULT_LRS, *, epochs: int = 300,
                 seed: int = 0, rollouts: int = 50, patience: Optional[int] = 30,
                 threads: int = 1, include_random: bool = True,
                 mode: str = "sample") -> SweepResult:
    """Train and evaluate every (lambda, lr); keep the best lr per lambda by realized objective.

    Evaluation environments are shared across the grid (same seed), so rows
    differ only through the trained policy.
    """
    if len(lambdas) == 0 or len(lrs) == 0:
        raise ValueError("lambda and learning-rate grids must be nonempty")
    grid = [(float(l), float(r)) for l in lambdas for r in lrs]
    eval_seed = derive_seed(seed, "eval")
    jobs = [(scenario, l, r, epochs, derive_seed(seed, "sweep", i), rollouts, eval_seed, patience,
             mode)
            for i, (l, r) in enumerate(grid)]
    if threads > 1:
        from joblib import Parallel, delayed
        rows = Parallel(n_jobs=threads, backend="threading")(delayed(_sweep_job)(j) for j in jobs)
    else:
        rows = [_sweep_job(j) for j in jobs]
    result = SweepResult(scenario.name, group_names(scenario),
                         all(g.satisfaction_fn.kind == "linear"
                             for g in scenario.config.provider_groups), list(rows))
    for i, row in enumerate(result.rows):
        cur = result.selected.get(row["lambda"])
        if cur is None or _better(row["objective"], result.rows[cur]["objective"]):
            result.selected[row["lambda"]] = i
    if include_random:
        result.random = evaluation_row(RandomAgent(), scenario, rollouts, eval_seed, mode)
    return result


def _better(a, b) -> bool:
    if a is None:
        return False
    return b is None or a > b
