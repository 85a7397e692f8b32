"""Self-checks shared by the ``selftest`` command and the test-suite.

Gradient checks compare every shipped model's analytic gradients with
central differences; the uplift check rolls a tiny environment out along
three branches and confirms that only the recommended provider's return moves.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from .agent import AgentConfig, EcoAgent
from .core import EnvironmentConfig, ProviderGroup, SatisfactionFn, UserParams, derive_seed
from .env import Environment, discounted_return


def small_config(**overrides) -> EnvironmentConfig:
    base = dict(num_topics=4, num_users=6, num_providers=3, initial_docs_per_provider=4,
                horizon=4, provider_groups=[ProviderGroup(size=3)])
    base.update(overrides)
    return EnvironmentConfig(**base).validate()


def sample_batch(agent: EcoAgent, config: EnvironmentConfig, seed: int, n_envs: int = 2):
    from .harness import run_episodes  # local: harness imports this module's neighbours

    seeds = [derive_seed(seed, "check-env", i) for i in range(n_envs)]
    return run_episodes(agent, config, seeds)[1]


def model_losses(agent: EcoAgent, batch) -> dict:
    """Loss closures over a parameter dict for the user, provider and actor models."""
    ux, utop, uq, umask = agent._user_arrays(batch)
    _, px, pq, pmask = agent._provider_arrays(batch)
    returns = agent.user_returns(batch)
    uplift = agent.uplifts(batch)
    lam = agent.config.lam
    rewards = [(1 - lam) * q + lam * (f - c) for q, (f, c) in zip(returns, uplift)]
    return {
        "user": lambda grad: agent.utility_loss("user", ux, uq, umask, utop, grad=grad),
        "provider": lambda grad: agent.utility_loss("provider", px, pq, pmask, grad=grad),
        "actor": lambda grad: agent.actor_loss(batch.records, rewards, grad=grad),
    }


def generic_agent(config: EnvironmentConfig, seed: int, lam: float = 0.5) -> EcoAgent:
    """Randomly initialised agent with small random biases.

    Biases start at zero, which puts ReLU units fed by an all-zero hidden
    state exactly on their kink where central differences are meaningless.
    """
    agent = EcoAgent(AgentConfig(num_topics=config.num_topics, lam=lam, seed=seed))
    rng = np.random.default_rng(derive_seed(seed, "check-bias"))
    for name, value in agent.params.items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            value[:] = rng.uniform(-0.1, 0.1, size=value.shape)
    return agent


def gradient_check(seed: int, tolerance: float = 1e-4, max_per_tensor: int = 6) -> dict:
    """Finite-difference check of the user, provider and actor models at a random point."""
    config = small_config()
    agent = generic_agent(config, seed)
    batch = sample_batch(agent, config, seed)
    reports = {}
    for group, make in model_losses(agent, batch).items():
        tape, loss = make(True)
        grads = tape.backward(loss)
        params = agent.group_params(group)

        def value(p, make=make):
            saved = {k: agent.params[k] for k in p}
            agent.params.update(p)
            try:
                return float(make(False)[1].value)
            finally:
                agent.params.update(saved)

        reports[group] = nn.finite_difference_check(
            value, params, grads, tolerance=tolerance, max_per_tensor=max_per_tensor,
            rng=np.random.default_rng(seed))
    return reports


@dataclass
class AdditivityResult:
    max_abs_diff: float
    branch_returns: dict  # branch -> {provider id: discounted return}

    def passed(self, tol: float = 1e-9) -> bool:
        return self.max_abs_diff <= tol


def additivity_config() -> EnvironmentConfig:
    """Two providers and one user whose preference never drifts.

    A drifting user would carry the first recommendation into every later
    reward, coupling providers through the user rather than through each other.
    """
    group = ProviderGroup(size=1, no_rec_drift=-0.3, exposure_sensitivity=0.5,
                          feedback_sensitivity=0.5, preference_drift=0.1,
                          satisfaction_fn=SatisfactionFn("saturated_log"),
                          viability_threshold=-0.8, creation_rate=2.0, quality_std=0.0)
    return EnvironmentConfig(num_topics=3, num_users=1, num_providers=2,
                             initial_docs_per_provider=2, horizon=6,
                             user_params=UserParams((0.2, 0.2), (0.0, 0.0)),
                             provider_groups=[group, dataclasses.replace(group)]).validate()


def _rollout(config, seed, first_action, gamma):
    env = Environment(config, seed)
    rewards = {p: [] for p in env.providers}
    action = first_action
    while not env.done:
        _, out = env.step([action])
        for p, r in out.provider_rewards.items():
            rewards[p].append(r)
        # fixed future schedule: providers take turns, skipped once they have left
        target = env.providers[env.t % len(env.providers)]
        action = int(min(target.documents)) if target.viable else None
    return {p: float(discounted_return(r, gamma)[0]) if r else 0.0 for p, r in rewards.items()}


def uplift_additivity(seed: int = 0, config: EnvironmentConfig | None = None) -> AdditivityResult:
    """Sum over providers of the return change equals the recommended provider's change."""
    config = config or additivity_config()
    env = Environment(config, seed)
    first = {}
    for p in sorted(env.providers):
        first[p] = int(env.providers[p].documents[0])
    gamma = config.gamma_provider
    none = _rollout(config, seed, None, gamma)
    branches = {"none": none}
    worst = 0.0
    for p, doc in first.items():
        q = _rollout(config, seed, doc, gamma)
        branches[f"provider{p}"] = q
        total = sum(q.values()) - sum(none.values())
        own = q[p] - none[p]
        worst = max(worst, abs(total - own))
    return AdditivityResult(worst, branches)


def _bandit_gradient(theta: np.ndarray, actions: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """REINFORCE gradient of the expected reward, through the autodiff tape."""
    tape = nn.Tape()
    z = tape.param("theta", theta[None, :].repeat(len(actions), axis=0))
    logp = nn.pick(z, actions) - nn.logsumexp_rows(z)
    loss = nn.total(logp * (-rewards / len(actions)))
    return -tape.backward(loss)["theta"].sum(axis=0)


def bandit_setup(seed: int):
    rng = np.random.default_rng(derive_seed(seed, "bandit"))
    theta = rng.normal(0.0, 0.5, size=3)
    values = np.array([1.0, -0.5, 2.0])
    return theta, values, rng


def score_function_check(seed: int = 0, n: int = 100_000):
    """(estimate, analytic) gradient of sum_a pi(a) R(a) on a one-step three-arm bandit."""
    theta, values, rng = bandit_setup(seed)
    pi = nn.softmax(theta)
    actions = rng.choice(3, size=n, p=pi)
    estimate = _bandit_gradient(theta, actions, values[actions])
    analytic = pi * (values - pi @ values)
    return estimate, analytic


def baseline_drop_check(seed: int = 0, n: int = 100_000, constant: float = 5.0):
    """Mean gradients with and without a constant added to every reward.

    Both estimates reuse the same samples; returns (plain, shifted, standard
    error of their difference per coordinate).
    """
    theta, values, rng = bandit_setup(seed)
    pi = nn.softmax(theta)
    actions = rng.choice(3, size=n, p=pi)
    r = values[actions]
    plain = _bandit_gradient(theta, actions, r)
    shifted = _bandit_gradient(theta, actions, r + constant)
    # per-sample difference is constant * (onehot(a) - pi)
    diff = constant * (np.eye(3)[actions] - pi)
    se = diff.std(axis=0, ddof=1) / np.sqrt(n)
    return plain, shifted, se
