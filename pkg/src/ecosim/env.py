"""Episodic user / provider ecosystem: reset, step and the per-entity update rules."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigError,
    Document,
    EnvironmentConfig,
    ProviderState,
    RngStream,
    UserState,
    sample_truncated_normal,
    sample_unit_preference,
    satisfaction_value,
)

SCHEMA_VERSION = 1
TOPIC_EPS = 1e-6


class InvalidActionError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Per-entity dynamics
# ---------------------------------------------------------------------------


def user_reward(user: UserState, doc: Document) -> float:
    eta = user.quality_sensitivity
    return float((1.0 - eta) * user.preference[doc.topic] + eta * doc.quality)


def user_rewards(prefs: np.ndarray, eta: np.ndarray, topics: np.ndarray,
                 qualities: np.ndarray) -> np.ndarray:
    """Vectorized ``user_reward`` over rows of ``prefs``."""
    relevance = prefs[np.arange(len(topics)), topics]
    return (1.0 - eta) * relevance + eta * qualities


def _renormalize(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(new, axis=-1, keepdims=True)
    degenerate = norms < 1e-12
    safe = np.where(degenerate, 1.0, norms)
    return np.where(degenerate, old, new / safe)


def shift_preferences(prefs: np.ndarray, drift: np.ndarray, topics: np.ndarray,
                      rewards: np.ndarray) -> np.ndarray:
    """v <- normalize(v + drift * r * onehot(topic)), rowwise."""
    new = prefs.copy()
    new[np.arange(len(topics)), topics] += drift * rewards
    return _renormalize(new, prefs)


def update_user(user: UserState, doc: Document, r_u: float) -> UserState:
    pref = shift_preferences(user.preference[None, :], np.array([user.preference_drift]),
                             np.array([doc.topic]), np.array([r_u]))[0]
    return dataclasses.replace(user, preference=pref)


def provider_feedback(provider: ProviderState, m: int, sum_user_reward: float) -> float:
    if m < 0:
        raise ValueError("recommendation count must be >= 0")
    return (provider.no_rec_drift + provider.exposure_sensitivity * m
            + provider.feedback_sensitivity * sum_user_reward)


def topic_distribution(preference: np.ndarray, eps: float = TOPIC_EPS) -> np.ndarray:
    w = np.maximum(preference, 0.0) + eps
    return w / w.sum()


def provider_topic_distribution(provider: ProviderState) -> np.ndarray:
    return topic_distribution(provider.preference)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def create_documents(provider: ProviderState, n: int, rng: RngStream,
                     next_doc_id: int, step: int) -> list:
    if n <= 0:
        return []
    p = provider_topic_distribution(provider)
    topics = rng.choice(len(p), p=p, size=n)
    docs = []
    for i, topic in enumerate(topics):
        q = sample_truncated_normal(rng, provider.quality_mean, provider.quality_std, -1.0, 1.0)
        docs.append(Document(next_doc_id + i, int(topic), q, provider.id, step))
    return docs


def update_provider(provider: ProviderState, recs: Sequence, rng: RngStream, *,
                    next_doc_id: int = 0, step: int = 0):
    """Apply one step of exposure/feedback to a viable provider.

    ``recs`` is a sequence of ``(Document, user_reward)`` pairs. Returns
    ``(new_state, provider_reward, new_documents, left)``.
    """
    if not provider.viable:
        raise ValueError(f"provider {provider.id} is not viable")
    m = len(recs)
    rewards = np.array([r for _, r in recs], dtype=float)
    sum_r = float(rewards.sum()) if m else 0.0
    p = provider_feedback(provider, m, sum_r)
    acc = provider.accumulated_feedback + p
    sat = satisfaction_value(provider.satisfaction_fn, acc)
    r_c = sat - provider.satisfaction

    pref = provider.preference
    if m and provider.preference_drift:
        shift = np.zeros_like(pref)
        for (doc, r) in recs:
            shift[doc.topic] += r
        pref = _renormalize(pref + provider.preference_drift * shift, pref)

    left = bool(sat < provider.viability_threshold)
    state = dataclasses.replace(provider, accumulated_feedback=acc, satisfaction=sat,
                                preference=pref, viable=not left)
    new_docs = []
    if r_c > 0 and not left:
        new_docs = create_documents(state, _round_half_up(provider.creation_rate * r_c),
                                    rng, next_doc_id, step)
        state = dataclasses.replace(
            state, documents=state.documents + tuple(d.id for d in new_docs))
    return state, r_c, new_docs, left


def discounted_return(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Q_t = sum_{t' >= t} gamma^(t'-t) r_t', truncated at the end of the sequence."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def discounted_return_matrix(rewards: np.ndarray, gamma: float, mask=None) -> np.ndarray:
    """Row-wise ``discounted_return`` over a (T, N) array, time along axis 0."""
    r = np.asarray(rewards, dtype=float)
    if mask is not None:
        r = np.where(mask, r, 0.0)
    out = np.empty_like(r)
    acc = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def step_features(recs: Sequence, K: int, inventory: int) -> np.ndarray:
    """Per-step provider summary: [m, sum of rewards, reward-weighted topic bag (K), inventory].

    The bag is normalised by the summed absolute reward so it stays bounded
    when positive and negative feedback nearly cancel.
    """
    feat = np.zeros(K + 3)
    feat[0] = len(recs)
    feat[K + 2] = inventory
    if recs:
        topics = np.array([d.topic for d, _ in recs])
        rewards = np.array([r for _, r in recs], dtype=float)
        feat[1] = rewards.sum()
        denom = np.abs(rewards).sum()
        if denom > 0:
            np.add.at(feat, 2 + topics, rewards / denom)
    return feat


# ---------------------------------------------------------------------------
# Observation / outcome containers
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    step: int
    user_ids: np.ndarray
    # (step, num_users, K + 1): recommended topic one-hot ++ realized reward
    user_history: np.ndarray
    provider_ids: list
    # provider id -> (step, K + 3) array of per-step summaries
    provider_history: dict
    candidate_doc_ids: np.ndarray
    candidate_topics: np.ndarray
    candidate_providers: np.ndarray

    @property
    def num_candidates(self) -> int:
        return len(self.candidate_doc_ids)


@dataclass
class StepOutcome:
    step: int
    user_rewards: np.ndarray  # nan where a user was not served
    provider_rewards: dict  # provider id -> r^c, for providers viable before the step
    recommendations: dict  # provider id -> list of (doc id, user id, r^u)
    feedback_components: dict  # provider id -> (drift, exposure part, feedback part)
    satisfaction: dict  # provider id -> satisfaction after the step
    providers_left: list
    new_documents: list
    done: bool

    def to_record(self, episode: int, actions) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "episode": int(episode),
            "step": int(self.step),
            "actions": [None if a is None else int(a) for a in actions],
            "user_rewards": [None if np.isnan(r) else float(r) for r in self.user_rewards],
            "provider_rewards": {str(k): float(v) for k, v in self.provider_rewards.items()},
            "recommendations": {
                str(k): [[int(d), int(u), float(r)] for d, u, r in v]
                for k, v in self.recommendations.items()
            },
            "providers_left": [int(p) for p in self.providers_left],
            "new_documents": [dataclasses.asdict(d) for d in self.new_documents],
            "done": bool(self.done),
        }


class TrajectoryLogger:
    """Writes one JSON line per (episode, step)."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def log(self, episode: int, actions, outcome: StepOutcome):
        self._fh.write(json.dumps(outcome.to_record(episode, actions), sort_keys=True))
        self._fh.write("\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------


class Environment:
    """One episode of the ecosystem. Single owner; not thread-safe."""

    def __init__(self, config: EnvironmentConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = int(seed)
        self.K = config.num_topics
        self.t = 0
        self.done = False
        self._init_users()
        self._init_providers()
        if not self.candidate_doc_ids.size:
            raise ConfigError("initial candidate set is empty")

    # -- initialisation --------------------------------------------------

    def _init_users(self):
        cfg = self.config
        n = cfg.num_users
        self.user_prefs = np.zeros((n, self.K))
        self.user_eta = np.zeros(n)
        self.user_delta = np.zeros(n)
        for u in range(n):
            rng = RngStream(self.seed, "user-init", u, 0)
            self.user_prefs[u] = sample_unit_preference(rng, self.K)
            self.user_eta[u] = rng.uniform(*cfg.user_params.quality_sensitivity)
            self.user_delta[u] = rng.uniform(*cfg.user_params.preference_drift)
        self.user_history = np.zeros((cfg.horizon, n, self.K + 1))

    def _init_providers(self):
        cfg = self.config
        self.providers: dict = {}
        self.documents: dict = {}
        self.provider_history: dict = {}
        self.initial_satisfaction: dict = {}
        pid = 0
        for gi, group in enumerate(cfg.provider_groups):
            for _ in range(group.size):
                rng = RngStream(self.seed, "provider-init", pid, 0)
                pref = sample_unit_preference(rng, self.K)
                sat = satisfaction_value(group.satisfaction_fn, 0.0)
                prov = ProviderState(
                    id=pid, preference=pref, satisfaction_fn=group.satisfaction_fn,
                    no_rec_drift=group.no_rec_drift,
                    exposure_sensitivity=group.exposure_sensitivity,
                    feedback_sensitivity=group.feedback_sensitivity,
                    preference_drift=group.preference_drift,
                    viability_threshold=group.viability_threshold,
                    creation_rate=group.creation_rate, quality_mean=group.quality_mean,
                    quality_std=group.quality_std, accumulated_feedback=0.0,
                    satisfaction=sat, viable=True, group=gi)
                docs = create_documents(prov, cfg.initial_docs_per_provider, rng,
                                        len(self.documents), 0)
                for d in docs:
                    self.documents[d.id] = d
                self.providers[pid] = dataclasses.replace(prov, documents=tuple(d.id for d in docs))
                self.provider_history[pid] = []
                self.initial_satisfaction[pid] = sat
                pid += 1
        self._rebuild_candidates()

    def _rebuild_candidates(self):
        ids = [d for p in self.providers.values() if p.viable for d in p.documents]
        self.candidate_doc_ids = np.array(ids, dtype=np.int64)
        self.candidate_topics = np.array([self.documents[d].topic for d in ids], dtype=np.int64)
        self.candidate_providers = np.array([self.documents[d].provider_id for d in ids],
                                            dtype=np.int64)
        self._candidate_set = set(ids)

    # -- accessors -------------------------------------------------------

    @property
    def viable_provider_ids(self) -> list:
        return [p.id for p in self.providers.values() if p.viable]

    @property
    def users(self) -> list:
        return [UserState(u, self.user_prefs[u].copy(), float(self.user_eta[u]),
                          float(self.user_delta[u]))
                for u in range(self.config.num_users)]

    def observation(self) -> Observation:
        viable = self.viable_provider_ids
        return Observation(
            step=self.t,
            user_ids=np.arange(self.config.num_users),
            user_history=self.user_history[: self.t].copy(),
            provider_ids=viable,
            provider_history={
                p: (np.array(self.provider_history[p]) if self.provider_history[p]
                    else np.zeros((0, self.K + 3)))
                for p in viable
            },
            candidate_doc_ids=self.candidate_doc_ids.copy(),
            candidate_topics=self.candidate_topics.copy(),
            candidate_providers=self.candidate_providers.copy(),
        )

    # -- dynamics --------------------------------------------------------

    def step(self, actions: Sequence[Optional[int]]):
        """Serve every user simultaneously. ``None`` leaves a user unserved this step."""
        if self.done:
            raise EpisodeDoneError("episode is finished")
        cfg = self.config
        if len(actions) != cfg.num_users:
            raise InvalidActionError(f"expected {cfg.num_users} actions, got {len(actions)}")
        for a in actions:
            if a is not None and int(a) not in self._candidate_set:
                raise InvalidActionError(f"document {a} is not in the candidate set")

        t = self.t
        served = np.array([u for u, a in enumerate(actions) if a is not None], dtype=np.int64)
        docs = [self.documents[int(actions[u])] for u in served]
        topics = np.array([d.topic for d in docs], dtype=np.int64)
        qualities = np.array([d.quality for d in docs], dtype=float)

        rewards = np.full(cfg.num_users, np.nan)
        if served.size:
            r = user_rewards(self.user_prefs[served], self.user_eta[served], topics, qualities)
            rewards[served] = r
            self.user_prefs[served] = shift_preferences(
                self.user_prefs[served], self.user_delta[served], topics, r)
            self.user_history[t, served, topics] = 1.0
            self.user_history[t, served, self.K] = r

        by_provider: dict = {}
        for u, d in zip(served, docs):
            by_provider.setdefault(d.provider_id, []).append((d, float(rewards[u]), int(u)))

        provider_rewards, recommendations, components, satisfaction = {}, {}, {}, {}
        left, new_docs = [], []
        next_id = len(self.documents)
        for pid in self.viable_provider_ids:
            prov = self.providers[pid]
            recs = by_provider.get(pid, [])
            pairs = [(d, r) for d, r, _ in recs]
            self.provider_history[pid].append(step_features(pairs, self.K, len(prov.documents)))
            m = len(pairs)
            sum_r = sum(r for _, r in pairs)
            components[pid] = (prov.no_rec_drift, prov.exposure_sensitivity * m,
                               prov.feedback_sensitivity * sum_r)
            rng = RngStream(self.seed, "provider-step", pid, t)
            state, r_c, created, gone = update_provider(prov, pairs, rng,
                                                        next_doc_id=next_id, step=t + 1)
            next_id += len(created)
            for d in created:
                self.documents[d.id] = d
            self.providers[pid] = state
            provider_rewards[pid] = r_c
            recommendations[pid] = [(d.id, u, r) for d, r, u in recs]
            satisfaction[pid] = state.satisfaction
            new_docs.extend(created)
            if gone:
                left.append(pid)

        self._rebuild_candidates()
        self.t += 1
        self.done = self.t >= cfg.horizon or not self.viable_provider_ids
        outcome = StepOutcome(
            step=t, user_rewards=rewards, provider_rewards=provider_rewards,
            recommendations=recommendations, feedback_components=components,
            satisfaction=satisfaction, providers_left=left, new_documents=new_docs,
            done=self.done)
        return self.observation(), outcome


EnvironmentHandle = Environment


def reset(config: EnvironmentConfig, seed: int):
    env = Environment(config, seed)
    return env, env.observation()
