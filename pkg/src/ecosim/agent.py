"""EcoAgent: recurrent utility models, two-tower softmax actor and the REINFORCE update."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .core import RngStream
from .env import Observation, StepOutcome, discounted_return_matrix

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Parameters became non-finite during training."""


class StaleBatchError(RuntimeError):
    """A batch collected under older parameters was passed to ``update``."""


@dataclass
class AgentConfig:
    num_topics: int = 10
    hidden: int = 32
    utility_head: tuple = (32, 32, 16)
    actor_tower: tuple = (32, 32, 32)
    temperature: float = 1.0
    lam: float = 0.0
    gamma_user: float = 0.99
    gamma_provider: float = 0.99
    learning_rate: float = 0.03
    huber_delta: float = 1.0
    count_scale: float = 10.0
    inventory_scale: float = 20.0
    utility_minibatches: int = 4
    constant_baseline: bool = False
    # epochs during which only the utility models learn, so the actor never
    # follows uplifts from an unfitted provider model
    actor_warmup: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        self.utility_head = tuple(self.utility_head)
        self.actor_tower = tuple(self.actor_tower)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["utility_head"] = list(self.utility_head)
        d["actor_tower"] = list(self.actor_tower)
        return d


@dataclass
class RecommendationEvent:
    user_id: int
    step: int
    doc_id: int
    candidate_doc_ids: np.ndarray
    log_prob: float
    user_reward: Optional[float] = None
    user_return: Optional[float] = None
    factual_utility: Optional[float] = None
    counterfactual_utility: Optional[float] = None

    @property
    def uplift(self) -> Optional[float]:
        if self.factual_utility is None:
            return None
        return self.factual_utility - self.counterfactual_utility


@dataclass
class StepRecord:
    """Actor inputs and choices for every user of one environment at one step."""

    env: int
    step: int
    user_states: np.ndarray  # (U, H)
    group_feats: np.ndarray  # (G, K + H): topic one-hot ++ provider state
    group_logcount: np.ndarray  # (G,)
    group_provider: np.ndarray  # (G,)
    group_topic: np.ndarray  # (G,)
    chosen_group: np.ndarray  # (U,)
    chosen_doc: np.ndarray  # (U,)
    log_prob: np.ndarray  # (U,)
    user_rewards: Optional[np.ndarray] = None


@dataclass
class EpisodeData:
    num_users: int
    K: int
    user_topics: list = field(default_factory=list)  # per step (U,) ints
    user_rewards: list = field(default_factory=list)  # per step (U,)
    provider_features: dict = field(default_factory=dict)  # pid -> list of raw step features
    provider_rewards: dict = field(default_factory=dict)  # pid -> list of r^c
    # (step, pid) -> (topics, rewards) of the recommendations received
    provider_recs: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.user_rewards)


@dataclass
class Batch:
    version: int
    records: list
    episodes: list

    @property
    def num_events(self) -> int:
        return sum(len(r.chosen_doc) for r in self.records)


# ---------------------------------------------------------------------------
# Feature helpers
# ---------------------------------------------------------------------------


def onehot(idx, K: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros(idx.shape + (K,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def removal_features(feature: np.ndarray, topics: np.ndarray, rewards: np.ndarray,
                     removed: np.ndarray, K: int) -> np.ndarray:
    """Counterfactual step summaries with one recommendation taken out.

    ``feature`` is the factual raw summary [m, sum r, bag(K), inventory];
    ``removed`` lists indices into (topics, rewards) to drop, one output row each.
    """
    removed = np.asarray(removed, dtype=np.int64)
    out = np.repeat(feature[None, :], len(removed), axis=0)
    numer = np.zeros(K)
    np.add.at(numer, topics, rewards)
    denom = np.abs(rewards).sum()
    r = rewards[removed]
    out[:, 0] = len(rewards) - 1
    out[:, 1] = rewards.sum() - r
    cf_numer = numer[None, :] - onehot(topics[removed], K) * r[:, None]
    cf_denom = denom - np.abs(r)
    ok = (cf_denom > 1e-12) & (out[:, 0] > 0)
    out[:, 2:2 + K] = np.where(ok[:, None], cf_numer / np.where(ok, cf_denom, 1.0)[:, None], 0.0)
    return out


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------


class EcoAgent:
    """Provider-aware REINFORCE recommender.

    Parameters live in one flat dict keyed ``user.*``, ``provider.*`` and
    ``actor.*``; each group has its own Adagrad state.
    """

    GROUPS = ("user", "provider", "actor")

    def __init__(self, config: AgentConfig, params: Optional[dict] = None):
        self.config = c = config
        K, H = c.num_topics, c.hidden
        self.K, self.H = K, H
        self.user_cell = nn.GRUCell("user.cell", K + 1, H)
        self.user_head = nn.MLP("user.head", H + K, (*c.utility_head, 1))
        self.provider_cell = nn.GRUCell("provider.cell", K + 3, H)
        self.provider_head = nn.MLP("provider.head", H + K + 3, (*c.utility_head, 1))
        self.user_tower = nn.MLP("actor.user", H, c.actor_tower)
        # an output bias would shift every candidate's logit equally: no effect on the policy
        self.cand_tower = nn.MLP("actor.cand", K + H, c.actor_tower, out_bias=False)
        if params is None:
            rng = np.random.default_rng(RngStream(c.seed, "agent-init").generator.integers(2**63))
            params = {}
            for block in (self.user_cell, self.user_head, self.provider_cell,
                          self.provider_head, self.user_tower, self.cand_tower):
                block.init(params, rng)
        self.params = params
        self.optimizers = {g: nn.AdagradState(c.learning_rate) for g in self.GROUPS}
        self.version = 0
        self._session = None

    # -- parameter plumbing ---------------------------------------------

    def group_params(self, group: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(group + ".")}

    def _tape(self, group: Optional[str] = None, grad: bool = False) -> nn.Tape:
        tape = nn.Tape()
        for name, value in self.params.items():
            if grad and group is not None and name.startswith(group + "."):
                tape.param(name, value)
            else:
                tape.params[name] = tape.const(value)
        return tape

    def scale_provider(self, feats: np.ndarray) -> np.ndarray:
        f = np.array(feats, dtype=float)
        c = self.config
        f[..., 0] /= c.count_scale
        f[..., 1] /= c.count_scale
        f[..., -1] /= c.inventory_scale
        return f

    # -- encoders and utility heads --------------------------------------

    def _run_cell(self, tape, cell, seqs: np.ndarray) -> list:
        """Hidden states h_0..h_T for a (N, T, D) batch; h_0 is the zero state."""
        n = seqs.shape[0]
        h = tape.const(cell.zero_state(n))
        states = [h]
        for t in range(seqs.shape[1]):
            h = cell(tape, tape.const(seqs[:, t, :]), h)
            states.append(h)
        return states

    def encode_user(self, history) -> np.ndarray:
        hist = np.asarray(history, dtype=float).reshape(-1, self.K + 1)
        return self._run_cell(self._tape(), self.user_cell, hist[None])[-1].value[0]

    def predict_user_utility(self, state, action_topic) -> float:
        tape = self._tape()
        x = np.concatenate([np.asarray(state, float), np.asarray(action_topic, float)])[None]
        return float(self.user_head(tape, tape.const(x)).value[0, 0])

    def encode_provider(self, history) -> np.ndarray:
        hist = self.scale_provider(np.asarray(history, dtype=float).reshape(-1, self.K + 3))
        return self._run_cell(self._tape(), self.provider_cell, hist[None])[-1].value[0]

    def predict_provider_utility(self, state, step_feature) -> float:
        return float(self._provider_head_np(np.asarray(state, float)[None],
                                            np.asarray(step_feature, float)[None])[0])

    def _provider_head_np(self, states, raw_feats) -> np.ndarray:
        tape = self._tape()
        x = np.concatenate([states, self.scale_provider(raw_feats)], axis=1)
        return self.provider_head(tape, tape.const(x)).value[:, 0]

    def counterfactual_uplift(self, history, recs: Sequence, inventory: int, chosen: int):
        """Modelled utility of the factual step minus the step with ``recs[chosen]`` removed.

        ``history`` holds the provider's raw summaries before this step and
        ``recs`` the (topic, user reward) pairs it received at this step.
        Returns (uplift, factual, counterfactual).
        """
        topics = np.array([t for t, _ in recs], dtype=np.int64)
        rewards = np.array([r for _, r in recs], dtype=float)
        factual = _step_feature(topics, rewards, inventory, self.K)
        cf = removal_features(factual, topics, rewards, [chosen], self.K)[0]
        state = self.encode_provider(history)
        values = self._provider_head_np(np.stack([state, state]), np.stack([factual, cf]))
        return float(values[0] - values[1]), float(values[0]), float(values[1])

    # -- policy ----------------------------------------------------------

    def _towers(self, tape, user_states, group_feats):
        u = self.user_tower(tape, user_states if isinstance(user_states, nn.Var)
                            else tape.const(user_states))
        g = self.cand_tower(tape, group_feats if isinstance(group_feats, nn.Var)
                            else tape.const(group_feats))
        return u, g

    def candidate_scores(self, user_states: np.ndarray, cand_feats: np.ndarray) -> np.ndarray:
        tape = self._tape()
        u, g = self._towers(tape, user_states, cand_feats)
        return (u.value @ g.value.T) / self.config.temperature

    def policy_distribution(self, user_state, candidates: Sequence) -> np.ndarray:
        """Softmax over <user tower(state), candidate tower([topic, provider state])>."""
        if len(candidates) == 0:
            raise EmptyCandidates()
        feats = np.stack([np.concatenate([np.asarray(t, float), np.asarray(s, float)])
                          for t, s in candidates])
        z = self.candidate_scores(np.asarray(user_state, float)[None], feats)[0]
        return nn.softmax(z)

    def act(self, observation: Observation, rng: RngStream, mode: str = "sample") -> list:
        """Stateless single-environment action selection from full histories."""
        if observation.num_candidates == 0:
            raise EmptyCandidates()
        user_states = np.stack([self.encode_user(observation.user_history[:, u])
                                for u in range(len(observation.user_ids))])
        pstates = {p: self.encode_provider(observation.provider_history[p])
                   for p in observation.provider_ids}
        grp = _groups(observation, pstates, self.K)
        chosen_doc, chosen_group, logp = self._choose(user_states, grp, observation, rng, mode)
        return [RecommendationEvent(int(u), observation.step, int(d),
                                    observation.candidate_doc_ids, float(lp))
                for u, d, lp in zip(observation.user_ids, chosen_doc, logp)]

    def _choose(self, user_states, grp, obs, rng, mode):
        feats, logcount, _, _, doc_group = grp
        z = self.candidate_scores(user_states, feats)
        doc_logits = z[:, doc_group]
        probs = nn.softmax(doc_logits)
        if mode == "greedy":
            idx = probs.argmax(axis=1)
        elif mode == "sample":
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(len(user_states)) * cdf[:, -1]
            idx = np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        logp = np.log(probs[np.arange(len(idx)), idx])
        return obs.candidate_doc_ids[idx], doc_group[idx], logp

    # -- batched episode session -----------------------------------------

    def begin(self, observations: Sequence[Observation], seeds: Sequence[int],
              mode: str = "sample"):
        n_users = len(observations[0].user_ids)
        self._session = {
            "mode": mode,
            "seeds": list(seeds),
            "user_h": np.zeros((len(observations), n_users, self.H)),
            "provider_h": [{p: np.zeros(self.H) for p in o.provider_ids} for o in observations],
            "records": [],
            "episodes": [EpisodeData(n_users, self.K) for _ in observations],
            "pending": {},
        }

    def select(self, observations: Sequence[Optional[Observation]]) -> list:
        """Actions for every live environment (``None`` entries are skipped)."""
        s = self._session
        actions = [None] * len(observations)
        live = [i for i, o in enumerate(observations) if o is not None]
        if not live:
            return actions
        tape = self._tape()
        u_emb = self.user_tower(tape, tape.const(s["user_h"][live].reshape(-1, self.H))).value
        u_emb = u_emb.reshape(len(live), -1, u_emb.shape[-1])
        groups = [_groups(observations[i], s["provider_h"][i], self.K) for i in live]
        all_feats = np.concatenate([g[0] for g in groups])
        g_emb = self.cand_tower(tape, tape.const(all_feats)).value
        offset = 0
        for j, i in enumerate(live):
            obs = observations[i]
            feats, logcount, gprov, gtopic, doc_group = groups[j]
            ge = g_emb[offset: offset + len(feats)]
            offset += len(feats)
            z = (u_emb[j] @ ge.T) / self.config.temperature
            probs = nn.softmax(z[:, doc_group])
            if s["mode"] == "greedy":
                idx = probs.argmax(axis=1)
            else:
                rng = RngStream(s["seeds"][i], "policy", 0, obs.step)
                cdf = np.cumsum(probs, axis=1)
                draw = rng.random(probs.shape[0]) * cdf[:, -1]
                idx = np.minimum((cdf < draw[:, None]).sum(axis=1), probs.shape[1] - 1)
            rows = np.arange(len(idx))
            rec = StepRecord(
                env=i, step=obs.step, user_states=s["user_h"][i].copy(), group_feats=feats,
                group_logcount=logcount, group_provider=gprov, group_topic=gtopic,
                chosen_group=doc_group[idx], chosen_doc=obs.candidate_doc_ids[idx],
                log_prob=np.log(probs[rows, idx]))
            s["records"].append(rec)
            s["pending"][i] = (rec, obs)
            actions[i] = rec.chosen_doc
        return actions

    def observe(self, outcomes: Sequence[Optional[StepOutcome]]):
        """Fold each environment's step outcome into histories and hidden states."""
        s = self._session
        live = [i for i, o in enumerate(outcomes) if o is not None]
        if not live:
            return
        user_x, prov_keys, prov_x = [], [], []
        for i in live:
            rec, obs = s["pending"].pop(i)
            out = outcomes[i]
            ep = s["episodes"][i]
            rec.user_rewards = out.user_rewards
            topics = rec.group_topic[rec.chosen_group]
            ep.user_topics.append(topics)
            ep.user_rewards.append(out.user_rewards)
            user_x.append(np.concatenate([onehot(topics, self.K), out.user_rewards[:, None]], axis=1))
            doc_topic = dict(zip(obs.candidate_doc_ids.tolist(), obs.candidate_topics.tolist()))
            inventory = np.bincount(obs.candidate_providers,
                                    minlength=max(obs.provider_ids) + 1)
            for pid in obs.provider_ids:
                recs = out.recommendations.get(pid, [])
                t_arr = np.array([doc_topic[d] for d, _, _ in recs], dtype=np.int64)
                r_arr = np.array([r for _, _, r in recs], dtype=float)
                feat = _step_feature(t_arr, r_arr, int(inventory[pid]), self.K)
                ep.provider_features.setdefault(pid, []).append(feat)
                ep.provider_rewards.setdefault(pid, []).append(out.provider_rewards[pid])
                ep.provider_recs[(obs.step, pid)] = (t_arr, r_arr)
                if pid not in out.providers_left:
                    prov_keys.append((i, pid))
                    prov_x.append(feat)
            for pid in out.providers_left:
                s["provider_h"][i].pop(pid, None)

        tape = self._tape()
        h = s["user_h"][live].reshape(-1, self.H)
        x = np.concatenate(user_x)
        s["user_h"][live] = self.user_cell(tape, tape.const(x), tape.const(h)).value.reshape(
            len(live), -1, self.H)
        if prov_keys:
            hp = np.stack([s["provider_h"][i][p] for i, p in prov_keys])
            xp = self.scale_provider(np.stack(prov_x))
            new = self.provider_cell(tape, tape.const(xp), tape.const(hp)).value
            for (i, p), row in zip(prov_keys, new):
                s["provider_h"][i][p] = row

    def finish(self) -> Batch:
        s, self._session = self._session, None
        return Batch(self.version, s["records"], s["episodes"])

    # -- training --------------------------------------------------------

    def _user_arrays(self, batch: Batch):
        T = max(ep.length for ep in batch.episodes)
        U = batch.episodes[0].num_users
        n = len(batch.episodes)
        x = np.zeros((n, U, T, self.K + 1))
        r = np.zeros((n, U, T))
        topics = np.zeros((n, U, T), dtype=np.int64)
        mask = np.zeros((n, U, T), dtype=bool)
        for e, ep in enumerate(batch.episodes):
            L = ep.length
            tp = np.stack(ep.user_topics, axis=1)
            rw = np.stack(ep.user_rewards, axis=1)
            x[e, :, :L, : self.K] = onehot(tp, self.K)
            x[e, :, :L, self.K] = rw
            r[e, :, :L] = rw
            topics[e, :, :L] = tp
            mask[e, :, :L] = True
        q = discounted_return_matrix(np.moveaxis(r, 2, 0), self.config.gamma_user,
                                     np.moveaxis(mask, 2, 0))
        q = np.moveaxis(q, 0, 2)
        return (x.reshape(n * U, T, -1), topics.reshape(n * U, T), q.reshape(n * U, T),
                mask.reshape(n * U, T))

    def _provider_arrays(self, batch: Batch):
        keys = [(e, p) for e, ep in enumerate(batch.episodes) for p in sorted(ep.provider_features)]
        T = max(ep.length for ep in batch.episodes)
        x = np.zeros((len(keys), T, self.K + 3))
        r = np.zeros((len(keys), T))
        mask = np.zeros((len(keys), T), dtype=bool)
        for k, (e, p) in enumerate(keys):
            f = np.array(batch.episodes[e].provider_features[p])
            x[k, : len(f)] = f
            r[k, : len(f)] = batch.episodes[e].provider_rewards[p]
            mask[k, : len(f)] = True
        q = discounted_return_matrix(r.T, self.config.gamma_provider, mask.T).T
        return keys, x, q, mask

    def utility_loss(self, group: str, x, q, mask, topics=None, grad: bool = True):
        """Masked mean Huber loss of a utility model over (N, T) sequences."""
        tape = self._tape(group, grad=grad)
        if group == "user":
            cell, head = self.user_cell, self.user_head
            seq = x
            act = onehot(topics, self.K)
        else:
            cell, head = self.provider_cell, self.provider_head
            seq = self.scale_provider(x)
            act = seq
        N, T = q.shape
        states = self._run_cell(tape, cell, seq)[:-1]  # h_t precedes step t
        h = nn.concat(states, axis=0)  # (T * N, H), time-major
        a = np.moveaxis(act, 1, 0).reshape(T * N, -1)
        pred = head(tape, nn.concat([h, tape.const(a)], axis=1))
        target = q.T.reshape(T * N, 1)
        w = mask.T.reshape(T * N, 1) / max(mask.sum(), 1)
        loss = nn.total(nn.huber(pred, target, self.config.huber_delta) * w)
        return tape, loss

    def _fit_utility(self, group, x, q, mask, topics, rng):
        n = q.shape[0]
        order = rng.permutation(n)
        losses = []
        for chunk in np.array_split(order, max(1, min(self.config.utility_minibatches, n))):
            if not mask[chunk].any():
                continue
            tape, loss = self.utility_loss(group, x[chunk], q[chunk], mask[chunk],
                                           None if topics is None else topics[chunk])
            grads = tape.backward(loss)
            nn.adagrad_step(self.optimizers[group], self.params, grads)
            losses.append(float(loss.value))
        return float(np.mean(losses)) if losses else float("nan")

    def provider_states(self, x: np.ndarray) -> np.ndarray:
        """(T + 1, N, H) provider hidden states under the current parameters."""
        states = self._run_cell(self._tape(), self.provider_cell, self.scale_provider(x))
        return np.stack([s.value for s in states])

    def uplifts(self, batch: Batch):
        """Per-record arrays of (factual, counterfactual) modelled provider utility."""
        keys, x, _, _ = self._provider_arrays(batch)
        index = {k: i for i, k in enumerate(keys)}
        hs = self.provider_states(x)
        S, F, C = [], [], []
        for rec in batch.records:
            ep = batch.episodes[rec.env]
            pids = rec.group_provider[rec.chosen_group]
            k = np.array([index[(rec.env, int(p))] for p in pids])
            fact = x[k, rec.step]
            cf = np.empty_like(fact)
            for pid in np.unique(pids):
                # recommendations are stored in user order: the j-th user of pid is entry j
                users = np.nonzero(pids == pid)[0]
                t_arr, r_arr = ep.provider_recs[(rec.step, int(pid))]
                cf[users] = removal_features(x[index[(rec.env, int(pid))], rec.step],
                                             t_arr, r_arr, np.arange(len(users)), self.K)
            S.append(hs[rec.step, k])
            F.append(fact)
            C.append(cf)
        S, F, C = np.concatenate(S), np.concatenate(F), np.concatenate(C)
        vals = self._provider_head_np(np.concatenate([S, S]), np.concatenate([F, C]))
        n = len(S)
        fact_v, cf_v = vals[:n], vals[n:]
        out, off = [], 0
        for rec in batch.records:
            m = len(rec.chosen_doc)
            out.append((fact_v[off: off + m], cf_v[off: off + m]))
            off += m
        return out

    def user_returns(self, batch: Batch) -> list:
        out = []
        for e, ep in enumerate(batch.episodes):
            r = np.stack(ep.user_rewards)  # (T, U)
            out.append(discounted_return_matrix(r, self.config.gamma_user))
        return [out[rec.env][rec.step] for rec in batch.records]

    def actor_loss(self, records: Sequence[StepRecord], rewards: Sequence[np.ndarray],
                   grad: bool = True):
        """-(1/N) sum R log pi(a|s) over all events, on the stored actor inputs."""
        tape = self._tape("actor", grad=grad)
        u_all = np.concatenate([r.user_states for r in records])
        g_all = np.concatenate([r.group_feats for r in records])
        u_emb, g_emb = self._towers(tape, u_all, g_all)
        n_events = len(u_all)
        terms = []
        uo = go = 0
        for rec, R in zip(records, rewards):
            nu, ng = len(rec.user_states), len(rec.group_feats)
            ue = nn.take_rows(u_emb, slice(uo, uo + nu))
            ge = nn.take_rows(g_emb, slice(go, go + ng))
            uo += nu
            go += ng
            z = (ue @ ge.T) * (1.0 / self.config.temperature) + rec.group_logcount[None, :]
            logp = nn.pick(z, rec.chosen_group) - nn.logsumexp_rows(z)
            terms.append(nn.total(logp * (-np.asarray(R) / n_events)))
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        return tape, loss

    def update(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> dict:
        """One on-policy epoch: utility models first, then uplifts, then the actor."""
        if batch.version != self.version:
            raise StaleBatchError(f"batch from version {batch.version}, agent at {self.version}")
        c = self.config
        rng = rng or np.random.default_rng(RngStream(c.seed, "minibatch", 0, self.version).generator.integers(2**63))

        ux, utop, uq, umask = self._user_arrays(batch)
        user_loss = self._fit_utility("user", ux, uq, umask, utop, rng)
        _, px, pq, pmask = self._provider_arrays(batch)
        provider_loss = self._fit_utility("provider", px, pq, pmask, None, rng)

        returns = self.user_returns(batch)
        uplift_pairs = self.uplifts(batch)
        rewards = [(1 - c.lam) * q + c.lam * (f - cf) for q, (f, cf) in zip(returns, uplift_pairs)]
        if c.constant_baseline:
            b = np.mean(np.concatenate(rewards))
            rewards = [r - b for r in rewards]
        tape, loss = self.actor_loss(batch.records, rewards)
        if self.version >= c.actor_warmup:
            grads = tape.backward(loss)
            nn.adagrad_step(self.optimizers["actor"], self.params, grads)

        if not all(np.all(np.isfinite(v)) for v in self.params.values()):
            raise DivergenceError("non-finite parameters after update")
        self.version += 1
        q_all = np.concatenate(returns)
        up_all = np.concatenate([f - cf for f, cf in uplift_pairs])
        return {
            "objective": float(np.mean(np.concatenate(rewards))),
            "user_return": float(q_all.mean()),
            "uplift": float(up_all.mean()),
            "user_loss": user_loss,
            "provider_loss": provider_loss,
            "actor_loss": float(loss.value),
        }

    # -- persistence -----------------------------------------------------

    def save(self, path_prefix):
        nn.save_params(f"{path_prefix}.bin", self.params)
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
            json.dump({"format": "ecosim-agent", "version": 1, "config": self.config.to_dict(),
                       "lambda": self.config.lam}, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path_prefix, expect_lambda: Optional[float] = None) -> "EcoAgent":
        with open(f"{path_prefix}.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        cfg = AgentConfig(**meta["config"])
        if meta["lambda"] != cfg.lam:
            raise ValueError("checkpoint sidecar lambda does not match its config")
        if expect_lambda is not None and not np.isclose(expect_lambda, cfg.lam):
            raise ValueError(f"checkpoint was trained with lambda={cfg.lam}, not {expect_lambda}")
        return cls(cfg, nn.load_params(f"{path_prefix}.bin"))


class EmptyCandidates(Exception):
    """No viable provider is left; the episode is over."""


def _step_feature(topics: np.ndarray, rewards: np.ndarray, inventory: int, K: int) -> np.ndarray:
    feat = np.zeros(K + 3)
    feat[0] = len(topics)
    feat[K + 2] = inventory
    if len(topics):
        feat[1] = rewards.sum()
        denom = np.abs(rewards).sum()
        if denom > 0:
            np.add.at(feat, 2 + topics, rewards / denom)
    return feat


def _groups(obs: Observation, provider_states: dict, K: int):
    """Collapse candidates sharing (provider, topic): they score identically."""
    key = obs.candidate_providers * K + obs.candidate_topics
    uniq, doc_group, counts = np.unique(key, return_inverse=True, return_counts=True)
    gprov = uniq // K
    gtopic = uniq % K
    feats = np.concatenate([onehot(gtopic, K), np.stack([provider_states[p] for p in gprov])],
                           axis=1)
    return feats, np.log(counts), gprov, gtopic, doc_group


class RandomAgent:
    """Uniform over the candidate set; same session interface as EcoAgent."""

    def begin(self, observations, seeds, mode="sample"):
        self._seeds = list(seeds)

    def select(self, observations):
        out = []
        for i, obs in enumerate(observations):
            if obs is None:
                out.append(None)
                continue
            out.append(random_agent(obs, RngStream(self._seeds[i], "policy", 0, obs.step)))
        return out

    def observe(self, outcomes):
        pass

    def finish(self):
        return None


def random_agent(observation: Observation, rng: RngStream) -> np.ndarray:
    if observation.num_candidates == 0:
        raise EmptyCandidates()
    idx = rng.integers(0, observation.num_candidates, size=len(observation.user_ids))
    return observation.candidate_doc_ids[idx]
