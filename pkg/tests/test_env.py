import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecosim.core import (
    ConfigError,
    Document,
    EnvironmentConfig,
    ProviderGroup,
    ProviderState,
    RngStream,
    SatisfactionFn,
    UserParams,
    UserState,
)
from ecosim.env import (
    Environment,
    EpisodeDoneError,
    InvalidActionError,
    TrajectoryLogger,
    discounted_return,
    provider_feedback,
    provider_topic_distribution,
    reset,
    topic_distribution,
    update_provider,
    update_user,
    user_reward,
)


def provider(**kw):
    base = dict(id=0, preference=np.array([1.0, 0.0]), satisfaction_fn=SatisfactionFn("linear"),
                no_rec_drift=-0.5, exposure_sensitivity=0.2, feedback_sensitivity=0.3,
                preference_drift=0.0, viability_threshold=-10.0, creation_rate=2.0,
                quality_mean=0.0, quality_std=0.3)
    base.update(kw)
    return ProviderState(**base)


def doc(topic, quality=0.0, pid=0, id=0):
    return Document(id, topic, quality, pid)


def small(**kw):
    base = dict(num_topics=3, num_users=4, num_providers=2, initial_docs_per_provider=3, horizon=5,
                provider_groups=[ProviderGroup(size=2)])
    base.update(kw)
    return EnvironmentConfig(**base)


# -- user dynamics -----------------------------------------------------------


def test_user_reward_examples():
    u = UserState(0, np.array([1.0, 0.0]), 0.0, 0.0)
    assert user_reward(u, doc(0)) == 1.0
    assert user_reward(dataclasses.replace(u, quality_sensitivity=1.0), doc(1, 0.3)) == 0.3
    u = UserState(0, np.array([0.6, 0.8]), 0.5, 0.0)
    # 0.5 * 0.8 + 0.5 * 0.2
    assert user_reward(u, doc(1, 0.2)) == pytest.approx(0.5, abs=1e-15)


def test_update_user_examples():
    u = UserState(0, np.array([1.0, 0.0]), 0.3, 0.0)
    assert np.array_equal(update_user(u, doc(1), 1.0).preference, u.preference)
    u = dataclasses.replace(u, preference_drift=1.0)
    new = update_user(u, doc(1), 1.0)
    assert np.allclose(new.preference, [math.sqrt(0.5), math.sqrt(0.5)], atol=1e-12)
    assert new.quality_sensitivity == 0.3


def test_negative_reward_pushes_component_down():
    u = UserState(0, np.array([0.6, 0.8]), 0.0, 0.5)
    new = update_user(u, doc(1), -0.4)
    assert new.preference[1] < 0.8


def test_update_user_zero_vector_guard():
    u = UserState(0, np.array([0.0, 1.0]), 0.0, 1.0)
    assert np.array_equal(update_user(u, doc(1), -1.0).preference, u.preference)


# -- provider dynamics -------------------------------------------------------


def test_provider_feedback_examples():
    p = provider()
    assert provider_feedback(p, 0, 0.0) == -0.5
    assert provider_feedback(p, 2, 1.0) == pytest.approx(0.2, abs=1e-15)
    flat = provider(exposure_sensitivity=0.0, feedback_sensitivity=0.0)
    assert provider_feedback(flat, 7, 3.0) == -0.5


def test_linear_reward_is_slope_times_feedback():
    p = provider(no_rec_drift=-0.4, exposure_sensitivity=0.3, feedback_sensitivity=0.0)
    # p^c = -0.4 + 0.3 * 2 = 0.2 under slope 1
    _, r_c, _, _ = update_provider(p, [(doc(0), 0.0), (doc(0), 0.0)], RngStream(0, "t"))
    assert r_c == pytest.approx(0.2, abs=1e-15)


def test_saturation_favours_less_established_providers():
    f = SatisfactionFn("saturated_log")
    kw = dict(satisfaction_fn=f, no_rec_drift=-1.0, exposure_sensitivity=2.0,
              feedback_sensitivity=0.0, creation_rate=0.0)
    fresh = provider(**kw)
    old = provider(accumulated_feedback=10.0, satisfaction=f(10.0), **kw)
    recs = [(doc(0), 0.0)]
    _, r_fresh, _, _ = update_provider(fresh, recs, RngStream(0, "t"))
    _, r_old, _, _ = update_provider(old, recs, RngStream(0, "t"))
    assert r_fresh == pytest.approx(math.log(2), abs=1e-12)
    assert r_old == pytest.approx(math.log(12 / 11), abs=1e-12)


def test_zero_creation_rate_creates_nothing():
    p = provider(creation_rate=0.0, exposure_sensitivity=5.0)
    _, r_c, docs, _ = update_provider(p, [(doc(0), 1.0)] * 4, RngStream(0, "t"))
    assert r_c > 0 and docs == []


def test_creation_count_rounds_half_up():
    # r^c = 0.25 exactly (linear slope 1), kappa = 2 -> round(0.5) = 1
    p = provider(no_rec_drift=-0.25, exposure_sensitivity=0.5, feedback_sensitivity=0.0,
                 creation_rate=2.0)
    _, r_c, docs, _ = update_provider(p, [(doc(0), 0.0)], RngStream(0, "t"), next_doc_id=40, step=3)
    assert r_c == 0.25
    assert [d.id for d in docs] == [40]
    assert docs[0].created_at == 3 and -1 <= docs[0].quality <= 1


def test_provider_leaves_below_threshold():
    p = provider(viability_threshold=-0.2)
    state, _, docs, left = update_provider(p, [], RngStream(0, "t"))
    assert left and not state.viable and docs == []
    with pytest.raises(ValueError):
        update_provider(state, [], RngStream(0, "t"))


def test_provider_preference_drift_is_renormalised():
    p = provider(preference=np.array([1.0, 0.0]), preference_drift=1.0)
    state, *_ = update_provider(p, [(doc(1), 1.0)], RngStream(0, "t"))
    assert np.allclose(state.preference, [math.sqrt(0.5), math.sqrt(0.5)])


def test_topic_distribution_examples():
    assert np.allclose(topic_distribution(np.array([1.0, 0.0])), [1, 0], atol=1e-5)
    assert np.allclose(topic_distribution(np.array([-1.0, -1.0])), [0.5, 0.5])
    assert np.allclose(topic_distribution(np.array([0.3, 0.1]), eps=0.0), [0.75, 0.25])
    p = provider_topic_distribution(provider(preference=np.array([0.2, -0.3])))
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0)


def test_discounted_return_examples():
    assert np.allclose(discounted_return([1, 1, 1], 0.5), [1.75, 1.5, 1.0])
    assert np.array_equal(discounted_return([0.3, -1.0, 2.0], 0.0), [0.3, -1.0, 2.0])
    assert np.array_equal(discounted_return([4.2], 0.9), [4.2])
    with pytest.raises(ValueError):
        discounted_return([1.0], 1.5)


# -- environment -------------------------------------------------------------


def test_reset_with_defaults():
    env, obs = reset(EnvironmentConfig(), 0)
    assert obs.num_candidates == 200
    assert len(obs.user_ids) == 50 and len(obs.provider_ids) == 10
    for p in env.providers.values():
        assert p.satisfaction == p.satisfaction_fn(0.0)
        assert all(-1 <= env.documents[d].quality <= 1 for d in p.documents)
    assert np.allclose(np.linalg.norm(env.user_prefs, axis=1), 1.0, atol=1e-12)


def test_reset_rejects_empty_candidate_set():
    cfg = small(num_providers=1, initial_docs_per_provider=0, provider_groups=[ProviderGroup(size=1)])
    with pytest.raises(ConfigError):
        reset(cfg, 0)


def test_reset_is_deterministic():
    a, oa = reset(EnvironmentConfig(), 11)
    b, ob = reset(EnvironmentConfig(), 11)
    assert np.array_equal(oa.candidate_doc_ids, ob.candidate_doc_ids)
    assert np.array_equal(oa.candidate_topics, ob.candidate_topics)
    assert np.array_equal(a.user_prefs, b.user_prefs)


def test_observation_hides_latent_state():
    _, obs = reset(small(), 0)
    fields = {f.name for f in dataclasses.fields(obs)}
    assert not fields & {"preference", "quality", "satisfaction", "user_prefs"}


def test_horizon_one_is_done_after_one_step():
    env, obs = reset(small(horizon=1), 0)
    _, out = env.step([obs.candidate_doc_ids[0]] * 4)
    assert out.done
    with pytest.raises(EpisodeDoneError):
        env.step([obs.candidate_doc_ids[0]] * 4)


def test_all_providers_below_threshold_leave_at_first_step():
    group = ProviderGroup(size=2, viability_threshold=5.0)
    env, obs = reset(small(provider_groups=[group]), 0)
    _, out = env.step([obs.candidate_doc_ids[0]] * 4)
    assert sorted(out.providers_left) == [0, 1] and out.done
    assert env.observation().num_candidates == 0


def test_unrecommended_provider_gets_only_drift():
    env, obs = reset(small(num_users=2), 0)
    a_doc = int(env.providers[0].documents[0])
    _, out = env.step([a_doc, a_doc])
    assert len(out.recommendations[0]) == 2
    assert out.recommendations[1] == []
    drift, rec, fb = out.feedback_components[1]
    assert (rec, fb) == (0.0, 0.0) and drift == env.providers[1].no_rec_drift


def test_invalid_action_names_the_document():
    env, _ = reset(small(), 0)
    with pytest.raises(InvalidActionError, match="999"):
        env.step([999, 0, 0, 0])


def _random_episode(cfg, seed, policy_seed):
    env = Environment(cfg, seed)
    rng = np.random.default_rng(policy_seed)
    log = []
    obs = env.observation()
    while not env.done:
        acts = rng.choice(obs.candidate_doc_ids, size=cfg.num_users)
        obs, out = env.step(list(acts))
        log.append((acts, out, obs))
    return env, log


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_episode_invariants(seed, policy_seed):
    cfg = small(num_users=6, horizon=8, provider_groups=[ProviderGroup(size=2, no_rec_drift=-0.6)])
    env, log = _random_episode(cfg, seed, policy_seed)
    start = dict(env.initial_satisfaction)
    totals = {p: 0.0 for p in start}
    viable_before = set(start)
    for acts, out, obs in log:
        # every user's recommendation is counted once
        assert sum(len(v) for v in out.recommendations.values()) == cfg.num_users
        assert np.all(np.abs(out.user_rewards) <= 1.0 + 1e-12)
        for p, r in out.provider_rewards.items():
            totals[p] += r
        for d in out.new_documents:
            assert d.provider_id in viable_before and out.provider_rewards[d.provider_id] > 0
        viable_now = set(obs.provider_ids)
        assert viable_now <= viable_before
        assert set(obs.candidate_providers.tolist()) <= viable_now
        for p in out.providers_left:
            assert not set(env.providers[p].documents) & set(obs.candidate_doc_ids.tolist())
        viable_before = viable_now
    assert np.allclose(np.linalg.norm(env.user_prefs, axis=1), 1.0, atol=1e-9)
    for p, prov in env.providers.items():
        assert prov.satisfaction == prov.satisfaction_fn(prov.accumulated_feedback)
        # telescoping
        assert abs(totals[p] - (prov.satisfaction - start[p])) <= 1e-12


def test_episode_replay_is_bit_identical():
    cfg = small(horizon=6)
    _, a = _random_episode(cfg, 5, 9)
    _, b = _random_episode(cfg, 5, 9)
    for (_, oa, _), (_, ob, _) in zip(a, b):
        assert json.dumps(oa.to_record(0, [])) == json.dumps(ob.to_record(0, []))


def test_user_order_does_not_change_rewards():
    cfg = small(num_users=4)
    env1, obs = reset(cfg, 3)
    env2, _ = reset(cfg, 3)
    acts = list(obs.candidate_doc_ids[[0, 2, 4, 1]])
    _, out1 = env1.step(acts)
    # serving users in a different order must not matter: the step is simultaneous
    perm = [3, 1, 0, 2]
    env2.user_prefs = env2.user_prefs[perm]
    env2.user_eta = env2.user_eta[perm]
    env2.user_delta = env2.user_delta[perm]
    _, out2 = env2.step([acts[i] for i in perm])
    assert np.array_equal(out1.user_rewards[perm], out2.user_rewards)


def test_no_externality_between_providers():
    # provider 0 receives the same recommendations; who else gets what must not matter
    cfg = small(num_users=4, num_providers=3, provider_groups=[ProviderGroup(size=3)],
                user_params=UserParams((0.0, 1.0), (0.0, 0.0)))
    traces = []
    for variant in range(2):
        env, obs = reset(cfg, 8)
        own = int(env.providers[0].documents[0])
        o1, o2 = int(env.providers[1].documents[0]), int(env.providers[2].documents[0])
        trace = []
        while not env.done:
            others = [o1, o2] if variant == 0 else [o2, o2]
            _, out = env.step([own, own, *others])
            trace.append((out.provider_rewards[0], out.satisfaction[0]))
        traces.append(trace)
    assert traces[0] == traces[1]


def test_unserved_user_action():
    env, obs = reset(small(), 0)
    _, out = env.step([None, obs.candidate_doc_ids[0], None, None])
    assert np.isnan(out.user_rewards[0]) and not np.isnan(out.user_rewards[1])


def test_trajectory_log_lines(tmp_path):
    env, obs = reset(small(horizon=2), 0)
    path = tmp_path / "t.jsonl"
    with TrajectoryLogger(path) as logger:
        while not env.done:
            acts = [int(obs.candidate_doc_ids[0])] * 4
            obs, out = env.step(acts)
            logger.log(0, acts, out)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert len(lines) == 2
    assert all(rec["schema_version"] == 1 for rec in lines)
    assert lines[0]["actions"] == [lines[0]["actions"][0]] * 4
