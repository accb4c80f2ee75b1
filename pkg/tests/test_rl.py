import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cailab.cai import CaiConfig, select_influential_action
from cailab.env_slide import SlideParams, goal_reward
from cailab.rl import (AgentConfig, DDPGAgent, Episode, ReplayBuffer, TrainConfig, Trainer,
                       bonus_reward, episode_priorities, episodes_to, evaluate, explore_action,
                       recompute_scores)
from reference_pipeline import run_plain

T = 30


def random_episode(rng, scores=None):
    obs = np.cumsum(rng.normal(0, 0.05, size=(T + 1, 4)), axis=0) + 0.5
    return Episode(obs, rng.uniform(-1, 1, size=(T, 1)), float(rng.uniform(0.6, 0.95)), 0.05, scores)


def filled_buffer(rng, n=6, scored=True):
    buf = ReplayBuffer(n + 2, T, 4, 1)
    for _ in range(n):
        sc = rng.uniform(0, 2, size=T + 1) if scored else None
        buf.add(random_episode(rng, sc))
    return buf


class LinearActionModel:
    def predict_dist(self, X):
        a = np.asarray(X)[:, -1:]
        return np.concatenate([a, 0.5 * a], axis=1), np.full((len(a), 2), 0.3)


class AblatedModel:
    def predict_dist(self, X):
        s = np.asarray(X)[:, :4]
        return s[:, 2:4] * 0.1, np.full((len(s), 2), 0.2)


class TestPriorities:
    def test_hand_example(self):
        np.testing.assert_allclose(episode_priorities([5.0, 1.0, 3.0]), [6 / 11, 2 / 11, 3 / 11], atol=1e-15)

    def test_ties_favour_newer(self):
        # oldest gets rank 1 -> p = 1/3; newest rank 3 -> p = 1
        np.testing.assert_allclose(episode_priorities([2.0, 2.0, 2.0]), [2 / 11, 3 / 11, 6 / 11], atol=1e-15)

    def test_explicit_ages(self):
        np.testing.assert_allclose(episode_priorities([2.0, 2.0], ages=[5, 1]), [2 / 3, 1 / 3])

    def test_unscored_rejected(self):
        with pytest.raises(ValueError):
            episode_priorities([1.0, np.nan])
        with pytest.raises(ValueError):
            filled_buffer(np.random.default_rng(0), scored=False).priorities()

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 50), c=st.floats(1e-3, 1e3))
    def test_rank_statistic(self, seed, m, c):
        totals = np.random.default_rng(seed).uniform(0, 10, size=m)
        p = episode_priorities(totals)
        assert np.array_equal(episode_priorities(c * totals), p)
        assert np.array_equal(episode_priorities(np.log1p(totals) + 7.0), p)
        assert np.all(p > 0) and abs(p.sum() - 1.0) <= 1e-12

    def test_sampling_frequencies(self):
        buf = ReplayBuffer(3, T, 4, 1)
        rng = np.random.default_rng(1)
        for total in (5.0, 1.0, 3.0):
            sc = np.zeros(T + 1)
            sc[:T] = total / T
            buf.add(random_episode(rng, sc))
        batch = buf.sample(100_000, rng, prioritized=True)
        freq = np.bincount(batch["episode"], minlength=3) / 100_000
        np.testing.assert_allclose(freq, [6 / 11, 2 / 11, 3 / 11], atol=0.02)


class TestSampling:
    def test_her_keeps_transition(self):
        rng = np.random.default_rng(2)
        buf = filled_buffer(rng)
        b = buf.sample(4000, rng, her_prob=0.8)
        np.testing.assert_array_equal(b["obs"], buf.obs[b["episode"], b["t"]])
        np.testing.assert_array_equal(b["next_obs"], buf.obs[b["episode"], b["t"] + 1])
        np.testing.assert_array_equal(b["action"], buf.actions[b["episode"], b["t"]])
        np.testing.assert_array_equal(b["reward"], goal_reward(b["next_obs"][:, 2], b["goal"][:, 0], 0.05))

    def test_relabels_with_future_goals(self):
        rng = np.random.default_rng(3)
        buf = filled_buffer(rng)
        b = buf.sample(4000, rng, her_prob=1.0)
        for e, t, g in zip(b["episode"][:300], b["t"][:300], b["goal"][:300, 0]):
            assert g in buf.obs[e, t + 1:, 2]

    def test_no_relabel(self):
        rng = np.random.default_rng(4)
        buf = filled_buffer(rng)
        b = buf.sample(500, rng, her_prob=0.0)
        np.testing.assert_array_equal(b["goal"][:, 0], buf.goals[b["episode"]])

    def test_next_state_goal_gives_zero_reward(self):
        buf = ReplayBuffer(1, T, 4, 1)
        obs = np.full((T + 1, 4), 0.3)
        obs[:, 2] = np.arange(T + 1)  # every future position differs by >= 1
        buf.add(Episode(obs, np.zeros((T, 1)), 100.0))
        b = buf.sample(2000, np.random.default_rng(5), her_prob=1.0)
        hit = b["goal"][:, 0] == b["next_obs"][:, 2]
        assert hit.any()
        assert np.all(b["reward"][hit] == 0.0) and np.all(b["reward"][~hit] == -1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            ReplayBuffer(2, T, 4, 1).sample(3, np.random.default_rng(0))

    def test_ring_overwrites_oldest(self):
        rng = np.random.default_rng(6)
        buf = ReplayBuffer(2, T, 4, 1)
        eps = [random_episode(rng) for _ in range(3)]
        for e in eps:
            buf.add(e)
        assert len(buf) == 2
        np.testing.assert_array_equal(buf.obs[0], eps[2].obs)
        assert list(buf.ids[:2]) == [2, 1]

    def test_episode_length_checked(self):
        with pytest.raises(ValueError):
            ReplayBuffer(2, T + 1, 4, 1).add(random_episode(np.random.default_rng(0)))

    def test_episode_totals(self):
        rng = np.random.default_rng(7)
        sc = rng.uniform(0, 1, T + 1)
        ep = random_episode(rng, sc)
        assert ep.total_influence == pytest.approx(sc[:T].sum())
        with pytest.raises(ValueError):
            _ = random_episode(rng).total_influence


class TestBonus:
    def test_examples(self):
        assert bonus_reward(-1.0, 10.0, 0.2, 2.0) == pytest.approx(-0.6)
        assert bonus_reward(-1.0, 3.0, 0.0, 2.0) == -1.0
        assert bonus_reward(0.0, 5.0, 0.2, 2.0) == 0.0

    def test_batch_bonus_uses_next_state_score(self):
        rng = np.random.default_rng(8)
        buf = filled_buffer(rng)
        b = buf.sample(1000, rng, her_prob=0.5, bonus_scale=0.2, max_bonus=1.0)
        base = goal_reward(b["next_obs"][:, 2], b["goal"][:, 0], 0.05)
        cai = buf.scores[b["episode"], b["t"] + 1]
        np.testing.assert_allclose(b["reward"], np.minimum(0.0, base + 0.2 * np.minimum(cai, 1.0)))
        assert np.all(b["reward"] <= 0.0)


def make_agent(seed=0, **kw):
    cfg = AgentConfig(**kw)
    return DDPGAgent(4, 1, 1, cfg, np.random.default_rng(seed)), cfg


def random_batch(rng, n=64, reward=None):
    return {"obs": rng.uniform(0, 1, (n, 4)), "goal": rng.uniform(0.6, 0.95, (n, 1)),
            "action": rng.uniform(-1, 1, (n, 1)),
            "reward": -rng.integers(0, 2, n).astype(float) if reward is None else np.full(n, reward),
            "next_obs": rng.uniform(0, 1, (n, 4)), "done": np.zeros(n, dtype=bool)}


class TestAgent:
    def test_polyak_zero_copies(self):
        rng = np.random.default_rng(9)
        agent, _ = make_agent(polyak=0.0)
        agent.update(random_batch(rng))
        agent.update_targets()
        for a, b in zip(agent.actor.parameters() + agent.critic.parameters(),
                        agent.actor_target.parameters() + agent.critic_target.parameters()):
            assert np.array_equal(a, b)

    def test_polyak_average(self):
        rng = np.random.default_rng(10)
        agent, _ = make_agent()
        old = [p.copy() for p in agent.critic_target.parameters()]
        agent.update(random_batch(rng))
        agent.update_targets()
        for o, p, t in zip(old, agent.critic.parameters(), agent.critic_target.parameters()):
            np.testing.assert_allclose(t, 0.95 * o + 0.05 * p, atol=1e-15)

    def test_critic_loss_decreases_on_frozen_batch(self):
        rng = np.random.default_rng(11)
        agent, _ = make_agent()
        batch = random_batch(rng)
        losses = [agent.update(batch)["critic_loss"] for _ in range(50)]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_zero_reward_critic_to_zero(self):
        rng = np.random.default_rng(12)
        agent, _ = make_agent()
        for _ in range(1500):
            agent.update(random_batch(rng, reward=0.0))
            agent.update_targets()
        b = random_batch(rng)
        x = agent._inputs(b["obs"], b["goal"])
        q = agent.critic.forward(np.concatenate([x, b["action"]], axis=1))
        assert np.max(np.abs(q)) < 0.05

    def test_targets_clipped(self):
        rng = np.random.default_rng(13)
        agent, _ = make_agent()
        for p in agent.critic_target.parameters():
            p *= 50.0
        out = agent.update(random_batch(rng, reward=-1.0))
        assert -50.0 <= out["q_target_min"] <= out["q_target_max"] <= 0.0

    def test_empty_batch(self):
        agent, _ = make_agent()
        b = random_batch(np.random.default_rng(0), n=0)
        with pytest.raises(ValueError):
            agent.update(b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AgentConfig(random_eps=1.5)
        with pytest.raises(ValueError):
            AgentConfig(polyak=-0.1)


class TestExplore:
    def test_pure_actor(self):
        agent, cfg = make_agent(random_eps=0.0, action_noise=0.0)
        s, g = np.array([0.2, 0.0, 0.45, 0.0]), [0.7]
        a = explore_action(agent, None, s, g, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(a, np.clip(agent.act(s, g), -1, 1))

    def test_uniform_when_always_random(self):
        agent, cfg = make_agent(random_eps=1.0, active_fraction=0.0)
        rng = np.random.default_rng(1)
        a = np.array([explore_action(agent, None, np.zeros(4), [0.7], cfg, rng)[0] for _ in range(5000)])
        assert np.all((a >= -1) & (a <= 1))
        assert abs(a.mean()) < 0.05 and abs(a.var() - 1 / 3) < 0.02

    def test_active_fraction_matches_argmax(self):
        agent, cfg = make_agent(random_eps=0.3, active_fraction=1.0)
        model = LinearActionModel()
        cai_cfg = CaiConfig(8)
        states = np.random.default_rng(2).uniform(0, 1, (64, 4))
        n, hits = 100_000, 0
        for i in range(n):
            s = states[i % 64]
            a = explore_action(agent, model, s, [0.7], cfg, np.random.default_rng([1, i]), cai_cfg,
                               np.random.default_rng([2, i]))
            assert -1 <= a[0] <= 1
            replay = np.random.default_rng([2, i])
            replay.random()
            hits += np.array_equal(a, select_influential_action(model, s, cai_cfg, replay))
        assert abs(hits / n - 0.3) < 0.01

    def test_active_does_not_touch_main_stream(self):
        agent, cfg = make_agent(random_eps=1.0, active_fraction=1.0)
        rng = np.random.default_rng(3)
        explore_action(agent, LinearActionModel(), np.zeros(4), [0.7], cfg, rng, CaiConfig(8),
                       np.random.default_rng(4))
        ref = np.random.default_rng(3)
        ref.random()
        assert rng.random() == ref.random()


class TestRecompute:
    def test_deterministic_and_normalized(self):
        rng = np.random.default_rng(14)
        buf = filled_buffer(rng, scored=False)
        recompute_scores(buf, LinearActionModel(), CaiConfig(8), seed=3)
        first = buf.scores[: buf.size].copy()
        recompute_scores(buf, LinearActionModel(), CaiConfig(8), seed=3)
        np.testing.assert_array_equal(buf.scores[: buf.size], first)
        assert abs(buf.priorities().sum() - 1.0) <= 1e-12

    def test_ablated_model_ties(self):
        rng = np.random.default_rng(15)
        buf = filled_buffer(rng, n=3, scored=False)
        recompute_scores(buf, AblatedModel(), CaiConfig(8), seed=0)
        assert np.all(buf.totals() == 0.0)
        np.testing.assert_allclose(buf.priorities(), [2 / 11, 3 / 11, 6 / 11], atol=1e-15)


def tiny_config(**kw):
    kw.setdefault("n_episodes", 20)
    kw.setdefault("warmup_episodes", 10)
    kw.setdefault("eval_every", 10)
    kw.setdefault("eval_episodes", 5)
    kw.setdefault("model_every", 10)
    kw.setdefault("model_first_batches", 20)
    kw.setdefault("model_batches", 5)
    kw.setdefault("model_hidden", (16, 16))
    kw.setdefault("n_actions", 8)
    kw.setdefault("agent", AgentConfig(batch_size=32, updates_per_episode=2))
    return TrainConfig(**kw)


class TestTrain:
    def test_curve_layout(self):
        curve = Trainer(tiny_config(), "baseline", 0).run()
        assert [r["episode"] for r in curve] == [0, 10, 20]
        assert all(0.0 <= r["success_rate"] <= 1.0 for r in curve)
        assert all(np.isfinite([r["critic_loss"], r["actor_loss"], r["mean_cai"]]).all() for r in curve)

    @pytest.mark.parametrize("variant", ["baseline", "combined"])
    def test_deterministic(self, variant):
        a = Trainer(tiny_config(), variant, 5).run()
        b = Trainer(tiny_config(), variant, 5).run()
        assert a == b

    def test_scores_filled_for_model_variants(self):
        tr = Trainer(tiny_config(), "cai_p", 1)
        tr.run()
        assert not np.isnan(tr.buffer.scores[: tr.buffer.size]).any()
        assert np.all(tr.buffer.scores[: tr.buffer.size] >= 0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            Trainer(tiny_config(), "vime", 0)

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = Trainer(tiny_config(), "combined", 2)
        full.run()
        part = Trainer(tiny_config(), "combined", 2)
        part.run(until=10, checkpoint=tmp_path / "ck.pkl")
        resumed = Trainer.load(tmp_path / "ck.pkl")
        resumed.run()
        assert resumed.curve == full.curve
        for p, q in zip(resumed.agent.actor.parameters(), full.agent.actor.parameters()):
            assert np.array_equal(p, q)

    def test_stop_at(self):
        curve = Trainer(tiny_config(stop_at=0.0), "baseline", 0).run()
        assert len(curve) == 1

    def test_baseline_equals_plain_pipeline(self):
        cfg = tiny_config(n_episodes=15, warmup_episodes=12, eval_every=100)
        tr = Trainer(cfg, "baseline", 7)
        tr.run()
        ref = run_plain(cfg.agent, cfg.env, 7, 15, warmup=12, capacity=cfg.buffer_episodes)
        for name in ("actor", "critic", "actor_target", "critic_target"):
            for p, q in zip(getattr(tr.agent, name).parameters(), getattr(ref, name).parameters()):
                assert np.array_equal(p, q)
        assert np.array_equal(tr.agent.obs_norm.mean, ref.obs_norm.mean)


def test_episodes_to():
    curve = [{"episode": 0, "success_rate": 0.1}, {"episode": 200, "success_rate": 0.7}]
    assert episodes_to(curve, 0.6) == 200
    assert episodes_to(curve, 0.9) == float("inf")


def test_evaluate_deterministic():
    agent, _ = make_agent(3)
    p = SlideParams()
    a = evaluate(agent, p, 20, np.random.default_rng(0))
    assert a == evaluate(agent, p, 20, np.random.default_rng(0))
    with pytest.raises(ValueError):
        evaluate(agent, p, 0, np.random.default_rng(0))
