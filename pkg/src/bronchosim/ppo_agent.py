"""Actor-critic PPO (training stage 3) over the fused state representation.

Per update the objective maximized is

    J = J_CLIP - c1 * J_VF + c2 * H

with the clipped surrogate J_CLIP = E[min(r A, clip(r, 1-eps, 1+eps) A)],
a one-step TD value error J_VF = (V(s_t) - (r_t + gamma * V_tgt(s_{t+1})))^2
against a value snapshot taken at collection time (refreshed every
rollout), and the categorical entropy bonus H. Advantages come from GAE
and are normalized per rollout batch. Policy gradients also flow into the
fusion parameters by default; stage-1 encoders stay frozen unless
explicitly unfrozen.

Rollouts step ``num_envs`` environments in lockstep on one thread, which
keeps seeded runs exactly reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndiff as nd
from .broncho_env import BronchoEnv
from .fusion import FusionConfig, FusionModel, STAGE1_PREFIXES, load_stage2
from .perception import PerceptionConfig, attach_models
from .robot import N_ACTIONS


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    epochs: int = 4
    minibatch: int = 256
    horizon: int = 2048          # env steps per update, across all envs
    lr: float = 3e-4
    num_envs: int = 8
    max_episodes: int = 500
    max_steps: int | None = None
    grad_clip: float = 0.5
    kl_limit: float = 0.05
    ema: float = 0.95            # reward-curve exponential smoothing
    sr_window: int = 20
    target_sr: float | None = None   # early stop on trailing success rate
    finetune_fusion: bool = True
    unfreeze_stage1: bool = False
    actor_layers: int = 5
    actor_width: int = 256
    # optional behavior-cloning warm start of the actor from a scripted
    # exploration dataset before any PPO update (0 = off)
    bc_epochs: int = 0
    bc_lr: float = 1e-3
    bc_batch: int = 64
    # rollout/update cycles that fit only the value head before the first
    # policy update, protecting a warm-started actor from advantage noise
    value_warmup_updates: int = 0

    def validate(self) -> None:
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (0 <= self.lam <= 1):
            raise ValueError("lambda must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip ratio must be positive")
        if self.horizon <= 0 or self.minibatch <= 0 or self.num_envs <= 0:
            raise ValueError("caps must be positive")


# --- pure pieces (oracle-testable) ------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, lam: float,
                bootstrap_value: float):
    """GAE over one trajectory slice with episode-boundary resets.

    delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t
    A_t     = sum_l (gamma*lam)^l delta_{t+l}   (reset at episode ends)
    returns = A + V
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards/values/dones length mismatch")
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        v_next = bootstrap_value if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * v_next * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def clip_surrogate(ratios, advantages, eps: float):
    """Per-sample clipped objective min(rA, clip(r,1-eps,1+eps)A)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    return np.minimum(ratios * advantages,
                      np.clip(ratios, 1.0 - eps, 1.0 + eps) * advantages)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance; single-sample batches pass through so the
    surrogate gradient direction is preserved."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size <= 1:
        return adv.copy()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# --- networks -----------------------------------------------------------------------

def build_actor_critic(store: nd.ParamStore, in_dim: int, cfg: PPOConfig,
                       rng: np.random.Generator):
    sizes = [in_dim] + [cfg.actor_width] * cfg.actor_layers
    actor = nd.MLP(store, "actor", sizes + [N_ACTIONS], rng, hidden_act="tanh")
    critic = nd.MLP(store, "critic", sizes + [1], rng, hidden_act="tanh")
    return actor, critic


def policy_forward(actor: nd.MLP, r_state: np.ndarray):
    """Categorical policy head: (probs, log-probs) for a batch of states."""
    logits = actor(nd.Tensor(np.atleast_2d(r_state)))
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite policy logits")
    ls = nd.log_softmax_rows(logits)
    probs = np.exp(ls.data.astype(np.float64))
    probs /= probs.sum(axis=1, keepdims=True)
    return probs, ls.data


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(np.searchsorted(c, rng.random() * c[-1]))


# --- the agent ------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    r_p: np.ndarray
    r_i: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    v_next: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)
    frames: np.ndarray | None = None
    backbones: np.ndarray | None = None


class PPOAgent:
    """Owns stage-1/2 parameters plus the actor-critic; single training
    thread mutates parameters, rollouts only read them."""

    def __init__(self, store: nd.ParamStore, stage1_cfg: PerceptionConfig,
                 fusion_cfg: FusionConfig, ppo_cfg: PPOConfig | None = None,
                 seed: int = 0, freeze_representation: bool = False):
        self.cfg = ppo_cfg or PPOConfig()
        self.cfg.validate()
        self.stage1_cfg = stage1_cfg
        self.fusion_cfg = fusion_cfg
        self.store = store
        self.visual, self.proprio = attach_models(store, stage1_cfg)
        self.fuser = FusionModel.from_store(store, fusion_cfg) \
            if fusion_cfg.mode == "cross_attention" else FusionModel(
                _ensure_no_fusion(store), fusion_cfg)
        self.rng = np.random.default_rng(seed)
        if "actor.l0.w" not in store:
            arc_store = nd.ParamStore()
            self.actor, self.critic = build_actor_critic(
                arc_store, fusion_cfg.out_dim, self.cfg, self.rng)
            store.merge(arc_store)
        else:
            tmp = nd.ParamStore()
            self.actor, self.critic = build_actor_critic(
                tmp, fusion_cfg.out_dim, self.cfg, np.random.default_rng(0))
            _rebind_mlp(self.actor, tmp, store)
            _rebind_mlp(self.critic, tmp, store)

        self.freeze_representation = freeze_representation
        store.set_requires_grad(True)
        for prefix in STAGE1_PREFIXES:
            store.set_requires_grad(self.cfg.unfreeze_stage1 and not freeze_representation,
                                    prefix)
        if freeze_representation or not self.cfg.finetune_fusion:
            store.set_requires_grad(False, "fusion.")
        store.set_requires_grad(False, "head_")
        self._trainable = nd.ParamStore()
        for name, t in store.items():
            if t.requires_grad:
                self._trainable._params[name] = t
        self.optimizer = nd.Adam(lr=self.cfg.lr)
        self._warmup_opt = nd.Adam(lr=self.cfg.lr)
        self._emb_cache: dict[int, dict[int, np.ndarray]] = {}

    # -- embeddings ---------------------------------------------------------

    def _frame_embedding(self, env_idx: int, frame_id: int,
                         frame: np.ndarray) -> np.ndarray:
        cache = self._emb_cache.setdefault(env_idx, {})
        emb = cache.get(frame_id)
        if emb is None:
            emb = self.visual.encode_frame(
                nd.Tensor(frame[None, None].astype(np.float32))).data[0]
            cache[frame_id] = emb
            for old in [k for k in cache if k < frame_id - 4]:
                del cache[old]
        return emb

    def observe(self, obs, env_idx: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Observation -> (r_proprio, r_image), caching per-frame conv work."""
        embs = [self._frame_embedding(env_idx, fid, fr)
                for fid, fr in zip(obs.frame_ids, obs.frames)]
        tensors = [nd.Tensor(e[None]) for e in embs]
        r_i = self.visual.encode_sequence_from_embeddings(tensors).data[0]
        r_p = self.proprio.encode(nd.Tensor(obs.backbone[None])).data[0]
        return r_p, r_i

    def invalidate_cache(self, env_idx: int | None = None) -> None:
        if env_idx is None:
            self._emb_cache.clear()
        else:
            self._emb_cache.pop(env_idx, None)

    def r_state(self, r_p: np.ndarray, r_i: np.ndarray) -> np.ndarray:
        return self.fuser.fuse(nd.Tensor(np.atleast_2d(r_p)),
                               nd.Tensor(np.atleast_2d(r_i))).data

    def act_batch(self, r_p: np.ndarray, r_i: np.ndarray, greedy: bool = False):
        """(B,64)x2 -> actions, logp, values, probs."""
        states = self.r_state(r_p, r_i)
        probs, ls = policy_forward(self.actor, states)
        values = self.critic(nd.Tensor(states)).data[:, 0]
        if greedy:
            actions = probs.argmax(axis=1)
        else:
            actions = np.array([sample_categorical(p, self.rng) for p in probs])
        logp = ls[np.arange(len(actions)), actions]
        return actions, logp, values, probs

    # -- rollout collection ---------------------------------------------------

    def collect(self, envs: list[BronchoEnv], horizon: int, seed_stream,
                episode_log: list, episode_state: dict) -> RolloutBatch:
        cfg = self.cfg
        n = len(envs)
        store_raw = cfg.unfreeze_stage1 and not self.freeze_representation
        data = {k: [] for k in ("r_p", "r_i", "a", "lp", "r", "v", "d")}
        raw_frames, raw_backbones = [], []
        obs = episode_state.setdefault("obs", [None] * n)
        for i, env in enumerate(envs):
            if obs[i] is None:
                res = env.reset(seed=next(seed_stream))
                self.invalidate_cache(i)
                obs[i] = res.observation
                episode_state.setdefault("ret", [0.0] * n)
                episode_state.setdefault("len", [0] * n)

        steps = 0
        while steps < horizon:
            emb = [self.observe(obs[i], i) for i in range(n)]
            r_p = np.stack([e[0] for e in emb])
            r_i = np.stack([e[1] for e in emb])
            actions, logp, values, _ = self.act_batch(r_p, r_i)
            for i, env in enumerate(envs):
                res = env.step(int(actions[i]))
                data["r_p"].append(r_p[i])
                data["r_i"].append(r_i[i])
                data["a"].append(int(actions[i]))
                data["lp"].append(float(logp[i]))
                data["r"].append(float(res.reward))
                data["v"].append(float(values[i]))
                data["d"].append(bool(res.done))
                if store_raw:
                    raw_frames.append(obs[i].frames)
                    raw_backbones.append(obs[i].backbone)
                episode_state["ret"][i] += res.reward
                episode_state["len"][i] += 1
                if res.done:
                    episode_log.append({
                        "return": episode_state["ret"][i],
                        "steps": episode_state["len"][i],
                        "success": res.done_reason == "reached",
                        "reason": res.done_reason,
                    })
                    episode_state["ret"][i] = 0.0
                    episode_state["len"][i] = 0
                    reset = env.reset(seed=next(seed_stream))
                    self.invalidate_cache(i)
                    obs[i] = reset.observation
                else:
                    obs[i] = res.observation
                steps += 1

        # interleaved env streams: de-interleave for per-env GAE
        T = len(data["a"])
        per_env = [list(range(i, T, n)) for i in range(n)]
        emb_last = [self.observe(obs[i], i) for i in range(n)]
        r_p_last = np.stack([e[0] for e in emb_last])
        r_i_last = np.stack([e[1] for e in emb_last])
        boot = self.critic(nd.Tensor(self.r_state(r_p_last, r_i_last))).data[:, 0]

        adv = np.zeros(T)
        ret = np.zeros(T)
        v_next = np.zeros(T)
        values_arr = np.array(data["v"])
        dones_arr = np.array(data["d"], dtype=bool)
        rewards_arr = np.array(data["r"])
        for i, idx in enumerate(per_env):
            if not idx:
                continue
            a, r = compute_gae(rewards_arr[idx], values_arr[idx], dones_arr[idx],
                               cfg.gamma, cfg.lam, float(boot[i]))
            adv[idx] = a
            ret[idx] = r
            vn = np.append(values_arr[idx][1:], float(boot[i]))
            v_next[idx] = vn

        return RolloutBatch(
            r_p=np.stack(data["r_p"]), r_i=np.stack(data["r_i"]),
            actions=np.array(data["a"]), old_logp=np.array(data["lp"]),
            rewards=rewards_arr, values=values_arr, v_next=v_next,
            dones=dones_arr, advantages=adv, returns=ret,
            frames=np.stack(raw_frames) if raw_frames else None,
            backbones=np.stack(raw_backbones) if raw_backbones else None,
        )

    # -- optimization -----------------------------------------------------------

    def _loss_graph(self, idx: np.ndarray, batch: RolloutBatch, adv_norm: np.ndarray):
        cfg = self.cfg
        if batch.frames is not None:
            stacks = nd.Tensor(batch.frames[idx])
            r_i = self.visual.encode_sequence(stacks)
            r_p = self.proprio.encode(nd.Tensor(batch.backbones[idx]))
        else:
            r_i = nd.Tensor(batch.r_i[idx])
            r_p = nd.Tensor(batch.r_p[idx])
        states = self.fuser.fuse(r_p, r_i)
        logits = self.actor(states)
        ls = nd.log_softmax_rows(logits)
        logp = nd.take_along_rows(ls, batch.actions[idx])
        ratio = nd.exp(nd.add(logp, -batch.old_logp[idx].astype(logits.dtype)))
        adv = adv_norm[idx].astype(logits.dtype.type)
        surr = nd.minimum(nd.mul(ratio, adv),
                          nd.mul(nd.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv))
        j_clip = nd.tmean(surr)
        td = (batch.rewards[idx] + cfg.gamma * batch.v_next[idx]
              * (1.0 - batch.dones[idx])).astype(logits.dtype.type)
        v = self.critic(states)
        j_vf = nd.mse_loss(nd.reshape(v, (len(idx),)), td)
        p = nd.exp(ls)
        entropy = nd.tmean(nd.mul(nd.tsum(nd.mul(p, ls), axis=1), -1.0))
        objective = nd.add(nd.add(j_clip, nd.mul(j_vf, -cfg.c1)),
                           nd.mul(entropy, cfg.c2))
        loss = nd.mul(objective, -1.0)
        diag = {"j_clip": j_clip.item(), "j_vf": j_vf.item(),
                "entropy": entropy.item(),
                "new_logp": logp.data.copy()}
        return loss, diag

    def update(self, batch: RolloutBatch, value_only: bool = False) -> dict:
        cfg = self.cfg
        T = len(batch.actions)
        adv_norm = normalize_advantages(batch.advantages)
        diag_hist = {"j_clip": [], "j_vf": [], "entropy": [], "kl": []}
        stop = False
        for epoch in range(cfg.epochs):
            order = self.rng.permutation(T)
            for s in range(0, T, cfg.minibatch):
                idx = order[s:s + cfg.minibatch]
                if value_only:
                    td = (batch.rewards[idx] + cfg.gamma * batch.v_next[idx]
                          * (1.0 - batch.dones[idx]))
                    v = self.critic(nd.Tensor(self.r_state(batch.r_p[idx],
                                                           batch.r_i[idx])))
                    loss = nd.mse_loss(nd.reshape(v, (len(idx),)),
                                       td.astype(v.dtype))
                    loss.backward()
                    critic_params = self.store.subset("critic.")
                    if cfg.grad_clip:
                        nd.clip_grad_norm(critic_params, cfg.grad_clip)
                    self._warmup_opt.step(critic_params)
                    diag_hist["j_vf"].append(loss.item())
                    continue
                loss, diag = self._loss_graph(idx, batch, adv_norm)
                if not np.isfinite(loss.item()):
                    raise FloatingPointError("non-finite PPO loss")
                loss.backward()
                if cfg.grad_clip:
                    nd.clip_grad_norm(self._trainable, cfg.grad_clip)
                self.optimizer.step(self._trainable)
                kl = float(np.mean(batch.old_logp[idx] - diag["new_logp"]))
                diag_hist["kl"].append(kl)
                for k in ("j_clip", "j_vf", "entropy"):
                    diag_hist[k].append(diag[k])
                if cfg.kl_limit and kl > cfg.kl_limit:
                    stop = True
                    break
            if stop:
                break
        return {k: float(np.mean(v)) if v else 0.0 for k, v in diag_hist.items()}

    # -- behavior cloning ---------------------------------------------------------

    def behavior_clone(self, dataset, epochs: int | None = None,
                       seed: int = 0, log=None) -> list[float]:
        """Warm-start the actor on recorded (observation, next action) pairs
        by cross-entropy; representations stay frozen. Returns per-epoch
        mean negative log-likelihoods."""
        from .robot import action_from_name

        cfg = self.cfg
        epochs = cfg.bc_epochs if epochs is None else epochs
        pairs = []
        for e in range(len(dataset.frames)):
            for t in range(len(dataset.frames[e]) - 1):
                name = dataset.actions[e][t + 1]
                if name is not None:
                    pairs.append((e, t, action_from_name(name).index))
        if not pairs:
            raise ValueError("dataset contains no (observation, action) pairs")
        # embed once with the frozen encoders
        r_i = np.zeros((len(pairs), self.stage1_cfg.embed_dim), dtype=np.float32)
        r_p = np.zeros_like(r_i)
        acts = np.array([a for _, _, a in pairs])
        for s in range(0, len(pairs), 128):
            chunk = pairs[s:s + 128]
            stacks = np.stack([dataset.stack_at(e, t) for e, t, _ in chunk])
            r_i[s:s + len(chunk)] = self.visual.encode_sequence(nd.Tensor(stacks)).data
            props = np.stack([dataset.backbones[e][t] for e, t, _ in chunk])
            r_p[s:s + len(chunk)] = self.proprio.encode(nd.Tensor(props)).data
        states = self.r_state(r_p, r_i)

        actor_params = self.store.subset("actor.")
        opt = nd.Adam(lr=cfg.bc_lr)
        rng = np.random.default_rng(seed)
        curve = []
        for epoch in range(epochs):
            order = rng.permutation(len(pairs))
            losses = []
            for s in range(0, len(order), cfg.bc_batch):
                idx = order[s:s + cfg.bc_batch]
                ls = nd.log_softmax_rows(self.actor(nd.Tensor(states[idx])))
                nll = nd.mul(nd.tmean(nd.take_along_rows(ls, acts[idx])), -1.0)
                nll.backward()
                opt.step(actor_params)
                losses.append(nll.item())
            curve.append(float(np.mean(losses)))
            if log and (epoch + 1) % 10 == 0:
                pred = self.actor(nd.Tensor(states)).data.argmax(axis=1)
                log(f"bc epoch {epoch + 1}/{epochs} nll {curve[-1]:.4f} "
                    f"acc {float((pred == acts).mean()):.3f}")
        return curve

    # -- training loop ------------------------------------------------------------

    def train(self, env_factory, seed: int = 0, log=None) -> list[dict]:
        """Alternate rollout collection and PPO updates; returns the
        per-episode curve (raw return, smoothed return, trailing SR)."""
        cfg = self.cfg
        envs = [env_factory(i) for i in range(cfg.num_envs)]
        seed_counter = [seed * 1_000_003]

        def seed_stream():
            while True:
                seed_counter[0] += 1
                yield seed_counter[0]

        stream = seed_stream()
        episode_log: list[dict] = []
        episode_state: dict = {}
        curve: list[dict] = []
        smoothed = None
        total_steps = 0
        logged = 0
        updates = 0
        while len(episode_log) < cfg.max_episodes:
            if cfg.max_steps is not None and total_steps >= cfg.max_steps:
                break
            batch = self.collect(envs, cfg.horizon, stream, episode_log, episode_state)
            total_steps += len(batch.actions)
            diag = self.update(batch, value_only=updates < cfg.value_warmup_updates)
            updates += 1
            while logged < len(episode_log):
                ep = episode_log[logged]
                smoothed = ep["return"] if smoothed is None else \
                    cfg.ema * smoothed + (1 - cfg.ema) * ep["return"]
                window = episode_log[max(0, logged + 1 - cfg.sr_window):logged + 1]
                sr = float(np.mean([e["success"] for e in window]))
                curve.append({"episode": logged, "return": ep["return"],
                              "smoothed": smoothed, "success": int(ep["success"]),
                              "sr_window": sr, "steps": ep["steps"]})
                logged += 1
            if log:
                recent = episode_log[-cfg.sr_window:]
                reasons = {}
                for e in recent:
                    reasons[e["reason"]] = reasons.get(e["reason"], 0) + 1
                rtxt = " ".join(f"{k}:{v}" for k, v in sorted(reasons.items()))
                log(f"episodes {len(episode_log)} steps {total_steps} "
                    f"sr {np.mean([e['success'] for e in recent]) if recent else 0:.2f} "
                    f"kl {diag['kl']:.4f} ent {diag['entropy']:.3f} [{rtxt}]")
            if cfg.target_sr is not None and curve:
                if curve[-1]["sr_window"] >= cfg.target_sr and \
                        len(episode_log) >= cfg.sr_window:
                    break
        return curve

    # -- persistence -----------------------------------------------------------------

    def save(self, path, extra_meta=None) -> None:
        meta = {"stage": 3,
                "perception": asdict(self.stage1_cfg),
                "fusion": asdict(self.fusion_cfg),
                "ppo": asdict(self.cfg)}
        meta["perception"]["conv_channels"] = list(self.stage1_cfg.conv_channels)
        if extra_meta:
            meta.update(extra_meta)
        nd.save_checkpoint(self.store, path, meta=meta)

    @classmethod
    def load(cls, path, ppo_cfg: PPOConfig | None = None, seed: int = 0,
             freeze_representation: bool = False) -> "PPOAgent":
        store, meta = nd.load_checkpoint(path)
        pc = dict(meta["perception"])
        pc["conv_channels"] = tuple(pc["conv_channels"])
        stage1_cfg = PerceptionConfig(**pc)
        fusion_cfg = FusionConfig(**meta["fusion"])
        if ppo_cfg is None and "ppo" in meta:
            ppo_cfg = PPOConfig(**meta["ppo"])
        return cls(store, stage1_cfg, fusion_cfg, ppo_cfg, seed=seed,
                   freeze_representation=freeze_representation)


def _ensure_no_fusion(store: nd.ParamStore) -> nd.ParamStore:
    return store


def _rebind_mlp(mlp: nd.MLP, tmp: nd.ParamStore, store: nd.ParamStore) -> None:
    for tmp_name in tmp.names():
        if tmp_name not in store:
            raise ValueError(f"policy checkpoint missing parameter {tmp_name!r}")
    for layer_idx, layer in enumerate(mlp.layers):
        for name, t in list(tmp._params.items()):
            if t is layer.w:
                layer.w = store[name]
            elif t is layer.b:
                layer.b = store[name]


# --- stage-3 entry points ----------------------------------------------------------

def train_stage3(env_factory, stage2_ckpt, ppo_cfg: PPOConfig | None = None,
                 seed: int = 0, out_dir: str | Path | None = None,
                 bc_dataset=None, log=None) -> tuple[PPOAgent, list[dict]]:
    """Full PPO training from a stage-2 checkpoint. Returns the trained
    agent and the reward curve; optionally writes policy.ckpt + curve CSV.
    With ``bc_epochs`` configured and a dataset given, the actor is first
    behavior-cloned on the recorded exploration actions."""
    store, stage1_cfg, fusion_cfg, _ = load_stage2(stage2_ckpt)
    agent = PPOAgent(store, stage1_cfg, fusion_cfg, ppo_cfg, seed=seed)
    if agent.cfg.bc_epochs > 0 and bc_dataset is not None:
        agent.behavior_clone(bc_dataset, seed=seed, log=log)
    curve = agent.train(env_factory, seed=seed, log=log)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        agent.save(out / "policy.ckpt")
        write_curve_csv(out / "curve.csv", curve)
    return agent, curve


def transfer_train(env_factory, policy_ckpt, ppo_cfg: PPOConfig | None = None,
                   seed: int = 0, warm_start: bool = True,
                   out_dir: str | Path | None = None,
                   log=None) -> tuple[PPOAgent, list[dict]]:
    """Retrain the RL module on a new environment with stage-1 and stage-2
    parameters frozen; aborts if the representation hash drifts."""
    store, meta = nd.load_checkpoint(policy_ckpt)
    pc = dict(meta["perception"])
    pc["conv_channels"] = tuple(pc["conv_channels"])
    stage1_cfg = PerceptionConfig(**pc)
    fusion_cfg = FusionConfig(**meta["fusion"])
    if ppo_cfg is None and "ppo" in meta:
        ppo_cfg = PPOConfig(**meta["ppo"])
    if not warm_start:
        for prefix in ("actor.", "critic."):
            names = [n for n in store.names() if n.startswith(prefix)]
            for n in names:
                del store._params[n]
        tmp_rng = np.random.default_rng(seed)
        fresh = nd.ParamStore()
        build_actor_critic(fresh, fusion_cfg.out_dim, ppo_cfg or PPOConfig(), tmp_rng)
        store.merge(fresh)
    agent = PPOAgent(store, stage1_cfg, fusion_cfg, ppo_cfg, seed=seed,
                     freeze_representation=True)
    rep_prefixes = STAGE1_PREFIXES + ("fusion.", "head_")
    pre = agent.store.content_hash(rep_prefixes)
    curve = agent.train(env_factory, seed=seed, log=log)
    post = agent.store.content_hash(rep_prefixes)
    if pre != post:
        raise RuntimeError("representation parameters drifted during transfer training")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        agent.save(out / "policy.ckpt")
        write_curve_csv(out / "curve.csv", curve)
    return agent, curve


def write_curve_csv(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["episode", "return", "smoothed",
                                                "success", "sr_window", "steps"])
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def episodes_to_sr(curve: list[dict], sr: float) -> int | None:
    """First episode index whose trailing-window SR reaches the target."""
    for row in curve:
        if row["sr_window"] >= sr:
            return row["episode"]
    return None
