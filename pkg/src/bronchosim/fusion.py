"""Cross-attention fusion of the two modality embeddings (training stage 2),
plus the concat/sum/single-modality ablation fusers.

The attention form is

    r_state = softmax((W_Q r_proprio)(W_K r_image)^T / sqrt(d)) W_V r_image

applied over a token decomposition of each 64-dim embedding (8 tokens of
8 dims by default, square projection matrices of the token dimension).
With a single token the softmax is degenerate (weight 1), which is kept
available behind ``tokens=1`` for the literal vector reading.

Stage-2 training optimizes the projections plus two fresh reconstruction
heads mapping r_state into each frozen stage-1 decoder's latent space, so
the fused vector can still reconstruct both modalities. Stage-1 parameters
stay frozen; drift is detected by hashing and aborts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndiff as nd
from .perception import PerceptionConfig, Stage1Dataset, attach_models


FUSION_MODES = ("cross_attention", "concat", "sum", "vision_only", "proprio_only")


@dataclass
class FusionConfig:
    mode: str = "cross_attention"
    embed_dim: int = 64
    tokens: int = 8
    lr: float = 1e-3
    batch_size: int = 64

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.embed_dim % self.tokens != 0:
            raise ValueError("tokens must divide embed_dim")

    @property
    def token_dim(self) -> int:
        return self.embed_dim // self.tokens

    @property
    def out_dim(self) -> int:
        return 2 * self.embed_dim if self.mode == "concat" else self.embed_dim


class FusionModel:
    """Pure, deterministic fuser; cross-attention owns W_Q/W_K/W_V."""

    def __init__(self, store: nd.ParamStore, cfg: FusionConfig,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        if cfg.mode == "cross_attention":
            rng = rng or np.random.default_rng(0)
            d = cfg.token_dim
            self.wq = store.add("fusion.wq", nd.fan_in_normal(rng, (d, d), fan_in=d, gain=1.0))
            self.wk = store.add("fusion.wk", nd.fan_in_normal(rng, (d, d), fan_in=d, gain=1.0))
            self.wv = store.add("fusion.wv", nd.fan_in_normal(rng, (d, d), fan_in=d, gain=1.0))

    @classmethod
    def from_store(cls, store: nd.ParamStore, cfg: FusionConfig) -> "FusionModel":
        m = cls.__new__(cls)
        m.cfg = cfg
        if cfg.mode == "cross_attention":
            m.wq = store["fusion.wq"]
            m.wk = store["fusion.wk"]
            m.wv = store["fusion.wv"]
        return m

    def fuse(self, r_proprio: nd.Tensor, r_image: nd.Tensor) -> nd.Tensor:
        cfg = self.cfg
        if r_proprio.shape[1] != cfg.embed_dim or r_image.shape[1] != cfg.embed_dim:
            raise ValueError(f"embeddings must be {cfg.embed_dim}-dim, got "
                             f"{r_proprio.shape} and {r_image.shape}")
        if cfg.mode == "sum":
            return nd.add(r_proprio, r_image)
        if cfg.mode == "concat":
            return nd.concat([r_proprio, r_image], axis=1)
        if cfg.mode == "vision_only":
            return r_image
        if cfg.mode == "proprio_only":
            return r_proprio
        return self._cross_attention(r_proprio, r_image)

    def _cross_attention(self, r_p: nd.Tensor, r_i: nd.Tensor) -> nd.Tensor:
        cfg = self.cfg
        b = r_p.shape[0]
        t, d = cfg.tokens, cfg.token_dim
        tp = nd.reshape(r_p, (b * t, d))
        ti = nd.reshape(r_i, (b * t, d))
        q = nd.reshape(nd.matmul(tp, self.wq), (b, t, d))
        k = nd.reshape(nd.matmul(ti, self.wk), (b, t, d))
        v = nd.reshape(nd.matmul(ti, self.wv), (b, t, d))
        logits = nd.mul(nd.bmm3(q, nd.transpose_last2(k)), 1.0 / np.sqrt(d))
        weights = nd.softmax_rows(logits)           # (b, t, t), rows sum to 1
        fused = nd.bmm3(weights, v)
        return nd.reshape(fused, (b, t * d))

    def attention_weights(self, r_p: np.ndarray, r_i: np.ndarray) -> np.ndarray:
        """Attention matrix for inspection/testing, (B, tokens, tokens)."""
        if self.cfg.mode != "cross_attention":
            raise ValueError("attention weights exist only in cross_attention mode")
        cfg = self.cfg
        rp = np.atleast_2d(np.asarray(r_p))
        ri = np.atleast_2d(np.asarray(r_i))
        t, d = cfg.tokens, cfg.token_dim
        q = rp.reshape(-1, t, d) @ self.wq.data
        k = ri.reshape(-1, t, d) @ self.wk.data
        logits = (q @ k.swapaxes(-1, -2) / np.sqrt(d)).astype(np.float64)
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)


STAGE1_PREFIXES = ("visual_", "proprio_")


def train_stage2(stage1_store: nd.ParamStore, stage1_cfg: PerceptionConfig,
                 dataset: Stage1Dataset, epochs: int,
                 cfg: FusionConfig | None = None, seed: int = 0,
                 log=None) -> tuple[nd.ParamStore, dict]:
    """Train fusion + reconstruction heads against both frozen decoders.

    Returns a combined store (frozen stage-1 params + fusion + heads) and
    the loss curves. Raises if the stage-1 hash drifts.
    """
    cfg = cfg or FusionConfig()
    rng = np.random.default_rng(seed)
    visual, proprio = attach_models(stage1_store, stage1_cfg)
    stage1_store.set_requires_grad(False)
    frozen_hash = stage1_store.content_hash(STAGE1_PREFIXES)

    store = nd.ParamStore()
    fuser = FusionModel(store, cfg, rng)
    head_v = nd.Dense(store, "head_visual", cfg.out_dim, cfg.embed_dim, rng)
    head_p = nd.Dense(store, "head_proprio", cfg.out_dim, cfg.embed_dim, rng)
    opt = nd.Adam(lr=cfg.lr)

    # frozen encoders: embed the whole dataset once
    r_imgs, r_props, targets_v_idx = _embed_dataset(dataset, visual, proprio, stage1_cfg)

    curves = {"combined": [], "visual": [], "proprio": []}
    n = len(dataset.visual_index)
    for epoch in range(epochs):
        order = rng.permutation(n)
        ep_v, ep_p = [], []
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            r_i = nd.Tensor(r_imgs[idx])
            r_p = nd.Tensor(r_props[idx])
            fused = fuser.fuse(r_p, r_i)
            z_v = head_v(fused)
            z_p = head_p(fused)
            pred_frame = visual.decode(z_v)
            tgt = np.stack([dataset.frames[e][t + 1] for e, t in
                            (dataset.visual_index[i] for i in idx)])
            tgt = tgt.astype(np.float32)[:, None] / 255.0
            recon_p = proprio.decode(z_p)
            tgt_p = np.stack([dataset.backbones[e][t] for e, t in
                              (dataset.visual_index[i] for i in idx)])
            loss_v = nd.mse_loss(pred_frame, tgt)
            loss_p = nd.mse_loss(recon_p, tgt_p)
            loss = nd.add(loss_v, loss_p)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"stage-2 loss diverged at epoch {epoch}")
            loss.backward()
            opt.step(store)
            ep_v.append(loss_v.item())
            ep_p.append(loss_p.item())
        curves["visual"].append(float(np.mean(ep_v)))
        curves["proprio"].append(float(np.mean(ep_p)))
        curves["combined"].append(curves["visual"][-1] + curves["proprio"][-1])
        if log:
            log(f"stage2 epoch {epoch + 1}/{epochs} combined {curves['combined'][-1]:.5f}")

    if stage1_store.content_hash(STAGE1_PREFIXES) != frozen_hash:
        raise RuntimeError("frozen stage-1 parameters drifted during stage-2 training")

    combined = nd.ParamStore()
    combined.merge(stage1_store)
    combined.merge(store)
    return combined, curves


def _embed_dataset(dataset: Stage1Dataset, visual, proprio, stage1_cfg,
                   batch: int = 64):
    idx = dataset.visual_index
    r_imgs = np.zeros((len(idx), stage1_cfg.embed_dim), dtype=np.float32)
    r_props = np.zeros((len(idx), stage1_cfg.embed_dim), dtype=np.float32)
    for s in range(0, len(idx), batch):
        pairs = idx[s:s + batch]
        stacks, _ = dataset.visual_batch(pairs)
        r_imgs[s:s + len(pairs)] = visual.encode_sequence(nd.Tensor(stacks)).data
        props = np.stack([dataset.backbones[e][t] for e, t in pairs])
        r_props[s:s + len(pairs)] = proprio.encode(nd.Tensor(props)).data
    return r_imgs, r_props, idx


def save_stage2(store: nd.ParamStore, stage1_cfg: PerceptionConfig,
                fusion_cfg: FusionConfig, path, extra_meta=None) -> None:
    meta = {"stage": 2,
            "perception": asdict(stage1_cfg),
            "fusion": asdict(fusion_cfg)}
    meta["perception"]["conv_channels"] = list(stage1_cfg.conv_channels)
    if extra_meta:
        meta.update(extra_meta)
    nd.save_checkpoint(store, path, meta=meta)


def load_stage2(path):
    store, meta = nd.load_checkpoint(path)
    pc = dict(meta["perception"])
    pc["conv_channels"] = tuple(pc["conv_channels"])
    stage1_cfg = PerceptionConfig(**pc)
    fusion_cfg = FusionConfig(**meta["fusion"])
    return store, stage1_cfg, fusion_cfg, meta
