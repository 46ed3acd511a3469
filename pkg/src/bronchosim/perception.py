"""Modality-specific representation learning (training stage 1).

Two independent reconstruction tasks on exploration data:

* visual dynamics: each of the three stacked frames runs through a small
  conv encoder, the embeddings feed an LSTM, and a deconv decoder predicts
  the NEXT frame from the final hidden state;
* proprioception: a vanilla dense autoencoder reconstructs the backbone
  coordinate array.

Both objectives are plain MSE minimized by Adam; the two parameter groups
never mix. Embedding dimension is 64 throughout.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndiff as nd
from .robot import Action
from . import trajectory


@dataclass
class PerceptionConfig:
    resolution: int = 64
    embed_dim: int = 64
    n_backbone: int = 20
    conv_channels: tuple = (8, 16)
    proprio_hidden: int = 128
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.resolution % 4 != 0:
            raise ValueError("resolution must be divisible by 4")


class VisualDynamicsModel:
    """f (conv encoder), LSTM over 3 frames, g (deconv decoder)."""

    def __init__(self, store: nd.ParamStore, cfg: PerceptionConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        c1, c2 = cfg.conv_channels
        res = cfg.resolution
        self.conv1 = nd.Conv2d(store, "visual_encoder.conv1", 1, c1, 4, 2, rng, act="relu")
        self.conv2 = nd.Conv2d(store, "visual_encoder.conv2", c1, c2, 4, 2, rng, act="relu")
        s1 = (res - 4) // 2 + 1
        s2 = (s1 - 4) // 2 + 1
        self._flat = c2 * s2 * s2
        self.head = nd.Dense(store, "visual_encoder.head", self._flat, cfg.embed_dim, rng)
        self.lstm = nd.LSTMCell(store, "visual_lstm.cell", cfg.embed_dim, cfg.embed_dim, rng)

        # decoder convs run at quarter/half resolution; the last stage is a
        # cheap upsample + 1x1 conv so full-resolution work stays small
        self._dec_hw = res // 4
        self._dec_c = c2
        self.dec_in = nd.Dense(store, "visual_decoder.up", cfg.embed_dim,
                               c2 * self._dec_hw * self._dec_hw, rng, act="relu")
        self.dec_conv1 = nd.Conv2d(store, "visual_decoder.conv1", c2, c2, 3, 1, rng, act="relu")
        self.dec_conv2 = nd.Conv2d(store, "visual_decoder.conv2", c2, c1, 3, 1, rng, act="relu")
        self.dec_conv3 = nd.Conv2d(store, "visual_decoder.conv3", c1, 1, 1, 1, rng)

    def encode_frame(self, x: nd.Tensor) -> nd.Tensor:
        """(B,1,H,W) -> (B,d)."""
        h = self.conv2(self.conv1(x))
        b = h.shape[0]
        return self.head(nd.reshape(h, (b, self._flat)))

    def encode_sequence(self, frames: nd.Tensor) -> nd.Tensor:
        """(B,3,H,W) ordered oldest first -> r_image (B,d)."""
        b = frames.shape[0]
        h, c = self.lstm.zero_state(b)
        for t in range(3):
            ft = nd.narrow(frames, 1, t, 1)
            emb = self.encode_frame(ft)
            h, c = self.lstm(emb, h, c)
        return h

    def encode_sequence_from_embeddings(self, embs: list[nd.Tensor]) -> nd.Tensor:
        h, c = self.lstm.zero_state(embs[0].shape[0])
        for emb in embs:
            h, c = self.lstm(emb, h, c)
        return h

    def decode(self, r: nd.Tensor) -> nd.Tensor:
        """(B,d) -> predicted frame (B,1,H,W), values in [0,1]."""
        b = r.shape[0]
        h = nd.reshape(self.dec_in(r), (b, self._dec_c, self._dec_hw, self._dec_hw))
        h = self.dec_conv1(nd.pad2d(h, 1))
        h = self.dec_conv2(nd.pad2d(nd.upsample2_nearest(h), 1))
        return nd.sigmoid(self.dec_conv3(nd.upsample2_nearest(h)))

    def predict_next(self, frames: nd.Tensor) -> nd.Tensor:
        return self.decode(self.encode_sequence(frames))


class ProprioAutoencoder:
    def __init__(self, store: nd.ParamStore, cfg: PerceptionConfig,
                 rng: np.random.Generator):
        n_in = 3 * cfg.n_backbone
        self.enc1 = nd.Dense(store, "proprio_encoder.l0", n_in, cfg.proprio_hidden, rng, act="relu")
        self.enc2 = nd.Dense(store, "proprio_encoder.l1", cfg.proprio_hidden, cfg.embed_dim, rng)
        self.dec1 = nd.Dense(store, "proprio_decoder.l0", cfg.embed_dim, cfg.proprio_hidden, rng, act="relu")
        self.dec2 = nd.Dense(store, "proprio_decoder.l1", cfg.proprio_hidden, n_in, rng)

    def encode(self, p: nd.Tensor) -> nd.Tensor:
        return self.enc2(self.enc1(p))

    def decode(self, r: nd.Tensor) -> nd.Tensor:
        return self.dec2(self.dec1(r))


def build_models(cfg: PerceptionConfig, seed: int = 0):
    """Fresh stage-1 parameter store plus the two models wired into it."""
    store = nd.ParamStore()
    rng = np.random.default_rng(seed)
    visual = VisualDynamicsModel(store, cfg, rng)
    proprio = ProprioAutoencoder(store, cfg, rng)
    return store, visual, proprio


def attach_models(store: nd.ParamStore, cfg: PerceptionConfig):
    """Rebind model wrappers onto an existing (e.g. loaded) store."""
    tmp, visual, proprio = build_models(cfg, seed=0)
    for name in tmp.names():
        if name not in store:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if tmp[name].shape != store[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: "
                             f"{store[name].shape} vs expected {tmp[name].shape}")
    for obj in (visual.conv1, visual.conv2, visual.head, visual.dec_in,
                visual.dec_conv1, visual.dec_conv2, visual.dec_conv3):
        obj.w = store[_pname(obj.w, tmp)]
        obj.b = store[_pname(obj.b, tmp)]
    visual.lstm.wx = store[_pname(visual.lstm.wx, tmp)]
    visual.lstm.wh = store[_pname(visual.lstm.wh, tmp)]
    visual.lstm.b = store[_pname(visual.lstm.b, tmp)]
    for layer in (proprio.enc1, proprio.enc2, proprio.dec1, proprio.dec2):
        layer.w = store[_pname(layer.w, tmp)]
        layer.b = store[_pname(layer.b, tmp)]
    return visual, proprio


def _pname(tensor, store: nd.ParamStore) -> str:
    for name, t in store.items():
        if t is tensor:
            return name
    raise KeyError("tensor not found in store")


# --- dataset ---------------------------------------------------------------------

class Stage1Dataset:
    """Frame stacks + backbone arrays reconstructed from trajectory files."""

    def __init__(self, episodes: list[list[dict]], resolution: int):
        self.frames: list[np.ndarray] = []    # per episode (T,H,W) uint8
        self.backbones: list[np.ndarray] = []  # per episode (T, 3N)
        self.actions: list[list[str | None]] = []
        for recs in episodes:
            fr = np.stack([trajectory.decode_frame(r["frame"]) for r in recs])
            if fr.shape[1] != resolution or fr.shape[2] != resolution:
                raise ValueError(f"dataset frames are {fr.shape[1]}x{fr.shape[2]}, "
                                 f"expected {resolution}")
            self.frames.append(fr)
            self.backbones.append(np.array([r["backbone"] for r in recs], dtype=np.float32))
            self.actions.append([r["action"] for r in recs])
        self.visual_index = [(e, t) for e, fr in enumerate(self.frames)
                             for t in range(len(fr) - 1)]
        self.proprio_index = [(e, t) for e, bb in enumerate(self.backbones)
                              for t in range(len(bb))]

    @classmethod
    def from_files(cls, paths, resolution: int) -> "Stage1Dataset":
        episodes = []
        for p in paths:
            episodes.extend(trajectory.group_episodes(trajectory.load_records(p)))
        return cls(episodes, resolution)

    def __len__(self):
        return len(self.visual_index)

    def stack_at(self, e: int, t: int) -> np.ndarray:
        """(3,H,W) float32 stack at step t (window replicated at episode start)."""
        fr = self.frames[e]
        idx = [max(0, t - 2), max(0, t - 1), t]
        return fr[idx].astype(np.float32) / 255.0

    def visual_batch(self, pairs) -> tuple[np.ndarray, np.ndarray]:
        stacks = np.stack([self.stack_at(e, t) for e, t in pairs])
        targets = np.stack([self.frames[e][t + 1] for e, t in pairs])
        return stacks, targets.astype(np.float32)[:, None] / 255.0

    def proprio_batch(self, pairs) -> np.ndarray:
        return np.stack([self.backbones[e][t] for e, t in pairs])

    def forward_motion_pairs(self) -> list[tuple[int, int]]:
        """Samples whose next transition is a FORWARD command."""
        fwd = {Action.S_FORWARD.value, Action.E_FORWARD.value}
        return [(e, t) for e, t in self.visual_index
                if self.actions[e][t + 1] in fwd]


# --- training ---------------------------------------------------------------------

def train_stage1(dataset: Stage1Dataset, epochs: int, cfg: PerceptionConfig | None = None,
                 seed: int = 0, min_samples: int = 500,
                 log=None) -> tuple[nd.ParamStore, dict]:
    """Optimize both reconstruction objectives independently.

    Returns the stage-1 parameter store and per-epoch loss curves.
    Deterministic for a fixed seed. Aborts on non-finite losses.
    """
    cfg = cfg or PerceptionConfig()
    if len(dataset.proprio_index) < min_samples:
        raise ValueError(f"dataset has {len(dataset.proprio_index)} transitions; "
                         f"need at least {min_samples}")
    store, visual, proprio = build_models(cfg, seed=seed)
    opt_v = nd.Adam(lr=cfg.lr)
    opt_p = nd.Adam(lr=cfg.lr)
    vis_params = store.subset("visual_")
    prop_params = store.subset("proprio_")
    rng = np.random.default_rng(seed + 1)
    curves = {"visual": [], "proprio": []}

    for epoch in range(epochs):
        v_order = rng.permutation(len(dataset.visual_index))
        p_order = rng.permutation(len(dataset.proprio_index))
        v_losses = []
        for s in range(0, len(v_order), cfg.batch_size):
            pairs = [dataset.visual_index[i] for i in v_order[s:s + cfg.batch_size]]
            stacks, targets = dataset.visual_batch(pairs)
            pred = visual.predict_next(nd.Tensor(stacks))
            loss = nd.mse_loss(pred, targets)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"visual loss diverged at epoch {epoch}")
            loss.backward()
            opt_v.step(vis_params)
            v_losses.append(loss.item())
        p_losses = []
        for s in range(0, len(p_order), cfg.batch_size):
            pairs = [dataset.proprio_index[i] for i in p_order[s:s + cfg.batch_size]]
            batch = dataset.proprio_batch(pairs)
            recon = proprio.decode(proprio.encode(nd.Tensor(batch)))
            loss = nd.mse_loss(recon, batch)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"proprio loss diverged at epoch {epoch}")
            loss.backward()
            opt_p.step(prop_params)
            p_losses.append(loss.item())
        curves["visual"].append(float(np.mean(v_losses)))
        curves["proprio"].append(float(np.mean(p_losses)))
        if log:
            log(f"stage1 epoch {epoch + 1}/{epochs} "
                f"visual {curves['visual'][-1]:.5f} proprio {curves['proprio'][-1]:.5f}")
    return store, curves


def save_stage1(store: nd.ParamStore, cfg: PerceptionConfig, path, extra_meta=None) -> None:
    meta = {"stage": 1, "perception": asdict(cfg)}
    meta["perception"]["conv_channels"] = list(cfg.conv_channels)
    if extra_meta:
        meta.update(extra_meta)
    nd.save_checkpoint(store, path, meta=meta)


def load_stage1(path):
    store, meta = nd.load_checkpoint(path)
    pc = dict(meta["perception"])
    pc["conv_channels"] = tuple(pc["conv_channels"])
    cfg = PerceptionConfig(**pc)
    visual, proprio = attach_models(store, cfg)
    return store, cfg, visual, proprio, meta
