"""Cross-attention fusion and the ablation fusers."""

import numpy as np
import pytest

import bronchosim.ndiff as nd
from bronchosim.fusion import FusionConfig, FusionModel, train_stage2
from bronchosim.perception import PerceptionConfig, Stage1Dataset, train_stage1
from tests.test_perception import synthetic_episodes


def make_fuser(mode="cross_attention", tokens=8, embed=64, seed=0):
    store = nd.ParamStore()
    cfg = FusionConfig(mode=mode, tokens=tokens, embed_dim=embed)
    return FusionModel(store, cfg, np.random.default_rng(seed)), store, cfg


def test_single_token_attention_is_value_projection():
    fuser, store, cfg = make_fuser(tokens=1)
    rng = np.random.default_rng(1)
    r_p = rng.normal(size=(3, 64)).astype(np.float32)
    r_i = rng.normal(size=(3, 64)).astype(np.float32)
    out = fuser.fuse(nd.Tensor(r_p), nd.Tensor(r_i)).data
    expected = r_i @ fuser.wv.data
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_sum_mode_identity_with_zero_image():
    fuser, _, _ = make_fuser(mode="sum")
    r_p = np.random.default_rng(0).normal(size=(2, 64)).astype(np.float32)
    out = fuser.fuse(nd.Tensor(r_p), nd.Tensor(np.zeros((2, 64), np.float32))).data
    np.testing.assert_array_equal(out, r_p)


def test_identical_key_tokens_give_uniform_weights():
    with nd.dtype_context(np.float64):
        fuser, _, cfg = make_fuser(tokens=8)
        rng = np.random.default_rng(2)
        r_p = rng.normal(size=(1, 64))
        token = rng.normal(size=8)
        r_i = np.tile(token, 8)[None, :]   # 8 identical tokens
        w = fuser.attention_weights(r_p, r_i)
        np.testing.assert_allclose(w, 1.0 / 8.0, atol=1e-9)


def test_attention_weights_are_distributions():
    with nd.dtype_context(np.float64):
        fuser, _, _ = make_fuser()
        rng = np.random.default_rng(3)
        r_p = rng.normal(size=(1000, 64)) * 3
        r_i = rng.normal(size=(1000, 64)) * 3
        w = fuser.attention_weights(r_p, r_i)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_output_dimensions_per_mode():
    rng = np.random.default_rng(4)
    r_p = rng.normal(size=(2, 64)).astype(np.float32)
    r_i = rng.normal(size=(2, 64)).astype(np.float32)
    for mode, dim in [("cross_attention", 64), ("concat", 128), ("sum", 64),
                      ("vision_only", 64), ("proprio_only", 64)]:
        fuser, _, cfg = make_fuser(mode=mode)
        assert cfg.out_dim == dim
        out = fuser.fuse(nd.Tensor(r_p), nd.Tensor(r_i))
        assert out.shape == (2, dim)


def test_fuse_deterministic_and_continuous():
    fuser, _, _ = make_fuser()
    rng = np.random.default_rng(5)
    r_p = rng.normal(size=(1, 64)).astype(np.float32)
    r_i = rng.normal(size=(1, 64)).astype(np.float32)
    a = fuser.fuse(nd.Tensor(r_p), nd.Tensor(r_i)).data
    b = fuser.fuse(nd.Tensor(r_p), nd.Tensor(r_i)).data
    assert np.array_equal(a, b)
    # finite-difference continuity: output change is O(eps)
    base = np.linalg.norm(a)
    for eps in (1e-2, 1e-3):
        u = rng.normal(size=(1, 64)).astype(np.float32)
        u /= np.linalg.norm(u)
        c = fuser.fuse(nd.Tensor(r_p + eps * u), nd.Tensor(r_i)).data
        assert np.linalg.norm(c - a) < 100 * eps * max(1.0, base)


def test_dimension_mismatch_rejected():
    fuser, _, _ = make_fuser()
    with pytest.raises(ValueError):
        fuser.fuse(nd.Tensor(np.zeros((1, 32), np.float32)),
                   nd.Tensor(np.zeros((1, 64), np.float32)))


def test_invalid_config():
    with pytest.raises(ValueError):
        FusionConfig(mode="average")
    with pytest.raises(ValueError):
        FusionConfig(tokens=7)


def test_gradcheck_cross_attention_fuse():
    with nd.dtype_context(np.float64):
        store = nd.ParamStore()
        cfg = FusionConfig(tokens=4, embed_dim=16)
        fuser = FusionModel(store, cfg, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        r_p = rng.normal(size=(3, 16))
        r_i = rng.normal(size=(3, 16))

        def build(wq, wk, wv):
            fuser.wq = wq
            fuser.wk = wk
            fuser.wv = wv
            return nd.mse_loss(fuser.fuse(nd.Tensor(r_p), nd.Tensor(r_i)),
                               np.ones((3, 16)))

        err = nd.check_gradients(build, [fuser.wq.data.copy(), fuser.wk.data.copy(),
                                         fuser.wv.data.copy()])
        assert err < 1e-4


# --- stage-2 training ---------------------------------------------------------

@pytest.fixture(scope="module")
def stage1():
    ds = Stage1Dataset(synthetic_episodes(n_episodes=3, length=30), resolution=16)
    cfg = PerceptionConfig(resolution=16, batch_size=16)
    store, _ = train_stage1(ds, epochs=2, cfg=cfg, seed=0, min_samples=10)
    return store, cfg, ds


def test_stage2_freeze_contract_and_loss_decrease(stage1):
    store, cfg, ds = stage1
    pre_hash = store.content_hash(("visual_", "proprio_"))
    combined, curves = train_stage2(store, cfg, ds, epochs=10,
                                    cfg=FusionConfig(batch_size=32), seed=0)
    assert store.content_hash(("visual_", "proprio_")) == pre_hash
    assert combined.content_hash(("visual_", "proprio_")) == pre_hash
    assert curves["combined"][-1] < curves["combined"][0]
    for name in ("fusion.wq", "fusion.wk", "fusion.wv", "head_visual.w", "head_proprio.w"):
        assert name in combined


def test_stage2_all_modes_trainable(stage1):
    store, cfg, ds = stage1
    for mode in ("concat", "sum", "vision_only", "proprio_only"):
        combined, curves = train_stage2(store, cfg, ds, epochs=2,
                                        cfg=FusionConfig(mode=mode, batch_size=32), seed=0)
        assert np.isfinite(curves["combined"][-1])


def test_untrained_head_degrades_proprio_reconstruction(stage1):
    store, cfg, ds = stage1
    combined, _ = train_stage2(store, cfg, ds, epochs=10,
                               cfg=FusionConfig(batch_size=32), seed=0)
    from bronchosim.perception import attach_models
    from bronchosim.fusion import FusionModel as FM, FusionConfig as FC

    visual, proprio = attach_models(combined, cfg)
    fuser = FM.from_store(combined, FC())
    pairs = ds.visual_index[:32]
    stacks, _ = ds.visual_batch(pairs)
    r_i = visual.encode_sequence(nd.Tensor(stacks))
    props = np.stack([ds.backbones[e][t] for e, t in pairs])
    r_p = proprio.encode(nd.Tensor(props))
    fused = fuser.fuse(r_p, r_i)

    trained = nd.dense_forward(fused, combined["head_proprio.w"], combined["head_proprio.b"])
    mse_trained = float(np.mean((proprio.decode(trained).data - props) ** 2))
    rng = np.random.default_rng(8)
    wild_w = nd.Tensor(rng.normal(0, 0.2, size=combined["head_proprio.w"].shape).astype(np.float32))
    wild = nd.dense_forward(fused, wild_w, nd.Tensor(np.zeros(64, np.float32)))
    mse_wild = float(np.mean((proprio.decode(wild).data - props) ** 2))
    assert mse_trained < mse_wild
