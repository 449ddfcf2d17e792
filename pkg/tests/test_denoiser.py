import numpy as np
import pytest

from mvdiff.denoiser import (
    ATTR_VOCAB,
    ConditionBundle,
    Denoiser,
    DenoiserConfig,
    attr_token_ids,
    build_condition,
    build_masks,
    count_params,
)
from mvdiff.rng import RngStream
from mvdiff.scenegen import GenSpec, generate_scene, make_rig
from mvdiff.tensor import DimensionError, Tensor, grad_check, no_grad


def _tiny_cfg(**kw):
    base = dict(depths=3, base_channels=8, heads=2, image=16, views=2)
    base.update(kw)
    return DenoiserConfig(**base)


def _scene_inputs(cfg, seed=3, frame=0):
    rig = make_rig(V=cfg.views, H=cfg.image, W=cfg.image)
    scene = generate_scene(seed, GenSpec(n_frames=6))
    cond = build_condition(scene, frame, rig, cfg)
    masks = build_masks(scene, frame, rig, cfg)
    return scene, rig, cond, masks


def test_output_shape_contract():
    cfg = _tiny_cfg()
    _, _, cond, _ = _scene_inputs(cfg)
    model = Denoiser(cfg, RngStream(0))
    z = RngStream(1).fork("z").normal((cfg.views, 3, cfg.image, cfg.image))
    eps, cache = model.forward(z, 10, cond)
    assert eps.shape == z.shape
    assert [c.shape for c in cache] == [
        (cfg.views, ch, r, r) for ch, r in zip(cfg.channel_ladder, cfg.resolutions)
    ]


def test_untrained_ftcm_is_inert():
    cfg = _tiny_cfg()
    _, _, cond, masks = _scene_inputs(cfg)
    model = Denoiser(cfg, RngStream(0))
    z = RngStream(1).fork("z").normal((cfg.views, 3, cfg.image, cfg.image))
    eps_plain, cache = model.forward(z, 99, cond)
    eps_cached, _ = model.forward(z, 99, cond, cache=cache, masks=(masks, masks))
    assert np.max(np.abs(eps_plain.data - eps_cached.data)) < 1e-6
    assert np.array_equal(eps_plain.data, eps_cached.data)


def test_forward_is_deterministic():
    cfg = _tiny_cfg()
    _, _, cond, masks = _scene_inputs(cfg)
    model = Denoiser(cfg, RngStream(7))
    z = RngStream(8).fork("z").normal((cfg.views, 3, cfg.image, cfg.image))
    a, _ = model.forward(z, 42, cond)
    b, _ = model.forward(z, 42, cond)
    assert np.array_equal(a.data, b.data)


def test_path_keyed_init_independent_of_ftcm_flag():
    cfg_on = _tiny_cfg(use_ftcm=True)
    cfg_off = _tiny_cfg(use_ftcm=False)
    m_on = Denoiser(cfg_on, RngStream(5))
    m_off = Denoiser(cfg_off, RngStream(5))
    p_on, p_off = m_on.params(), m_off.params()
    shared = set(p_on) & set(p_off)
    assert shared and all(np.array_equal(p_on[k].data, p_off[k].data) for k in shared)
    assert set(p_on) - set(p_off) == {k for k in p_on if k.startswith("param.ftcm") or k.startswith("ftcm")}


def test_cache_depth_mismatch_is_structural_error():
    cfg = _tiny_cfg()
    _, _, cond, masks = _scene_inputs(cfg)
    model = Denoiser(cfg, RngStream(0))
    z = RngStream(1).fork("z").normal((cfg.views, 3, cfg.image, cfg.image))
    _, cache = model.forward(z, 0, cond)
    with pytest.raises(DimensionError):
        model.forward(z, 0, cond, cache=cache[:2], masks=(masks, masks))
    with pytest.raises(DimensionError):
        model.forward(z, 0, cond, cache=cache, masks=(masks[:1], masks[:1]))


def test_count_params_default_budget():
    assert count_params(DenoiserConfig()) < 5_000_000


def test_count_params_scaling_and_stability():
    small = count_params(DenoiserConfig(base_channels=16))
    big = count_params(DenoiserConfig(base_channels=32))
    assert 3.0 < big / small < 5.0
    assert count_params(DenoiserConfig()) == count_params(DenoiserConfig())


def test_cross_view_attention_v1_is_self_attention():
    from mvdiff.nn import TokenAttention
    from mvdiff.tensor import tensor

    attn = TokenAttention(8, 2, RngStream(3).fork("a"))
    tok = tensor(RngStream(4).fork("t").normal((1, 5, 8)))
    joint = tok.reshape(1, 5, 8)  # V=1: the joint token set is the view's own
    assert np.array_equal(attn(joint, joint).data, attn(tok, tok).data)


def test_conditioning_sensitivity_after_training_proxy():
    # emulate a trained model: give the text path nonzero gain, then flipping
    # an attribute must move the output on nearly every random input
    cfg = _tiny_cfg()
    scene, rig, cond, _ = _scene_inputs(cfg)
    model = Denoiser(cfg, RngStream(11))
    model.mid_text_gain.data[:] = 0.5
    model.out_conv.w.data[:] = RngStream(12).fork("w").normal(model.out_conv.w.data.shape) * 0.1
    ids_alt = attr_token_ids(3, 1, 0, [2])
    changed = 0
    trials = 20
    for k in range(trials):
        z = RngStream(100 + k).fork("z").normal((cfg.views, 3, cfg.image, cfg.image))
        with no_grad():
            a, _ = model.forward(z, 5, cond)
            cond_alt = ConditionBundle(cond.layout_tokens, cond.layout_pos, ids_alt,
                                       cond.text_vec, cond.cam_vec, t=cond.t)
            b, _ = model.forward(z, 5, cond_alt)
        changed += np.max(np.abs(a.data - b.data)) > 0
    assert changed / trials >= 0.95


def test_attr_token_ids_layout():
    ids = attr_token_ids(2, 1, 0, [5, 1, 5])
    assert ids.tolist() == [2, 5, 6, 9, 13]
    assert ids.max() < ATTR_VOCAB


def test_full_denoiser_gradient_matches_finite_differences():
    cfg = DenoiserConfig(depths=3, base_channels=4, heads=1, image=8, views=2)
    scene, rig, cond, masks = _scene_inputs(cfg, seed=6)
    model = Denoiser(cfg, RngStream(13))
    rr = RngStream(14)
    for name, p in model.params().items():
        p.data = p.data.astype(np.float64)
        if not np.any(p.data):  # zero-init convs and gains would hide paths
            p.data = rr.fork(name).normal(p.data.shape, dtype=np.float64) * 0.2
    _, cache0 = model.forward(
        RngStream(15).fork("c").normal((cfg.views, 3, 8, 8), dtype=np.float64), 0, cond)

    def f(z):
        eps, _ = model.forward(z, 37, cond, cache=cache0, masks=(masks, masks))
        return (eps * eps).sum()

    x0 = Tensor(RngStream(16).fork("x").normal((cfg.views, 3, 8, 8), dtype=np.float64) * 0.3,
                dtype=np.float64)
    assert grad_check(f, x0, eps=2e-5) < 1e-4
