import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from captnet import tensor as T
from captnet.analysis import perturb
from captnet.model import CaptNetConfig, build, encoder_features, forward, psnr_loss, restored_features
from captnet.tensor import Tensor


def conv_count(cin, cout, k=1):
    return cout * cin * k * k + cout


def dw_count(c):
    return 9 * c + c


def naf_count(c):
    return (2 * c + conv_count(c, 2 * c) + dw_count(2 * c) + conv_count(c, c) + conv_count(c, c)
            + 2 * c + conv_count(c, 2 * c) + conv_count(c, c))


def spt_count(c, heads, prompted):
    mrap = 3 * (conv_count(c, c) + dw_count(c)) + conv_count(c, c) + heads + (3 * c if prompted else 0)
    sgfn = conv_count(c, 2 * c) + dw_count(2 * c) + conv_count(c, c)
    return 2 * c + mrap + 2 * c + sgfn


def closed_form_count(cfg: CaptNetConfig) -> int:
    w = cfg.widths
    total = conv_count(3, w[0], 3) + conv_count(w[0], 3, 3)
    for i in range(3):
        total += conv_count(4 * w[i], w[i + 1]) + conv_count(w[i + 1], 4 * w[i])
    for part, counts in (("encoder", cfg.enc_blocks), ("decoder", cfg.dec_blocks)):
        for lvl in range(1, 5):
            c = w[lvl - 1]
            if lvl < 3:
                total += counts[lvl - 1] * naf_count(c)
            else:
                total += counts[lvl - 1] * spt_count(c, cfg.heads[lvl - 1], (part, lvl) in cfg.prompt_positions)
    if cfg.ffm:
        total += conv_count(w[3], 4 * w[2]) + naf_count(w[2])
    return total


@pytest.fixture(scope="module")
def desk():
    return build(CaptNetConfig(), seed=0)


def test_build_is_deterministic():
    a = build(CaptNetConfig(), seed=3).named_parameters()
    b = build(CaptNetConfig(), seed=3).named_parameters()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = build(CaptNetConfig(), seed=4).named_parameters()
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_desk_parameter_count_matches_closed_form(desk):
    assert desk.parameter_count() == closed_form_count(CaptNetConfig())
    assert desk.parameter_count() == 161_019


@pytest.mark.parametrize("cfg", [
    CaptNetConfig(width=4, enc_blocks=(1, 1, 1, 1)),
    CaptNetConfig(width=8, prompt_positions=frozenset(), ffm=False),
    CaptNetConfig(width=16, enc_blocks=(2, 0, 1, 3), prompt_positions={("encoder", 3), ("decoder", 4)}),
])
def test_parameter_count_other_configs(cfg):
    assert build(cfg, seed=0).parameter_count() == closed_form_count(cfg)


def test_full_scale_config_is_constructible():
    cfg = CaptNetConfig.full_scale()
    assert cfg.widths == (32, 64, 128, 256) and cfg.enc_blocks == (1, 1, 1, 28)
    assert closed_form_count(cfg) > 1_000_000


@pytest.mark.parametrize("pos", [("encoder", 1), ("decoder", 2), ("middle", 3), ("decoder", 5)])
def test_invalid_prompt_position(pos):
    with pytest.raises(ValueError, match="prompt position"):
        CaptNetConfig(prompt_positions={pos})


def test_invalid_heads_and_counts():
    with pytest.raises(ValueError):
        CaptNetConfig(width=8, heads=(1, 2, 5, 8))
    with pytest.raises(ValueError):
        CaptNetConfig(enc_blocks=(1, 1, 1))


def test_registry_names_unique_and_stable_under_prompt_toggle(desk):
    names = list(desk.named_parameters())
    assert len(names) == len(set(names))
    assert names == sorted(names)
    desk.set_prompts_enabled(False)
    try:
        assert list(desk.named_parameters()) == names
    finally:
        desk.set_prompts_enabled(True)
    assert len(desk.prompt_sets()) == 2  # one SPT block at each of decoder levels 3 and 4


def test_prompts_and_heads_start_at_zero(desk):
    for ps in desk.prompt_sets():
        for t in (ps.pq, ps.pk, ps.pv):
            assert not t.data.any()
    assert not desk.out.weight.data.any() and not desk.out.bias.data.any()


@pytest.mark.parametrize("size", [32, 64])
def test_identity_at_init(desk, size):
    img = Tensor(np.random.default_rng(size).random((2, 3, size, size), dtype=np.float32))
    out = forward(desk, img)
    assert out.shape == img.shape
    assert np.array_equal(out.data, img.data)


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_identity_at_init_any_divisible_size(desk, h, w, seed):
    img = Tensor(np.random.default_rng(seed).random((1, 3, 8 * h, 8 * w), dtype=np.float32))
    assert np.array_equal(forward(desk, img).data, img.data)


@pytest.mark.parametrize("shape", [(1, 3, 12, 16), (1, 3, 16, 20), (1, 4, 16, 16), (3, 16, 16)])
def test_forward_rejects_bad_shapes(desk, shape):
    with pytest.raises(ValueError):
        forward(desk, Tensor(np.zeros(shape, dtype=np.float32)))


def test_trained_like_model_handles_new_resolutions():
    model = build(CaptNetConfig(width=4, enc_blocks=(1, 1, 1, 1)), seed=0)
    perturb(model, np.random.default_rng(0), scale=0.05)
    for size in ((16, 16), (24, 40)):
        img = Tensor(np.random.default_rng(1).random((1, 3) + size, dtype=np.float32))
        out = forward(model, img)
        assert out.shape == img.shape and not np.array_equal(out.data, img.data)


def test_full_model_gradient_check():
    rng = np.random.default_rng(0)
    model = build(CaptNetConfig(width=4, enc_blocks=(1, 1, 1, 1)), seed=0, dtype=np.float64)
    perturb(model, rng, scale=0.1)
    # two tokens at the deepest level keep its L2 normalization smooth
    img = Tensor(rng.standard_normal((1, 3, 8, 16)), requires_grad=True)
    weights = Tensor(rng.standard_normal(img.shape))
    params = [img] + list(model.named_parameters().values())
    err = T.grad_check(lambda: T.sum_all(T.mul(forward(model, img), weights)), params, eps=3e-4, max_coords=8, order=4)
    assert err < 1e-4


def test_features_exposed(desk):
    img = Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32))
    out, feats = forward(desk, img, return_features=True)
    assert feats["e4"].shape == (2, 64, 4, 4)
    assert feats["d3"].shape == (2, 32, 8, 8)
    assert np.array_equal(out.data, img.data)


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def test_psnr_loss_zero_mse():
    x = Tensor(np.full((1, 3, 4, 4), 0.3))
    assert psnr_loss(x, x).data.item() == pytest.approx(-80.0, abs=1e-9)


def test_psnr_loss_half_difference():
    a, b = Tensor(np.full((1, 3, 4, 4), 0.75)), Tensor(np.full((1, 3, 4, 4), 0.25))
    assert psnr_loss(a, b).data.item() == pytest.approx(-10 * math.log10(4), abs=1e-6)
    assert psnr_loss(a, b).data.item() == pytest.approx(-6.0206, abs=1e-4)


def test_psnr_loss_gradient_formula():
    rng = np.random.default_rng(1)
    p = Tensor(rng.random((2, 3, 4, 4)), requires_grad=True)
    t = Tensor(rng.random((2, 3, 4, 4)))
    T.backward(psnr_loss(p, t))
    d = p.data - t.data
    mse = np.mean(d * d)
    expected = 2 * d * 10 / (math.log(10) * (mse + 1e-8)) / d.size
    np.testing.assert_allclose(p.grad, expected, rtol=1e-10)
    assert T.grad_check(lambda: psnr_loss(p, t), [p]) < 1e-6


def test_psnr_loss_shape_mismatch():
    with pytest.raises(ValueError):
        psnr_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 8))))


# ----------------------------------------------------------------------------
# analysis features
# ----------------------------------------------------------------------------

def test_encoder_features_shape_and_determinism(desk):
    zero = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
    a = encoder_features(desk, zero).data
    b = encoder_features(build(CaptNetConfig(), seed=0), zero).data
    assert a.shape == (1, 64)
    assert np.array_equal(a, b)


def test_restored_features_identity_is_input_gap(desk):
    img = np.random.default_rng(2).random((3, 3, 16, 16), dtype=np.float32)
    feats = restored_features(desk, Tensor(img)).data
    assert feats.shape == (3, 3)
    np.testing.assert_allclose(feats, img.mean(axis=(2, 3)), rtol=1e-6)
