import numpy as np
import pytest

from cgmlp.layers import (ChannelGatingUnit, ClassifierHead, ConvStemBlock,
                          FeatureMapTokenizer, GmlpBlock, PatchEmbed, SpatialGatingUnit)
from cgmlp.tensor import Rng, ShapeError, Tensor, grad_check, mul, sum_all

import oracles


def randt(rng, shape, std=1.0):
    return Tensor(rng.normal(shape, std=std, dtype=np.float64))


def f64(layer):
    for _, t in layer.params():
        t.data = t.data.astype(np.float64)
    return layer


# ---------------------------------------------------------------------------
# patch embedding


def test_patch_embed_token_count(rng):
    pe = PatchEmbed(rng, 3, 4, 32)
    out = pe.forward(Tensor(rng.normal((2, 3, 32, 32))))
    assert out.shape == (2, 64, 32)


def test_patch_embed_whole_image_single_token(rng):
    pe = PatchEmbed(rng, 3, 32, 16)
    out = pe.forward(Tensor(rng.normal((1, 3, 32, 32))))
    assert out.shape == (1, 1, 16)


def test_patch_embed_identity_projection_gives_raw_patches(rng):
    p, c = 2, 3
    pe = PatchEmbed(rng, c, p, c * p * p)
    pe.w.data = np.eye(c * p * p, dtype=np.float32)
    pe.b.data[:] = 0
    img = rng.normal((1, c, 4, 4))
    out = pe.forward(Tensor(img))
    # token 0 covers the top-left 2x2 patch, channel-major
    expect = img[0, :, 0:2, 0:2].reshape(-1)
    assert np.allclose(out.data[0, 0], expect, atol=1e-6)


def test_patch_embed_indivisible_error(rng):
    pe = PatchEmbed(rng, 3, 5, 8)
    with pytest.raises(ShapeError, match="divisible"):
        pe.forward(Tensor(np.zeros((1, 3, 32, 32))))


# ---------------------------------------------------------------------------
# spatial gating unit


def test_sgu_zero_w_unit_bias_is_identity_on_x1(rng):
    sgu = SpatialGatingUnit(rng, tokens=4, d=6)
    sgu.w.data[:] = 0
    sgu.b.data[:] = 1
    x = rng.normal((2, 4, 6))
    out = sgu.forward(Tensor(x))
    assert np.array_equal(out.data, x[:, :, :3])


def test_sgu_zero_w_zero_bias_is_zero(rng):
    sgu = SpatialGatingUnit(rng, tokens=4, d=6)
    sgu.w.data[:] = 0
    sgu.b.data[:] = 0
    out = sgu.forward(Tensor(rng.normal((2, 4, 6))))
    assert np.array_equal(out.data, np.zeros((2, 4, 3)))


def test_sgu_matches_scalar_oracle(rng):
    sgu = f64(SpatialGatingUnit(rng, tokens=2, d=4))
    sgu.w.data = np.array([[0.5, -1.0], [2.0, 0.25]])
    sgu.b.data = np.array([0.1, -0.2])
    sgu.gamma.data = np.array([1.5, 0.5])
    sgu.beta.data = np.array([0.0, 0.3])
    x = rng.normal((1, 2, 4))
    out = sgu.forward(Tensor(x.astype(np.float64)))
    expect = oracles.scalar_spatial_gating(x.astype(np.float64), sgu.w.data, sgu.b.data,
                                           sgu.gamma.data, sgu.beta.data)
    assert np.max(np.abs(out.data - expect)) < 1e-10


def test_sgu_init_is_near_identity(rng):
    sgu = SpatialGatingUnit(rng, tokens=8, d=16)
    for _ in range(20):
        x = rng.normal((2, 8, 16))
        out = sgu.forward(Tensor(x))
        x1 = x[:, :, :8]
        assert np.max(np.abs(out.data - x1)) <= 1e-2 * (np.max(np.abs(x1)) + 1e-8)


def test_sgu_token_count_mismatch(rng):
    sgu = SpatialGatingUnit(rng, tokens=4, d=6)
    with pytest.raises(ShapeError, match="tokens"):
        sgu.forward(Tensor(np.zeros((1, 5, 6))))


def test_sgu_odd_feature_dim(rng):
    with pytest.raises(ShapeError, match="even"):
        SpatialGatingUnit(rng, tokens=4, d=5)
    sgu = SpatialGatingUnit(rng, tokens=4, d=6)
    with pytest.raises(ShapeError, match="odd"):
        sgu.forward(Tensor(np.zeros((1, 4, 7))))


def test_sgu_mixes_tokens_only(rng):
    # permuting feature columns of the input commutes with the gate
    sgu = SpatialGatingUnit(rng, tokens=4, d=8)
    for _, t in sgu.params():
        t.data = rng.normal(t.data.shape)
    # keep the norm affine permutation-symmetric so column permutation commutes
    sgu.gamma.data[:] = 1.3
    sgu.beta.data[:] = -0.2
    x = rng.normal((2, 4, 8))
    perm = Rng(3).shuffle(4)  # permutes the 4 surviving feature columns
    full_perm = np.concatenate([perm, perm + 4])
    out_perm_in = sgu.forward(Tensor(x[:, :, full_perm])).data
    out_then_perm = sgu.forward(Tensor(x)).data[:, :, perm]
    assert np.max(np.abs(out_perm_in - out_then_perm)) < 1e-5


# ---------------------------------------------------------------------------
# channel gating unit


def test_cgu_init_contract_identity(rng):
    cgu = ChannelGatingUnit(rng, d=6)
    cgu.w.data[:] = 0
    cgu.b.data[:] = 1
    x = rng.normal((2, 4, 6))
    out = cgu.forward(Tensor(x))
    assert np.array_equal(out.data, x[:, :2, :])


def test_cgu_matches_scalar_oracle(rng):
    cgu = f64(ChannelGatingUnit(rng, d=3))
    cgu.w.data = np.array([[0.5, -1.0, 0.2], [2.0, 0.25, -0.4], [0.0, 1.0, 0.7]])
    cgu.b.data = np.array([0.1, -0.2, 0.4])
    cgu.gamma.data = np.array([1.5, 0.5, 1.0])
    cgu.beta.data = np.array([0.0, 0.3, -0.1])
    x = rng.normal((1, 2, 3)).astype(np.float64)
    out = cgu.forward(Tensor(x))
    expect = oracles.scalar_channel_gating(x, cgu.w.data, cgu.b.data,
                                           cgu.gamma.data, cgu.beta.data)
    assert np.max(np.abs(out.data - expect)) < 1e-10


def test_cgu_halves_tokens(rng):
    cgu = ChannelGatingUnit(rng, d=16)
    out = cgu.forward(Tensor(rng.normal((2, 64, 16))))
    assert out.shape == (2, 32, 16)


def test_cgu_odd_token_count(rng):
    cgu = ChannelGatingUnit(rng, d=4)
    with pytest.raises(ShapeError, match="even"):
        cgu.forward(Tensor(np.zeros((1, 3, 4))))


def test_cgu_mixes_channels_only(rng):
    # permuting the tokens of X2 (and of X1 consistently) commutes with the gate
    cgu = ChannelGatingUnit(rng, d=6)
    for _, t in cgu.params():
        t.data = rng.normal(t.data.shape)
    x = rng.normal((2, 8, 6))
    perm = Rng(3).shuffle(4)
    full_perm = np.concatenate([perm, perm + 4])
    out_perm_in = cgu.forward(Tensor(x[:, full_perm, :])).data
    out_then_perm = cgu.forward(Tensor(x)).data[:, perm, :]
    assert np.max(np.abs(out_perm_in - out_then_perm)) < 1e-5


# ---------------------------------------------------------------------------
# gMLP block


def test_block_pure_residual_when_v_is_zero(rng):
    blk = GmlpBlock(rng, tokens=4, d=6, d_ffn=8, gating="spatial")
    blk.v_w.data[:] = 0
    blk.v_b.data[:] = 0
    x = rng.normal((2, 4, 6))
    out = blk.forward(Tensor(x))
    assert np.array_equal(out.data, x)


def test_block_preserves_shape_both_gatings(rng):
    for gating in ("spatial", "channel"):
        blk = GmlpBlock(rng, tokens=8, d=6, d_ffn=12, gating=gating)
        x = rng.normal((3, 8, 6))
        assert blk.forward(Tensor(x)).shape == (3, 8, 6)


def test_block_gradcheck_spatial(rng):
    blk = f64(GmlpBlock(rng, tokens=8, d=16, d_ffn=32, gating="spatial"))
    x = Tensor(rng.normal((2, 8, 16), dtype=np.float64))

    def f(tape):
        y = blk.forward(x, tape)
        return sum_all(mul(y, y, tape), tape)

    params = [t for _, t in blk.params()]
    report = grad_check(f, params, h=1e-4, tol=1e-3)
    assert report.passed, report.per_param


def test_block_gradcheck_channel(rng):
    blk = f64(GmlpBlock(rng, tokens=8, d=8, d_ffn=16, gating="channel"))
    x = Tensor(rng.normal((2, 8, 8), dtype=np.float64))

    def f(tape):
        y = blk.forward(x, tape)
        return sum_all(mul(y, y, tape), tape)

    report = grad_check(f, [t for _, t in blk.params()], h=1e-4, tol=1e-3)
    assert report.passed, report.per_param


def test_stack_of_four_blocks_preserves_64x256(rng):
    blocks = [GmlpBlock(rng, tokens=64, d=256, d_ffn=512, gating="spatial")
              for _ in range(4)]
    x = Tensor(rng.normal((1, 64, 256)))
    h = x
    for blk in blocks:
        h = blk.forward(h)
    assert h.shape == (1, 64, 256)


def test_spatial_param_count_grows_with_tokens_squared(rng):
    for n in (4, 8, 16):
        sgu = SpatialGatingUnit(rng, tokens=n, d=8)
        gate_params = sgu.w.data.size + sgu.b.data.size
        assert gate_params == n * n + n


def test_channel_param_count_grows_with_d_squared(rng):
    for d in (4, 8, 16):
        cgu = ChannelGatingUnit(rng, d=d)
        assert cgu.w.data.size + cgu.b.data.size == d * d + d


# ---------------------------------------------------------------------------
# conv stem


def test_conv_stem_block_halves_spatial(rng):
    blk = ConvStemBlock(rng, 3, 32)
    out = blk.forward(Tensor(rng.normal((2, 3, 32, 32))))
    assert out.shape == (2, 32, 16, 16)


def test_two_stem_blocks_condense_32_to_8(rng):
    b1, b2 = ConvStemBlock(rng, 3, 4), ConvStemBlock(rng, 4, 8)
    out = b2.forward(b1.forward(Tensor(rng.normal((1, 3, 32, 32)))))
    assert out.shape == (1, 8, 8, 8)


# ---------------------------------------------------------------------------
# tokenizer & head


def test_tokenizer_shapes(rng):
    tok = FeatureMapTokenizer(rng, 64, 32)
    out = tok.forward(Tensor(rng.normal((2, 64, 8, 8))))
    assert out.shape == (2, 64, 32)
    tok1 = FeatureMapTokenizer(rng, 4, 8)
    assert tok1.forward(Tensor(rng.normal((1, 4, 1, 1)))).shape == (1, 1, 8)


def test_tokenizer_identity_projection(rng):
    tok = FeatureMapTokenizer(rng, 3, 3)
    tok.w.data = np.eye(3, dtype=np.float32)
    tok.b.data[:] = 0
    fm = rng.normal((1, 3, 2, 2))
    out = tok.forward(Tensor(fm))
    assert np.allclose(out.data[0, 0], fm[0, :, 0, 0], atol=1e-7)
    assert np.allclose(out.data[0, 3], fm[0, :, 1, 1], atol=1e-7)


def test_head_constant_tokens(rng):
    head = ClassifierHead(rng, d=4, classes=3)
    v = rng.normal((1, 1, 4)).repeat(5, axis=1)
    out = head.forward(Tensor(v))
    expect = v[0, 0] @ head.w.data + head.b.data
    assert np.allclose(out.data[0], expect, atol=1e-6)


def test_head_zero_weights_gives_bias(rng):
    head = ClassifierHead(rng, d=4, classes=3)
    head.w.data[:] = 0
    head.b.data = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    out = head.forward(Tensor(rng.normal((4, 5, 4))))
    assert np.allclose(out.data, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_head_gradcheck(rng):
    head = f64(ClassifierHead(rng, d=4, classes=3))
    x = Tensor(rng.normal((2, 5, 4), dtype=np.float64))

    def f(tape):
        y = head.forward(x, tape)
        return sum_all(mul(y, y, tape), tape)

    report = grad_check(f, [head.w, head.b, x], h=1e-5, tol=1e-5)
    assert report.passed
