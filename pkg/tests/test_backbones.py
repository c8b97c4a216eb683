import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.backbones import (FrozenEncoder, ToyTextEncoder, VocabularyError, encode_classes,
                              forward_with_adapters, frozen_hash, layer_alignment, pyramid_layers,
                              sinusoidal_positions, tokenize)
from mfuser.mvfuser import MvFuserBlock, fuse
from mfuser.tensor import ConfigError, DimensionError

from conftest import randomize


def _enc(tag, width=16, depth=4, seed=0):
    return FrozenEncoder(tag, width, depth, patch_size=8, heads=2, seed=seed)


def _images(n=2, size=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, size, size, 3))


def test_tokenize_shapes_and_batching():
    enc = _enc("VFM")
    imgs = _images()
    seq = tokenize(imgs, enc)
    assert seq.tokens.shape == (2, 16, 16) and seq.grid == (4, 4)
    single = tokenize(imgs[1], enc)
    np.testing.assert_allclose(single.tokens.data, seq.tokens.data[1], atol=1e-12)
    assert tokenize(imgs, _enc("VLM")).grid == (4, 4)
    with pytest.raises(DimensionError):
        tokenize(np.zeros((1, 30, 32, 3)), enc)


def test_encoders_are_frozen_and_deterministic():
    a, b = _enc("VFM"), _enc("VFM")
    assert a.parameters() == [] and frozen_hash(a) == frozen_hash(b)
    assert frozen_hash(a) != frozen_hash(_enc("VFM", seed=1))
    assert frozen_hash(a) != frozen_hash(_enc("VLM"))


def test_vlm_features_ignore_global_color_shift():
    # the VLM stream sees standardized luminance, so a hue-preserving brightness change is invisible
    enc = _enc("VLM")
    img = _images(1)
    brighter = img * 0.5 + 0.2
    np.testing.assert_allclose(enc.patches(img), enc.patches(brighter), atol=1e-2)
    vfm = _enc("VFM")
    assert np.abs(vfm.patches(img) - vfm.patches(brighter)).max() > 0.1


def test_sinusoidal_positions():
    p = sinusoidal_positions(3, 4, 8)
    assert p.shape == (12, 8)
    assert len({tuple(r) for r in np.round(p, 12)}) == 12
    with pytest.raises(ConfigError):
        sinusoidal_positions(2, 2, 6)


def test_layer_alignment_and_pyramid():
    assert layer_alignment(8, 8, 1) == [(i, i) for i in range(8)]
    assert layer_alignment(8, 4, 2) == [(1, 0), (3, 1), (5, 2), (7, 3)]
    assert layer_alignment(8, 8, 4) == [(3, 3), (7, 7)]
    assert pyramid_layers(8) == [1, 3, 5, 7]
    assert pyramid_layers(4) == [0, 1, 2, 3]


def test_forward_without_adapters_matches_manual_stack():
    enc = _enc("VFM")
    imgs = _images()
    feats = forward_with_adapters(imgs, enc, None)
    x = tokenize(imgs, enc).tokens
    outs = []
    for blk in enc.blocks:
        x = blk(x)
        outs.append(x.data)
    np.testing.assert_allclose(feats.vfm.tokens.data, x.data)
    assert len(feats.pyramid_vfm) == 4
    for got, i in zip(feats.pyramid_vfm, pyramid_layers(4)):
        np.testing.assert_allclose(got.data, outs[i])


def test_zero_init_adapters_leave_features_bit_identical():
    rng = np.random.default_rng(0)
    va, vl = _enc("VFM"), _enc("VLM", width=12)
    imgs = _images()
    ad = [lambda a, b, blk=MvFuserBlock(16, 12, 4, rng): fuse(a, b, blk) for _ in range(2)]
    base = forward_with_adapters(imgs, va, vl)
    adapted = forward_with_adapters(imgs, va, vl, ad, every_n=2)
    assert np.array_equal(base.vfm.tokens.data, adapted.vfm.tokens.data)
    assert np.array_equal(base.vlm.tokens.data, adapted.vlm.tokens.data)
    for a, b in zip(base.pyramid_vfm + base.pyramid_vlm, adapted.pyramid_vfm + adapted.pyramid_vlm):
        assert np.array_equal(a.data, b.data)


def test_adapters_change_both_streams_when_trained():
    rng = np.random.default_rng(1)
    va, vl = _enc("VFM"), _enc("VLM", width=12)
    blk = MvFuserBlock(16, 12, 4, rng)
    randomize(blk, rng)
    imgs = _images()
    base = forward_with_adapters(imgs, va, vl)
    adapted = forward_with_adapters(imgs, va, vl, [lambda a, b: fuse(a, b, blk)], every_n=4)
    assert not np.allclose(base.vfm.tokens.data, adapted.vfm.tokens.data)
    assert not np.allclose(base.vlm.tokens.data, adapted.vlm.tokens.data)
    # the last pyramid level is post-adapter
    assert np.array_equal(adapted.pyramid_vfm[-1].data, adapted.vfm.tokens.data)
    with pytest.raises(ConfigError):
        forward_with_adapters(imgs, va, vl, [lambda a, b: fuse(a, b, blk)], every_n=1)


def test_text_encoder():
    rng = np.random.default_rng(0)
    vocab = {w: rng.normal(size=8) for w in ("red", "disk", "a")}
    enc = ToyTextEncoder(vocab, 8, n_prompts=2, seed=0)
    q = encode_classes(enc, ["disk", "red disk"])
    np.testing.assert_allclose(np.linalg.norm(q.data, axis=1), 1.0)
    with pytest.raises(VocabularyError):
        encode_classes(enc, ["square"])
    # prompts are trainable and receive gradient
    T.backward((encode_classes(enc, ["disk", "a"]) * rng.normal(size=(2, 8))).sum())
    assert enc.prompts.grad is not None and np.abs(enc.prompts.grad).sum() > 0
    assert [id(p) for p in enc.parameters()] == [id(enc.prompts)]


def test_text_encoder_prompt_override_gradients():
    rng = np.random.default_rng(1)
    vocab = {w: rng.normal(size=8) for w in ("disk", "square")}
    enc = ToyTextEncoder(vocab, 8, n_prompts=0, seed=0)
    prompts = T.Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
    w = rng.normal(size=(2, 8))
    err = T.param_grad_check(lambda: (encode_classes(enc, ["disk", "square"], prompts) * w).sum(), [prompts])
    assert err < 1e-4
