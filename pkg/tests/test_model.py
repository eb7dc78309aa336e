from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY
from msclip import model as M
from msclip.data import DEFAULT_10_BANDS, DEFAULT_12_BANDS, RGB_BANDS, Band, NormalizationStats
from msclip.errors import (
    FormatError, InvalidConfig, InvalidPositions, MissingEOS, ShapeMismatch, TokenOutOfRange,
    UnknownPattern,
)
from msclip.tokenizer import BOS, EOS, PAD
from msclip.trainer import train_step


def random_tokens(rng, n, cfg=TINY):
    out = np.full((n, cfg.context_length), PAD, dtype=np.int64)
    for i in range(n):
        length = int(rng.integers(0, cfg.context_length - 1))
        out[i, 0] = BOS
        out[i, 1:1 + length] = rng.integers(4, cfg.vocab_size, length)
        out[i, 1 + length] = EOS
    return out


def random_images(rng, n, cfg=TINY, channels=None):
    c = cfg.in_channels if channels is None else channels
    return rng.standard_normal((n, c, cfg.image_size, cfg.image_size)).astype(np.float32)


# -- init ------------------------------------------------------------------------

def test_init_deterministic_and_shaped():
    a, b = M.init_model(TINY, seed=3), M.init_model(TINY, seed=3)
    shapes = M.param_shapes(TINY)
    assert list(a.tensors) == list(shapes)
    for name, shape in shapes.items():
        assert a[name].shape == shape and np.all(np.isfinite(a[name]))
        assert a[name].tobytes() == b[name].tobytes()
    assert math.exp(float(a["log_temperature"])) == pytest.approx(1 / 0.07, rel=1e-6)
    assert a["visual.patch_embed.weight"].shape == (16, 3, 8, 8)
    w = a["visual.blocks.0.attn.q.weight"]
    assert np.abs(w).max() <= 0.04 and 0.01 < w.std() < 0.02
    assert np.all(a["visual.blocks.0.attn.q.bias"] == 0)
    assert np.all(a["text.blocks.1.ln1.weight"] == 1)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        replace(TINY, image_size=15).validate()
    with pytest.raises(InvalidConfig):
        replace(TINY, vision_heads=3).validate()
    with pytest.raises(InvalidConfig):
        replace(TINY, context_length=1).validate()
    with pytest.raises(InvalidConfig):
        M.init_model(replace(TINY, band_names=("B4", "B3")))


def test_clamp_log_temperature(tiny_params):
    tiny_params.tensors["log_temperature"] = np.asarray(10.0, np.float32)
    M.clamp_log_temperature(tiny_params)
    assert math.exp(float(tiny_params["log_temperature"])) <= 100.0 + 1e-4


# -- encoders --------------------------------------------------------------------

def test_image_embeddings_unit_norm_and_batch_invariant(tiny_params, backend):
    rng = np.random.default_rng(0)
    x = random_images(rng, 5)
    e = M.encode_image(tiny_params, x)
    assert e.shape == (5, TINY.proj_dim)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    dup = M.encode_image(tiny_params, np.concatenate([x[:1], x[:1]]))
    np.testing.assert_allclose(dup[0], dup[1], atol=1e-6)
    sep = np.concatenate([M.encode_image(tiny_params, x[i:i + 1]) for i in range(5)])
    np.testing.assert_allclose(e, sep, atol=1e-5)
    np.testing.assert_allclose(M.encode_image(tiny_params, x, chunk=2), e, atol=1e-5)


def test_text_embeddings_unit_norm_and_batch_invariant(tiny_params, backend):
    rng = np.random.default_rng(1)
    t = random_tokens(rng, 6)
    e = M.encode_text(tiny_params, t)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
    sep = np.concatenate([M.encode_text(tiny_params, t[i:i + 1]) for i in range(6)])
    np.testing.assert_allclose(e, sep, atol=1e-5)
    same = M.encode_text(tiny_params, np.stack([t[0], t[0]]))
    assert np.array_equal(same[0], same[1])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_tokens_after_eos_do_not_matter(seed):
    params = M.init_model(TINY, seed=seed % 7)
    rng = np.random.default_rng(seed)
    t = random_tokens(rng, 3)
    e = M.encode_text(params, t)
    t2 = t.copy()
    for i in range(3):
        eos = int(np.flatnonzero(t[i] == EOS)[0])
        t2[i, eos + 1:] = rng.integers(3, TINY.vocab_size, TINY.context_length - eos - 1)
    np.testing.assert_allclose(M.encode_text(params, t2), e, atol=1e-6)


def test_encoder_errors(tiny_params):
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeMismatch):
        M.encode_image(tiny_params, random_images(rng, 1, channels=4))
    t = random_tokens(rng, 1)
    with pytest.raises(TokenOutOfRange):
        M.encode_text(tiny_params, np.where(t == PAD, TINY.vocab_size, t))
    no_eos = np.where(t == EOS, PAD, t)
    with pytest.raises(MissingEOS):
        M.encode_text(tiny_params, no_eos)
    two = t.copy()
    two[0, -1] = EOS
    if np.count_nonzero(two == EOS) == 2:
        with pytest.raises(MissingEOS):
            M.encode_text(tiny_params, two)


# -- gradients -------------------------------------------------------------------

def full_loss(params, images, tokens):
    from msclip.loss import ContrastiveBatch, info_nce

    xi = M.encode_image(params, images)
    yt = M.encode_text(params, tokens)
    return info_nce(ContrastiveBatch(xi, yt, float(params["log_temperature"])), check=False)[0]


def test_full_model_gradient_check(backend):
    cfg = replace(TINY, vision_depth=1, text_depth=1)
    params = M.init_model(cfg, seed=4, dtype=np.float64)
    rng = np.random.default_rng(4)
    # larger weights so gradients are far from zero relative to float64 rounding
    for k, v in params.tensors.items():
        if k != "log_temperature":
            params.tensors[k] = v + 0.2 * rng.standard_normal(v.shape)
    images = random_images(rng, 4, cfg).astype(np.float64)
    tokens = random_tokens(rng, 4, cfg)
    _, grads = train_step(params, images, tokens)
    assert set(grads) == set(params.tensors)
    h = 1e-5
    worst = 0.0
    for name, t in params.tensors.items():
        flat = t.reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 3), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            fp = full_loss(params, images, tokens)
            flat[idx] = old - h
            fm = full_loss(params, images, tokens)
            flat[idx] = old
            num = (fp - fm) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-4)
            worst = max(worst, err)
    assert worst < 1e-4


# -- patch-embed extension -------------------------------------------------------

def rgb_stats():
    return NormalizationStats({b: 0.1 for b in RGB_BANDS}, {b: 0.05 for b in RGB_BANDS})


def test_extend_zero_init_equivalence(tiny_params, backend):
    base = replace(tiny_params, config=tiny_params.config.with_stats(rgb_stats()))
    ext = M.extend_patch_embed(base, DEFAULT_10_BANDS, mode="zero")
    w = ext["visual.patch_embed.weight"]
    assert w.shape == (16, 10, 8, 8)
    pos = [DEFAULT_10_BANDS.index(b) for b in RGB_BANDS]
    extra = [i for i in range(10) if i not in pos]
    assert np.abs(w[:, extra]).sum() == 0
    for c, i in enumerate(pos):
        assert np.array_equal(w[:, i], tiny_params["visual.patch_embed.weight"][:, c])
    for name in tiny_params.tensors:
        if name != "visual.patch_embed.weight":
            assert np.array_equal(ext[name], tiny_params[name])
    rng = np.random.default_rng(7)
    x10 = random_images(rng, 3, channels=10) * 50.0
    e10 = M.encode_image(ext, x10)
    e3 = M.encode_image(tiny_params, x10[:, pos])
    assert np.max(np.abs(e10 - e3)) <= 1e-5
    assert ext.config.band_names == tuple(b.value for b in DEFAULT_10_BANDS)


def test_extend_mean_init(tiny_params):
    ext = M.extend_patch_embed(tiny_params, DEFAULT_12_BANDS, mode=M.InitMode.MEAN_RGB)
    w, w0 = ext["visual.patch_embed.weight"], tiny_params["visual.patch_embed.weight"]
    mean = w0.mean(axis=1)
    for i, b in enumerate(DEFAULT_12_BANDS):
        if b in RGB_BANDS:
            assert np.array_equal(w[:, i], w0[:, RGB_BANDS.index(b)])
        else:
            assert np.array_equal(w[:, i], mean)


def test_extend_explicit_positions_and_errors(tiny_params):
    ext = M.extend_patch_embed(tiny_params, DEFAULT_10_BANDS, rgb_positions=[2, 1, 0])
    assert np.array_equal(ext["visual.patch_embed.weight"][:, 2], tiny_params["visual.patch_embed.weight"][:, 0])
    with pytest.raises(InvalidPositions):
        M.extend_patch_embed(tiny_params, DEFAULT_10_BANDS, rgb_positions=[0, 0, 1])
    with pytest.raises(InvalidPositions):
        M.extend_patch_embed(tiny_params, DEFAULT_10_BANDS, rgb_positions=[0, 1, 10])
    with pytest.raises(InvalidPositions):
        M.extend_patch_embed(tiny_params, (Band.B8, Band.B11, Band.B12, Band.B5))
    with pytest.raises(ShapeMismatch):
        M.extend_patch_embed(ext, DEFAULT_12_BANDS)
    with pytest.raises(ShapeMismatch):
        M.extend_patch_embed(tiny_params, (Band.B4, Band.B3))


def test_extend_keeps_rgb_stats_and_takes_new_ones(tiny_params):
    base = replace(tiny_params, config=tiny_params.config.with_stats(rgb_stats()))
    new = NormalizationStats({b: 0.3 for b in DEFAULT_10_BANDS}, {b: 0.2 for b in DEFAULT_10_BANDS})
    ext = M.extend_patch_embed(base, DEFAULT_10_BANDS, stats=new)
    s = ext.config.stats()
    assert s.mean[Band.B4] == 0.1 and s.std[Band.B4] == 0.05
    assert s.mean[Band.B11] == 0.3 and s.std[Band.B11] == 0.2
    assert M.extend_patch_embed(base, DEFAULT_10_BANDS).config.stats() is None


# -- freeze policies -------------------------------------------------------------

def test_freeze_all(tiny_params):
    assert all(M.resolve_freeze(tiny_params, M.FreezePolicy()).values())


def test_freeze_projection(tiny_params):
    mask = M.resolve_freeze(tiny_params, M.FreezePolicy(M.FreezeKind.PROJECTION_ONLY))
    on = {n for n, v in mask.items() if v}
    assert on == {"vision_proj", "text_proj", "log_temperature",
                  "visual.patch_embed.weight", "visual.patch_embed.bias"}
    mask = M.resolve_freeze(tiny_params, M.FreezePolicy(M.FreezeKind.PROJECTION_ONLY,
                                                        patch_embed_always_trainable=False))
    assert {n for n, v in mask.items() if v} == {"vision_proj", "text_proj", "log_temperature"}


def test_freeze_attention(tiny_params):
    mask = M.resolve_freeze(tiny_params, M.FreezePolicy.parse("attention"))
    for tower in ("visual", "text"):
        attn = [n for n, v in mask.items() if v and n.startswith(tower) and ".attn." in n]
        assert len(attn) == 2 * 4 and all(n.endswith(".weight") for n in attn)
        assert not any(v for n, v in mask.items() if n.startswith(tower) and ".mlp." in n)
    assert mask["log_temperature"]


def test_freeze_image_tower(tiny_params):
    mask = M.resolve_freeze(tiny_params, M.FreezePolicy.parse("image"))
    for n, v in mask.items():
        assert v == (n.startswith("visual.") or n in ("vision_proj", "log_temperature"))


def test_freeze_custom(tiny_params):
    pol = M.FreezePolicy.parse("custom:text.blocks.1.*,text_proj")
    assert pol.describe() == "custom:text.blocks.1.*,text_proj"
    mask = M.resolve_freeze(tiny_params, pol)
    assert mask["text_proj"] and mask["text.blocks.1.mlp.fc1.weight"]
    assert not mask["text.blocks.0.mlp.fc1.weight"]
    with pytest.raises(UnknownPattern):
        M.resolve_freeze(tiny_params, M.FreezePolicy.parse("custom:nothing.*"))
    with pytest.raises(InvalidConfig):
        M.FreezePolicy.parse("bogus")


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bytes(tmp_path, tiny_params):
    cfg = tiny_params.config.with_stats(rgb_stats())
    params = replace(tiny_params, config=cfg)
    M.save_checkpoint(params, tmp_path / "a.msck")
    back = M.load_checkpoint(tmp_path / "a.msck")
    M.save_checkpoint(back, tmp_path / "b.msck")
    assert (tmp_path / "a.msck").read_bytes() == (tmp_path / "b.msck").read_bytes()
    assert back.config == cfg
    for n in params.tensors:
        assert back[n].tobytes() == params[n].tobytes()


def test_checkpoint_header_layout(tiny_params):
    buf = M.checkpoint_bytes(tiny_params)
    assert buf[:4] == b"MSCK" and int.from_bytes(buf[4:6], "little") == 1
    clen = int.from_bytes(buf[6:10], "little")
    pos = 10 + clen
    nlen = int.from_bytes(buf[pos:pos + 2], "little")
    assert buf[pos + 2:pos + 2 + nlen] == b"visual.patch_embed.weight"
    assert buf[pos + 2 + nlen] == 4


def test_checkpoint_corruption(tiny_params):
    buf = M.checkpoint_bytes(tiny_params)
    with pytest.raises(FormatError):
        M.parse_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        M.parse_checkpoint(buf[:-8])
