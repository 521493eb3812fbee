"""Shape, rate, and causality contracts for the three encoders."""

import math

import pytest
import torch

from factorcodec.encoders import (
    ContentEncoder,
    ContentEncoderConfig,
    ProsodyEncoder,
    ProsodyEncoderConfig,
    TimbreEncoder,
    TimbreEncoderConfig,
)

torch.manual_seed(0)

SMALL_CONTENT = ContentEncoderConfig(channels=(16, 24, 32, 40))
SMALL_PROSODY = ProsodyEncoderConfig(width=32)
SMALL_TIMBRE = TimbreEncoderConfig(width=32, num_queries=48)


def test_content_rate_is_50hz():
    enc = ContentEncoder(SMALL_CONTENT)
    for samples, frames in [(16000, 50), (3200, 10), (320, 1), (16000 * 3, 150)]:
        out = enc(torch.randn(2, samples))
        assert out.shape == (2, frames, SMALL_CONTENT.output_dim)


def test_content_doubling_length_doubles_frames():
    enc = ContentEncoder(SMALL_CONTENT)
    x = torch.randn(1, 4800)
    assert 2 * enc(x).shape[1] == enc(torch.cat([x, x], dim=1)).shape[1]


def test_content_rejects_sub_hop_input():
    enc = ContentEncoder(SMALL_CONTENT)
    with pytest.raises(ValueError, match="shorter"):
        enc(torch.randn(1, 200))


def test_content_config_validates_stride_product():
    with pytest.raises(ValueError, match="320"):
        ContentEncoderConfig(strides=(2, 4, 5, 4), channels=(8, 8, 8, 8))


def test_prosody_is_frame_preserving():
    enc = ProsodyEncoder(SMALL_PROSODY)
    for L in (50, 37, 500):
        out = enc(torch.randn(2, L, 80))
        assert out.shape == (2, L, SMALL_PROSODY.width)


def test_prosody_causality_is_exact():
    enc = ProsodyEncoder(SMALL_PROSODY)
    mel = torch.randn(1, 60, 80)
    cut = 23
    mangled = mel.clone()
    mangled[:, cut:] = 0.0
    with torch.no_grad():
        full = enc(mel)
        cut_out = enc(mangled)
    assert torch.equal(full[:, :cut], cut_out[:, :cut])
    assert not torch.equal(full[:, cut:], cut_out[:, cut:])


def test_prosody_constant_input_settles_after_warmup():
    cfg = SMALL_PROSODY
    enc = ProsodyEncoder(cfg)
    rf = cfg.receptive_field
    mel = torch.ones(1, rf + 20, 80) * 0.3
    with torch.no_grad():
        out = enc(mel)
    settled = out[:, rf:]
    assert torch.equal(settled, settled[:, :1].expand_as(settled))


def test_timbre_token_count_is_length_invariant():
    enc = TimbreEncoder(SMALL_TIMBRE)
    for L in (50, 500, 7):
        out = enc(torch.randn(2, L, 80))
        assert out.shape == (2, 48, SMALL_TIMBRE.width)


def test_timbre_attention_rows_sum_to_one():
    enc = TimbreEncoder(SMALL_TIMBRE)
    tokens, attention = enc(torch.randn(3, 64, 80), return_attention=True)
    assert attention.shape == (3, 48, 64)
    assert torch.allclose(attention.sum(dim=-1), torch.ones(3, 48), atol=1e-5)
    assert tokens.shape == (3, 48, SMALL_TIMBRE.width)


def test_length_contracts_hold_across_durations():
    content = ContentEncoder(SMALL_CONTENT)
    prosody = ProsodyEncoder(SMALL_PROSODY)
    timbre = TimbreEncoder(SMALL_TIMBRE)
    for seconds in (0.2, 1.0, 4.2, 30.0):
        samples = int(seconds * 16000) // 320 * 320
        frames = samples // 320
        wav = torch.randn(1, samples)
        mel = torch.randn(1, frames, 80)
        assert content(wav).shape[1] == frames
        assert prosody(mel).shape[1] == frames
        assert timbre(mel).shape[1] == 48
