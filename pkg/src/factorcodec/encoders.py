"""The three parallel attribute encoders.

Content reads the raw 16 kHz waveform and downsamples by 320x to the
shared 50 Hz frame rate. Prosody and timbre read the 80-bin mel at that
same rate: prosody through frame-preserving dilated causal convolutions,
timbre through conv blocks with channel attention followed by
cross-attention onto a fixed set of learnable query tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import NUM_MELS


@dataclass(frozen=True)
class ContentEncoderConfig:
    strides: tuple[int, ...] = (2, 4, 5, 8)
    channels: tuple[int, ...] = (64, 96, 128, 160)
    input_kernel: int = 7

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ValueError("need one channel width per strided block")
        if math.prod(self.strides) * 50 != 16000:
            raise ValueError(
                f"stride product must be 320 for the 50 Hz rate, got {math.prod(self.strides)}"
            )

    @property
    def hop(self) -> int:
        return math.prod(self.strides)  # 320

    @property
    def output_dim(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class ProsodyEncoderConfig:
    width: int = 128
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 1, 2, 4, 8)

    @property
    def receptive_field(self) -> int:
        """Number of past frames each output can see."""
        return sum((self.kernel - 1) * d for d in self.dilations)

    @property
    def output_dim(self) -> int:
        return self.width


@dataclass(frozen=True)
class TimbreEncoderConfig:
    width: int = 128
    num_queries: int = 48
    num_blocks: int = 3

    @property
    def output_dim(self) -> int:
        return self.width


class ContentEncoder(nn.Module):
    """Strided 1-D conv stack: (B, T) samples -> (B, T / 320, D) latents."""

    def __init__(self, config: ContentEncoderConfig = ContentEncoderConfig()):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = [
            nn.Conv1d(1, config.channels[0], config.input_kernel, padding=config.input_kernel // 2)
        ]
        in_ch = config.channels[0]
        for stride, ch in zip(config.strides, config.channels):
            # kernel 2s+1 / padding s makes L_out = ceil(L / s), exact for divisible L
            layers += [nn.ELU(), nn.Conv1d(in_ch, ch, 2 * stride + 1, stride=stride, padding=stride)]
            in_ch = ch
        layers += [nn.ELU(), nn.Conv1d(in_ch, config.output_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, wav: Tensor) -> Tensor:
        if wav.ndim == 1:
            wav = wav[None]
        if wav.shape[-1] < self.config.hop:
            raise ValueError(
                f"input of {wav.shape[-1]} samples is shorter than one token hop ({self.config.hop})"
            )
        h = self.net(wav[:, None, :])  # (B, D, L)
        return h.transpose(1, 2)


class _CausalConv(nn.Module):
    def __init__(self, width: int, kernel: int, dilation: int):
        super().__init__()
        self.pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(width, width, kernel, dilation=dilation)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.pad(x, (self.pad, 0)))


class ProsodyEncoder(nn.Module):
    """Dilated causal conv stack over mel frames; frame-preserving.

    No operation pools across time, so output frame t depends only on
    input frames <= t — causality is exact, not approximate.
    """

    def __init__(self, config: ProsodyEncoderConfig = ProsodyEncoderConfig()):
        super().__init__()
        self.config = config
        self.input_proj = nn.Conv1d(NUM_MELS, config.width, 1)
        self.layers = nn.ModuleList(
            _CausalConv(config.width, config.kernel, d) for d in config.dilations
        )

    def forward(self, mel: Tensor) -> Tensor:
        # (B, L, 80) -> (B, L, width)
        if mel.ndim == 2:
            mel = mel[None]
        h = self.input_proj(mel.transpose(1, 2))
        for layer in self.layers:
            h = h + layer(F.elu(h))
        return h.transpose(1, 2)


class _ChannelAttentionBlock(nn.Module):
    """Conv block gated by squeeze-and-excitation over channels."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.squeeze = nn.Linear(out_ch, max(out_ch // 4, 8))
        self.excite = nn.Linear(max(out_ch // 4, 8), out_ch)

    def forward(self, x: Tensor) -> Tensor:
        h = F.elu(self.conv(x))
        gate = torch.sigmoid(self.excite(F.elu(self.squeeze(h.mean(dim=2)))))
        return h * gate[:, :, None]


class TimbreEncoder(nn.Module):
    """Channel-attentive conv stack pooled onto learnable query tokens.

    The cross-attention step maps any number of input frames onto exactly
    `num_queries` output tokens.
    """

    def __init__(self, config: TimbreEncoderConfig = TimbreEncoderConfig()):
        super().__init__()
        self.config = config
        w = config.width
        blocks = [_ChannelAttentionBlock(NUM_MELS, w)]
        blocks += [_ChannelAttentionBlock(w, w) for _ in range(config.num_blocks - 1)]
        self.blocks = nn.ModuleList(blocks)
        self.queries = nn.Parameter(torch.randn(config.num_queries, w) / math.sqrt(w))
        self.key_proj = nn.Linear(w, w)
        self.value_proj = nn.Linear(w, w)

    def features(self, mel: Tensor) -> Tensor:
        """Frame-level timbre features, (B, L, 80) -> (B, L, width)."""
        if mel.ndim == 2:
            mel = mel[None]
        h = mel.transpose(1, 2)
        for block in self.blocks:
            h = block(h)
        return h.transpose(1, 2)

    def pool(self, h: Tensor, return_attention: bool = False):
        """Cross-attend learnable queries onto the frames: (B, L, W) -> (B, Q, W)."""
        keys = self.key_proj(h)
        values = self.value_proj(h)
        scores = self.queries[None] @ keys.transpose(1, 2) / math.sqrt(self.config.width)
        attention = torch.softmax(scores, dim=-1)  # (B, Q, L), rows sum to 1
        tokens = attention @ values
        if return_attention:
            return tokens, attention
        return tokens

    def forward(self, mel: Tensor, return_attention: bool = False):
        # (B, L, 80) -> (B, num_queries, width)
        return self.pool(self.features(mel), return_attention=return_attention)
