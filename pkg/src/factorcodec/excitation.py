"""Harmonic sine excitation for the waveform decoders.

Stacks of transposed convolutions are poor at inventing variable-rate
periodicity from scratch: trained briefly, they settle on a near-constant
buzz. Both decoders therefore predict a per-frame fundamental frequency
from their own input features and render a deterministic harmonic stack
from it. The upsampling stages then only have to shape this skeleton into
speech instead of oscillating on their own.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

__all__ = ["HarmonicExcitation"]

F0_MIN_HZ = 40.0
F0_MAX_HZ = 600.0
_BASE_AMPLITUDE = 0.3


class HarmonicExcitation(nn.Module):
    """Per-frame F0 and gain heads plus a deterministic oscillator bank.

    ``predict`` maps decoder frame features to a log-F0 contour and a gain
    in (0, 1); ``render`` turns them into a summed-sine excitation at any
    sample rate that is an integer multiple of the frame rate, so the same
    contour can be injected at every stage of an upsampling stack.

    The oscillator is noise-free and the phase is a cumulative sum of the
    instantaneous frequency, so decoding the same inputs always yields the
    same waveform. F0 is detached before rendering: the head is trained by
    an explicit regression loss, not through the oscillator. The gain is
    not detached, which lets reconstruction losses teach it to mute the
    excitation on unvoiced frames.
    """

    def __init__(self, feature_width: int, frame_rate: int = 50, num_harmonics: int = 3):
        super().__init__()
        if feature_width <= 0 or frame_rate <= 0 or num_harmonics <= 0:
            raise ValueError("feature_width, frame_rate and num_harmonics must be positive")
        self.frame_rate = frame_rate
        self.num_harmonics = num_harmonics
        self.f0_head = nn.Linear(feature_width, 1)
        self.gain_head = nn.Linear(feature_width, 1)
        # Start as a flat contour in the speech range with gain 0.5 so the
        # excitation is informative from the first step.
        nn.init.zeros_(self.f0_head.weight)
        nn.init.constant_(self.f0_head.bias, math.log(180.0))
        nn.init.zeros_(self.gain_head.weight)
        nn.init.zeros_(self.gain_head.bias)

    def predict(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """(B, L, W) features -> ((B, L) log-F0, (B, L) gain in (0, 1))."""
        log_f0 = self.f0_head(frames).squeeze(-1)
        gain = torch.sigmoid(self.gain_head(frames).squeeze(-1))
        return log_f0, gain

    def render(self, log_f0: Tensor, gain: Tensor, sample_rate: int) -> Tensor:
        """((B, L), (B, L)) contour -> (B, 1, L * sample_rate / frame_rate).

        Harmonics whose frequency exceeds the local Nyquist limit are muted
        rather than allowed to alias.
        """
        if sample_rate % self.frame_rate:
            raise ValueError(
                f"sample rate {sample_rate} is not a multiple of the {self.frame_rate} Hz "
                "frame rate"
            )
        spf = sample_rate // self.frame_rate
        f0 = torch.repeat_interleave(
            log_f0.detach().exp().clamp(F0_MIN_HZ, F0_MAX_HZ), spf, dim=-1
        )
        phase = torch.cumsum(2.0 * math.pi * f0 / sample_rate, dim=-1)
        zero = torch.zeros_like(phase)
        exc = zero
        for k in range(1, self.num_harmonics + 1):
            audible = (k * f0) < (0.5 * sample_rate)
            exc = exc + torch.where(audible, torch.sin(k * phase) / k, zero)
        exc = exc * torch.repeat_interleave(gain, spf, dim=-1)
        return (_BASE_AMPLITUDE * exc).unsqueeze(1)
