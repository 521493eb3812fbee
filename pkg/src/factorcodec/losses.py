"""Training objectives for the factorized codec.

The disentanglement terms (correlation, the two soft-orthogonality
constraints) are pure tensor functions so they can be checked against
scalar-loop oracles and finite differences. Supervision heads (phone,
F0, speaker, adversary) live in ProjectionHeads; reconstruction and GAN
objectives sit at the bottom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import mel_filterbank
from .quantize import grad_reverse

_COS_EPS = 1e-8

ALPHA_CORRELATION = 0.2
BETA_CONTENT = 0.01
BETA_TIMBRE = 0.0001

DEFAULT_MEL_SCALES = (32, 64, 128, 256, 512, 1024, 2048)


@dataclass
class Stage1LossWeights:
    """Weights of the hybrid objective; the total is the weighted sum."""

    w_pho: float = 1.0
    w_f0: float = 1.0
    w_cor: float = 1.0
    w_soft_pc: float = 1.0
    w_soft_pt: float = 1.0
    w_spk: float = 1.0
    w_adv_spk: float = 0.5
    w_f0_dec: float = 1.0
    w_mel: float = 15.0
    w_wav: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a finite non-negative real, got {v}")


def _frame_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last dim with epsilon-guarded norms."""
    num = (a * b).sum(dim=-1)
    return num / ((a.norm(dim=-1) + _COS_EPS) * (b.norm(dim=-1) + _COS_EPS))


def correlation_loss(q_p1: Tensor, q_p2: Tensor, alpha: float = ALPHA_CORRELATION) -> Tensor:
    """((mean over batch and frames of cos(q_p1, q_p2)) - alpha)^2.

    Pulls the two residual-quantizer streams toward a target similarity
    rather than forcing them apart or together.
    """
    if q_p1.shape != q_p2.shape:
        raise ValueError(f"shape mismatch: {tuple(q_p1.shape)} vs {tuple(q_p2.shape)}")
    return (_frame_cosine(q_p1, q_p2).mean() - alpha) ** 2


def soft_orthogonality_frame(l_p: Tensor, l_c: Tensor, beta_c: float = BETA_CONTENT) -> Tensor:
    """((mean |cos(l_p, l_c)|) - beta_c)^2 over frame-aligned projections."""
    if l_p.shape != l_c.shape:
        raise ValueError(f"shape mismatch: {tuple(l_p.shape)} vs {tuple(l_c.shape)}")
    return (_frame_cosine(l_p, l_c).abs().mean() - beta_c) ** 2


def soft_orthogonality_global(
    l_p: Tensor, t_vec: Tensor, beta_t: float = BETA_TIMBRE
) -> Tensor:
    """((mean |cos(l_p[b, l], t_vec[b])|) - beta_t)^2; t_vec broadcasts over frames."""
    if l_p.ndim != 3 or t_vec.ndim != 2 or l_p.shape[::2] != t_vec.shape:
        raise ValueError(
            f"expected (B, L, D) and (B, D), got {tuple(l_p.shape)} and {tuple(t_vec.shape)}"
        )
    return (_frame_cosine(l_p, t_vec[:, None, :]).abs().mean() - beta_t) ** 2


def phone_ce_loss(phone_logits: Tensor, phone_ids: Tensor) -> Tensor:
    """Mean frame-level cross-entropy; logits (B, L, P), labels (B, L)."""
    if phone_logits.shape[:2] != phone_ids.shape:
        raise ValueError(
            f"labels {tuple(phone_ids.shape)} do not align with logits {tuple(phone_logits.shape)}"
        )
    return F.cross_entropy(phone_logits.flatten(0, 1), phone_ids.flatten())


def f0_regression_loss(pred_log_f0: Tensor, f0_hz: Tensor, voiced: Tensor) -> Tensor:
    """Mean L1 against each sample's mean-relative log-F0, voiced frames only.

    The target is log-F0 minus that sample's voiced-frame mean, so the
    prosody stream is asked for the pitch *contour* while the register stays
    with timbre; an absolute target would hand the speaker's base pitch to
    prosody and fight the speaker adversary.

    All-unvoiced batches contribute exactly zero, with a zero gradient.
    """
    if pred_log_f0.shape != f0_hz.shape or f0_hz.shape != voiced.shape:
        raise ValueError("prediction, targets and voicing mask must share a shape")
    if not voiced.any():
        return pred_log_f0.sum() * 0.0
    log_f0 = torch.log(torch.where(voiced, f0_hz, torch.ones_like(f0_hz)))
    counts = voiced.sum(dim=-1, keepdim=True).clamp(min=1)
    sample_mean = (log_f0 * voiced).sum(dim=-1, keepdim=True) / counts
    target = log_f0 - sample_mean
    return (pred_log_f0[voiced] - target[voiced]).abs().mean()


def log_f0_loss(pred_log_f0: Tensor, f0_hz: Tensor, voiced: Tensor) -> Tensor:
    """Mean L1 between predicted and true log-F0 over voiced frames.

    Unlike ``f0_regression_loss`` the target is the absolute contour: this
    supervises the decoder-side F0 head, which sees all three streams, so
    nothing needs to be withheld from it.

    All-unvoiced batches contribute exactly zero, with a zero gradient.
    """
    if pred_log_f0.shape != f0_hz.shape or f0_hz.shape != voiced.shape:
        raise ValueError("prediction, targets and voicing mask must share a shape")
    if not voiced.any():
        return pred_log_f0.sum() * 0.0
    return (pred_log_f0[voiced] - torch.log(f0_hz[voiced])).abs().mean()


def speaker_ce_loss(speaker_logits: Tensor, speaker_ids: Tensor) -> Tensor:
    """Utterance-level cross-entropy; logits (B, S), labels (B,)."""
    if speaker_ids.min() < 0 or speaker_ids.max() >= speaker_logits.shape[-1]:
        raise ValueError("speaker id out of range for the classifier head")
    return F.cross_entropy(speaker_logits, speaker_ids)


class ProjectionHeads(nn.Module):
    """Linear supervision heads shared by the Stage 1 objective.

    l_p / l_c are projected into the timbre-code dimension so one common
    space serves both cosine constraints (frame-wise vs. content, global
    vs. the pooled timbre vector).
    """

    def __init__(
        self,
        content_dim: int,
        prosody_dim: int,
        timbre_dim: int,
        num_phones: int,
        num_speakers: int,
        grl_lambda: float = 1.0,
    ):
        super().__init__()
        self.grl_lambda = float(grl_lambda)
        self.proj_p = nn.Linear(prosody_dim, timbre_dim)
        self.proj_c = nn.Linear(content_dim, timbre_dim)
        self.phone_head = nn.Linear(content_dim, num_phones)
        self.f0_head = nn.Linear(prosody_dim, 1)
        self.speaker_head = nn.Linear(timbre_dim, num_speakers)
        self.adversary_head = nn.Linear(prosody_dim, num_speakers)

    def project_pair(self, q_p: Tensor, q_c: Tensor) -> tuple[Tensor, Tensor]:
        # (B, L, D_p), (B, L, D_c) -> two (B, L, D_t) streams
        return self.proj_p(q_p), self.proj_c(q_c)

    def phone_logits(self, q_c: Tensor) -> Tensor:
        return self.phone_head(q_c)

    def f0_log_prediction(self, q_p1: Tensor) -> Tensor:
        return self.f0_head(q_p1).squeeze(-1)  # (B, L)

    def speaker_logits(self, q_t: Tensor) -> Tensor:
        # (B, N_tokens, D_t) -> pooled (B, D_t) -> (B, S)
        return self.speaker_head(q_t.mean(dim=1))

    def adversary_logits(self, q_p1: Tensor, lam: float | None = None) -> Tensor:
        """Speaker logits from reversed-gradient prosody; the classifier
        trains normally while the encoder sees the negated gradient."""
        lam = self.grl_lambda if lam is None else lam
        reversed_qp = grad_reverse(q_p1, lam)
        return self.adversary_head(reversed_qp.mean(dim=1))


def timbre_pool(q_t: Tensor) -> Tensor:
    """Per-utterance timbre vector: mean over the global tokens, (B, N, D) -> (B, D)."""
    return q_t.mean(dim=1)


# ---------------------------------------------------------------------------
# reconstruction losses
# ---------------------------------------------------------------------------

_mel_banks: dict[tuple[int, int, int], Tensor] = {}


def _mel_bank(n_fft: int, sample_rate: int, n_mels: int) -> Tensor:
    key = (n_fft, sample_rate, n_mels)
    if key not in _mel_banks:
        bank = mel_filterbank(sample_rate, n_fft, n_mels)
        _mel_banks[key] = torch.from_numpy(np.asarray(bank, dtype=np.float32))
    return _mel_banks[key]


def _log_mel(x: Tensor, n_fft: int, sample_rate: int) -> Tensor:
    hop = max(n_fft // 4, 1)
    n_mels = max(5, min(80, n_fft // 8))
    window = torch.hann_window(n_fft, device=x.device, dtype=x.dtype)
    spec = torch.stft(
        x, n_fft=n_fft, hop_length=hop, window=window, center=True, return_complex=True
    ).abs()
    mel = _mel_bank(n_fft, sample_rate, n_mels).to(x.dtype) @ spec
    return torch.log(torch.clamp(mel, min=1e-5))


def _aligned(x_hat: Tensor, x: Tensor, tolerance: int) -> tuple[Tensor, Tensor]:
    if abs(x_hat.shape[-1] - x.shape[-1]) > tolerance:
        raise ValueError(
            f"length mismatch beyond tolerance: {x_hat.shape[-1]} vs {x.shape[-1]}"
        )
    n = min(x_hat.shape[-1], x.shape[-1])
    return x_hat[..., :n], x[..., :n]


def multiscale_mel_loss(
    x_hat: Tensor,
    x: Tensor,
    sample_rate: int,
    scales: tuple[int, ...] = DEFAULT_MEL_SCALES,
) -> Tensor:
    """Sum of L1 log-mel distances over STFT window scales."""
    x_hat, x = _aligned(x_hat, x, tolerance=max(scales) // 4)
    if x_hat.ndim == 1:
        x_hat, x = x_hat[None], x[None]
    total = x_hat.new_zeros(())
    for n_fft in scales:
        total = total + (_log_mel(x_hat, n_fft, sample_rate) - _log_mel(x, n_fft, sample_rate)).abs().mean()
    return total


def waveform_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    """Time-domain L1."""
    x_hat, x = _aligned(x_hat, x, tolerance=DEFAULT_MEL_SCALES[-1] // 4)
    return (x_hat - x).abs().mean()


# ---------------------------------------------------------------------------
# adversarial losses (least-squares GAN)
# ---------------------------------------------------------------------------


def discriminator_loss(disc_real: list[Tensor], disc_fake: list[Tensor]) -> Tensor:
    total = disc_real[0].new_zeros(())
    for d_r, d_f in zip(disc_real, disc_fake):
        total = total + ((d_r - 1.0) ** 2).mean() + (d_f**2).mean()
    return total


def generator_adversarial_loss(disc_fake: list[Tensor]) -> Tensor:
    total = disc_fake[0].new_zeros(())
    for d_f in disc_fake:
        total = total + ((d_f - 1.0) ** 2).mean()
    return total


def feature_matching_loss(
    feat_real: list[list[Tensor]], feat_fake: list[list[Tensor]]
) -> Tensor:
    maps = [
        (f_f - f_r.detach()).abs().mean()
        for fr_list, ff_list in zip(feat_real, feat_fake)
        for f_r, f_f in zip(fr_list, ff_list)
    ]
    return torch.stack(maps).mean()


def gan_losses(
    disc_real: list[Tensor],
    disc_fake: list[Tensor],
    feat_real: list[list[Tensor]],
    feat_fake: list[list[Tensor]],
) -> tuple[Tensor, Tensor, Tensor]:
    """(generator adversarial, discriminator, feature matching) under least squares."""
    gen = generator_adversarial_loss(disc_fake)
    disc = discriminator_loss(disc_real, [d.detach() for d in disc_fake])
    fm = feature_matching_loss(feat_real, feat_fake)
    return gen, disc, fm
