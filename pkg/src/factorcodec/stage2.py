"""Stage 2: fuse content+prosody into one token stream, decode at 24 kHz.

The quantized content and prosody embeddings from a frozen stage-1 model
are summed, projected, and re-quantized into a single 50 Hz code stream
(the LM's prediction target). A transformer stack with cross-attention to
the 48 timbre tokens conditions a transposed-convolution generator that
emits exactly 480 samples per token. Training is adversarial: least-squares
GAN with multi-period and multi-resolution discriminators plus multi-scale
mel and feature-matching losses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import HOP, UtteranceRecord, load_waveform, mel_spectrogram, read_manifest
from .checkpoints import load_checkpoint, save_checkpoint, state_hash
from .excitation import HarmonicExcitation
from .losses import (
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    log_f0_loss,
    multiscale_mel_loss,
)
from .quantize import FsqConfig, codes_to_embeddings, fsq_quantize
from .stage1 import load_stage1

TARGET_SAMPLES_PER_TOKEN = 480  # 24 kHz output over 50 Hz tokens


@dataclass(frozen=True)
class Stage2Config:
    fusion_levels: tuple[int, ...] = (4,) * 8  # 65 536 unified codes
    content_dim: int = 8
    prosody_dim: int = 6
    timbre_dim: int = 6
    width: int = 256
    num_blocks: int = 2
    num_heads: int = 4
    upsample_factors: tuple[int, ...] = (8, 6, 5, 2)
    upsample_channels: tuple[int, ...] = (128, 64, 32, 16)
    disc_periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    disc_resolutions: tuple[int, ...] = (512, 1024, 2048)
    disc_channels: int = 16

    def __post_init__(self):
        if math.prod(self.upsample_factors) != TARGET_SAMPLES_PER_TOKEN:
            raise ValueError(
                f"upsample factors {self.upsample_factors} must multiply to "
                f"{TARGET_SAMPLES_PER_TOKEN}"
            )
        if len(self.upsample_factors) != len(self.upsample_channels):
            raise ValueError("one channel count per upsample factor")
        if self.width % self.num_heads != 0:
            raise ValueError("width must be divisible by num_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage2Config":
        d = dict(d)
        for key in (
            "fusion_levels",
            "upsample_factors",
            "upsample_channels",
            "disc_periods",
            "disc_resolutions",
        ):
            d[key] = tuple(d[key])
        return cls(**d)


class FusionQuantizer(nn.Module):
    """Sum the two frame-rate streams and re-quantize into unified codes.

    The streams may have different widths; the narrower is zero-padded so
    the sum is defined, then a linear map brings it to the FSQ dimension.
    """

    def __init__(self, content_dim: int, prosody_dim: int, levels: tuple[int, ...]):
        super().__init__()
        self.fsq = FsqConfig(levels=levels)
        self.in_dim = max(content_dim, prosody_dim)
        self.project = nn.Linear(self.in_dim, self.fsq.dim)

    @property
    def codebook_size(self) -> int:
        return self.fsq.codebook_size

    def forward(self, q_c: Tensor, q_p: Tensor) -> tuple[Tensor, Tensor]:
        if q_c.shape[:2] != q_p.shape[:2]:
            raise ValueError(
                f"frame-count mismatch: content {tuple(q_c.shape[:2])} vs "
                f"prosody {tuple(q_p.shape[:2])}"
            )
        summed = self._pad(q_c) + self._pad(q_p)
        out = fsq_quantize(self.project(summed), self.fsq)
        return out.codes, out.embeddings

    def _pad(self, x: Tensor) -> Tensor:
        if x.shape[-1] == self.in_dim:
            return x
        return F.pad(x, (0, self.in_dim - x.shape[-1]))


def _sinusoidal_positions(length: int, width: int, device, dtype) -> Tensor:
    position = torch.arange(length, device=device, dtype=dtype)[:, None]
    half = width // 2
    freq = torch.exp(
        torch.arange(half, device=device, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = position * freq[None, :]
    enc = torch.zeros(length, width, device=device, dtype=dtype)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : width - half])
    return enc


class _DecoderBlock(nn.Module):
    """Pre-norm transformer block: self-attention, timbre cross-attention, MLP."""

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, num_heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(width, num_heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, h: Tensor, timbre: Tensor) -> Tensor:
        x = self.norm_self(h)
        h = h + self.self_attn(x, x, x, need_weights=False)[0]
        x = self.norm_cross(h)
        h = h + self.cross_attn(x, timbre, timbre, need_weights=False)[0]
        return h + self.mlp(self.norm_mlp(h))


class _ResUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=3, dilation=3)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(F.leaky_relu(x, 0.1))
        h = self.conv2(F.leaky_relu(h, 0.1))
        return x + h


class _WaveGenerator(nn.Module):
    """Token frames -> waveform; each stage multiplies length by its factor.

    As in the stage-1 decoder, a harmonic excitation rendered from a
    per-frame F0 prediction is added after every stage so the stack shapes
    periodicity instead of having to invent it.
    """

    def __init__(self, width: int, factors: tuple[int, ...], channels: tuple[int, ...]):
        super().__init__()
        self.excitation = HarmonicExcitation(width)
        self.pre = nn.Conv1d(width, channels[0], 7, padding=3)
        self.ups = nn.ModuleList()
        self.res = nn.ModuleList()
        self.taps = nn.ModuleList()
        rates = []
        rate = self.excitation.frame_rate
        in_ch = channels[0]
        for s, ch in zip(factors, channels):
            self.ups.append(nn.ConvTranspose1d(in_ch, ch, 3 * s, stride=s, padding=s))
            self.res.append(_ResUnit(ch))
            self.taps.append(nn.Conv1d(1, ch, 1))
            rate *= s
            rates.append(rate)
            in_ch = ch
        self.rates = tuple(rates)
        self.post = nn.Conv1d(in_ch, 1, 7, padding=3)

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        # (B, L, width) -> ((B, L * prod(factors)), (B, L) predicted log-F0)
        log_f0, gain = self.excitation.predict(frames)
        h = self.pre(frames.transpose(1, 2))
        for up, res, tap, rate in zip(self.ups, self.res, self.taps, self.rates):
            h = up(F.leaky_relu(h, 0.1))
            h = h + tap(self.excitation.render(log_f0, gain, rate))
            h = res(h)
        wav = torch.tanh(self.post(F.leaky_relu(h, 0.1)))
        return wav.squeeze(1), log_f0


class Stage2Model(nn.Module):
    """Fusion quantizer + timbre-conditioned decoder (the generator side)."""

    def __init__(self, config: Stage2Config = Stage2Config()):
        super().__init__()
        self.config = config
        self.fusion = FusionQuantizer(
            config.content_dim, config.prosody_dim, config.fusion_levels
        )
        self.input_proj = nn.Linear(self.fusion.fsq.dim, config.width)
        self.timbre_proj = nn.Linear(config.timbre_dim, config.width)
        self.timbre_norm = nn.LayerNorm(config.width)
        self.blocks = nn.ModuleList(
            _DecoderBlock(config.width, config.num_heads) for _ in range(config.num_blocks)
        )
        self.out_norm = nn.LayerNorm(config.width)
        self.generator = _WaveGenerator(
            config.width, config.upsample_factors, config.upsample_channels
        )

    def fuse_and_requantize(self, q_c: Tensor, q_p: Tensor) -> tuple[Tensor, Tensor]:
        """(codes [B, L], quantized embeddings [B, L, D])."""
        return self.fusion(q_c, q_p)

    def decode_with_f0(self, q_cp: Tensor, q_t: Tensor) -> tuple[Tensor, Tensor]:
        """Like ``decode`` but also returns the generator's per-frame log-F0
        prediction, which training supervises."""
        h = self.input_proj(q_cp)
        h = h + _sinusoidal_positions(h.shape[1], h.shape[2], h.device, h.dtype)
        timbre = self.timbre_norm(self.timbre_proj(q_t))
        for block in self.blocks:
            h = block(h, timbre)
        return self.generator(self.out_norm(h))

    def decode(self, q_cp: Tensor, q_t: Tensor) -> Tensor:
        """Quantized fused embeddings + timbre tokens -> (B, L*480) audio."""
        return self.decode_with_f0(q_cp, q_t)[0]

    def decode_codes(self, z_cp: Tensor, q_t: Tensor) -> Tensor:
        """Decode from integer codes; identical to decoding their embeddings."""
        return self.decode(codes_to_embeddings(z_cp, self.fusion.fsq), q_t)

    def forward(self, q_c: Tensor, q_p: Tensor, q_t: Tensor) -> tuple[Tensor, Tensor]:
        codes, q_cp = self.fuse_and_requantize(q_c, q_p)
        return self.decode(q_cp, q_t), codes


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------


class _PeriodDiscriminator(nn.Module):
    """Folds the signal into (time/p, p) and convolves along time."""

    def __init__(self, period: int, base_channels: int):
        super().__init__()
        self.period = period
        chans = [1, base_channels, base_channels * 2, base_channels * 4]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (5, 1), stride=(3, 1), padding=(2, 0))
            for i in range(len(chans) - 1)
        )
        self.out = nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, wav: Tensor) -> tuple[Tensor, list[Tensor]]:
        pad = (-wav.shape[-1]) % self.period
        x = F.pad(wav, (0, pad), mode="reflect") if pad else wav
        h = x.view(x.shape[0], 1, -1, self.period)
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            fmaps.append(h)
        score = self.out(h)
        fmaps.append(score)
        return score.flatten(1), fmaps


class _ResolutionDiscriminator(nn.Module):
    """Convolves the magnitude spectrogram at one STFT resolution."""

    def __init__(self, n_fft: int, base_channels: int):
        super().__init__()
        self.n_fft = n_fft
        self.hop = n_fft // 4
        chans = [1, base_channels, base_channels * 2, base_channels * 4]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], (3, 5), stride=(2, 2), padding=(1, 2))
            for i in range(len(chans) - 1)
        )
        self.out = nn.Conv2d(chans[-1], 1, 3, padding=1)

    def forward(self, wav: Tensor) -> tuple[Tensor, list[Tensor]]:
        window = torch.hann_window(self.n_fft, device=wav.device, dtype=wav.dtype)
        spec = torch.stft(
            wav,
            n_fft=self.n_fft,
            hop_length=self.hop,
            window=window,
            center=True,
            pad_mode="reflect",
            return_complex=True,
        ).abs()
        h = spec[:, None]
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            fmaps.append(h)
        score = self.out(h)
        fmaps.append(score)
        return score.flatten(1), fmaps


class Stage2Discriminators(nn.Module):
    def __init__(self, config: Stage2Config = Stage2Config()):
        super().__init__()
        self.subs = nn.ModuleList(
            [_PeriodDiscriminator(p, config.disc_channels) for p in config.disc_periods]
            + [
                _ResolutionDiscriminator(r, config.disc_channels)
                for r in config.disc_resolutions
            ]
        )

    def forward(self, wav: Tensor) -> tuple[list[Tensor], list[list[Tensor]]]:
        scores, fmaps = [], []
        for sub in self.subs:
            s, f = sub(wav)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage2TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    crop_frames: int = 40
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    w_mel: float = 15.0
    w_fm: float = 2.0
    w_adv: float = 1.0
    w_f0: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0


@dataclass
class _Stage2Item:
    wav16: Tensor
    wav24: Tensor
    mel: Tensor
    f0: Tensor
    voiced: Tensor


def _prepare_stage2(records: list[UtteranceRecord]) -> list[_Stage2Item]:
    items = []
    for rec in records:
        wav16 = load_waveform(rec.audio_path, target_rate=16000)
        wav24 = load_waveform(rec.audio_path, target_rate=24000)
        mel = mel_spectrogram(wav16)
        frames = min(
            mel.num_frames,
            wav24.samples.shape[0] // TARGET_SAMPLES_PER_TOKEN,
            rec.num_frames,
        )
        items.append(
            _Stage2Item(
                wav16=torch.from_numpy(wav16.samples[: frames * HOP].copy()),
                wav24=torch.from_numpy(
                    wav24.samples[: frames * TARGET_SAMPLES_PER_TOKEN].copy()
                ),
                mel=torch.from_numpy(mel.frames[:frames]),
                f0=torch.from_numpy(rec.f0.values[:frames].copy()),
                voiced=torch.from_numpy(rec.f0.voiced_mask[:frames].copy()),
            )
        )
    return items


def _stage2_batch(
    items: list[_Stage2Item], batch_size: int, crop_frames: int, seed: int, step: int
) -> dict[str, Tensor]:
    import numpy as np

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, step)))
    idx = rng.integers(0, len(items), size=batch_size)
    rows = []
    for i in idx:
        it = items[int(i)]
        max_start = it.mel.shape[0] - crop_frames
        start = int(rng.integers(0, max_start + 1))
        rows.append(
            {
                "wav16": it.wav16[start * HOP : (start + crop_frames) * HOP],
                "wav24": it.wav24[
                    start * TARGET_SAMPLES_PER_TOKEN : (start + crop_frames)
                    * TARGET_SAMPLES_PER_TOKEN
                ],
                "mel": it.mel[start : start + crop_frames],
                "f0": it.f0[start : start + crop_frames],
                "voiced": it.voiced[start : start + crop_frames],
            }
        )
    return {key: torch.stack([r[key] for r in rows]) for key in rows[0]}


def train_stage2(
    records: list[UtteranceRecord] | str | Path,
    stage1_checkpoint: str | Path,
    out_dir: str | Path,
    model_config: Stage2Config | None = None,
    train_config: Stage2TrainConfig = Stage2TrainConfig(),
) -> Stage2Model:
    """Adversarial decoder training with the stage-1 encoders frozen."""
    if isinstance(records, (str, Path)):
        records = read_manifest(records)
    if not records:
        raise ValueError("no training records")
    stage1_checkpoint = Path(stage1_checkpoint)
    if not stage1_checkpoint.exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {stage1_checkpoint}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    stage1 = load_stage1(stage1_checkpoint)
    stage1.requires_grad_(False)
    stage1.eval()
    frozen_hash = state_hash(stage1.state_dict())

    if model_config is None:
        model_config = Stage2Config(
            content_dim=stage1.fsq_content.dim,
            prosody_dim=stage1.fsq_prosody1.dim,
            timbre_dim=stage1.fsq_timbre.dim,
        )

    torch.manual_seed(train_config.seed)
    model = Stage2Model(model_config)
    discs = Stage2Discriminators(model_config)
    opt_g = torch.optim.Adam(
        model.parameters(), lr=train_config.lr, betas=(train_config.beta1, train_config.beta2)
    )
    opt_d = torch.optim.Adam(
        discs.parameters(), lr=train_config.lr, betas=(train_config.beta1, train_config.beta2)
    )

    items = _prepare_stage2(records)
    crop = min(train_config.crop_frames, min(it.mel.shape[0] for it in items))
    log_path = out_dir / "stage2_losses.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])

        model.train()
        discs.train()
        for step in range(train_config.steps):
            batch = _stage2_batch(items, train_config.batch_size, crop, train_config.seed, step)
            with torch.no_grad():
                enc = stage1.encode(batch["wav16"], batch["mel"])
            _, q_cp = model.fuse_and_requantize(enc.q_c, enc.q_p)
            fake, gen_log_f0 = model.decode_with_f0(q_cp, enc.q_t)
            real = batch["wav24"]

            real_scores, _ = discs(real)
            fake_scores_d, _ = discs(fake.detach())
            disc_loss = discriminator_loss(real_scores, fake_scores_d)
            opt_d.zero_grad()
            disc_loss.backward()
            opt_d.step()

            real_scores, real_fmaps = discs(real)
            fake_scores, fake_fmaps = discs(fake)
            gen_adv = generator_adversarial_loss(fake_scores)
            fm = feature_matching_loss(real_fmaps, fake_fmaps)
            mel_loss = multiscale_mel_loss(fake, real, 24000)
            f0_loss = log_f0_loss(gen_log_f0, batch["f0"], batch["voiced"])
            gen_total = (
                train_config.w_mel * mel_loss
                + train_config.w_adv * gen_adv
                + train_config.w_fm * fm
                + train_config.w_f0 * f0_loss
            )
            opt_g.zero_grad()
            gen_total.backward()
            opt_g.step()

            terms = {
                "gen_mel": float(mel_loss.detach()),
                "gen_adv": float(gen_adv.detach()),
                "gen_fm": float(fm.detach()),
                "gen_f0": float(f0_loss.detach()),
                "gen_total": float(gen_total.detach()),
                "disc": float(disc_loss.detach()),
            }
            for name, value in terms.items():
                if not math.isfinite(value):
                    raise RuntimeError(f"non-finite loss term {name!r} ({value}) at step {step}")
                writer.writerow([step, name, f"{value:.6g}"])
            fh.flush()

            done = step + 1
            if done % train_config.checkpoint_every == 0 or done == train_config.steps:
                save_checkpoint(
                    out_dir / f"stage2_step{done}.pt",
                    kind="stage2",
                    config={
                        "stage2": model_config.to_dict(),
                        "stage1_hash": frozen_hash,
                    },
                    model=model,
                    optimizer=opt_g,
                    step=done,
                )

    if state_hash(stage1.state_dict()) != frozen_hash:
        raise RuntimeError("frozen stage-1 encoders were modified during stage-2 training")

    digest = save_checkpoint(
        out_dir / "stage2_final.pt",
        kind="stage2",
        config={"stage2": model_config.to_dict(), "stage1_hash": frozen_hash},
        model=model,
        optimizer=opt_g,
        step=train_config.steps,
    )
    (out_dir / "stage2_final.hash").write_text(digest + "\n")
    model.eval()
    return model


def load_stage2(path: str | Path) -> Stage2Model:
    payload = load_checkpoint(path, expected_kind="stage2")
    model = Stage2Model(Stage2Config.from_dict(payload["config"]["stage2"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


__all__ = [
    "TARGET_SAMPLES_PER_TOKEN",
    "FusionQuantizer",
    "Stage2Config",
    "Stage2Discriminators",
    "Stage2Model",
    "Stage2TrainConfig",
    "load_stage2",
    "train_stage2",
]
