"""Stage 1: tri-factor codec with hybrid disentanglement training.

The model runs three encoders in parallel, quantizes each stream with FSQ
(two residual layers on the prosody branch), and decodes the recombined
streams back to a 16 kHz waveform through a transposed mirror of the
content encoder. Training couples reconstruction with the supervision
and separation constraints from the losses module.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .audio import HOP, UtteranceRecord, load_waveform, mel_spectrogram, read_manifest
from .checkpoints import load_checkpoint, save_checkpoint, state_hash
from .encoders import (
    ContentEncoder,
    ContentEncoderConfig,
    ProsodyEncoder,
    ProsodyEncoderConfig,
    TimbreEncoder,
    TimbreEncoderConfig,
)
from .excitation import HarmonicExcitation
from .losses import (
    ProjectionHeads,
    Stage1LossWeights,
    correlation_loss,
    f0_regression_loss,
    log_f0_loss,
    multiscale_mel_loss,
    phone_ce_loss,
    soft_orthogonality_frame,
    soft_orthogonality_global,
    speaker_ce_loss,
    timbre_pool,
    waveform_loss,
)
from .quantize import FsqConfig, fsq_quantize, residual_fsq_quantize

RECONSTRUCTION_MODES = ("content", "prosody", "content+prosody", "full")

LOSS_TERMS = ("pho", "f0", "cor", "soft_pc", "soft_pt", "spk", "adv_spk", "f0_dec", "mel", "wav")


@dataclass(frozen=True)
class Stage1Config:
    content: ContentEncoderConfig = ContentEncoderConfig()
    prosody: ProsodyEncoderConfig = ProsodyEncoderConfig()
    timbre: TimbreEncoderConfig = TimbreEncoderConfig()
    content_levels: tuple[int, ...] = (4,) * 8  # 65 536 codes
    prosody_levels: tuple[int, ...] = (6,) * 6  # 46 656 codes per layer
    timbre_levels: tuple[int, ...] = (6,) * 6  # 46 656 codes
    fuse_width: int = 128
    num_phones: int = 12
    num_speakers: int = 4
    grl_lambda: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        return cls(
            content=ContentEncoderConfig(
                strides=tuple(d["content"]["strides"]),
                channels=tuple(d["content"]["channels"]),
                input_kernel=d["content"]["input_kernel"],
            ),
            prosody=ProsodyEncoderConfig(
                width=d["prosody"]["width"],
                kernel=d["prosody"]["kernel"],
                dilations=tuple(d["prosody"]["dilations"]),
            ),
            timbre=TimbreEncoderConfig(
                width=d["timbre"]["width"],
                num_queries=d["timbre"]["num_queries"],
                num_blocks=d["timbre"]["num_blocks"],
            ),
            content_levels=tuple(d["content_levels"]),
            prosody_levels=tuple(d["prosody_levels"]),
            timbre_levels=tuple(d["timbre_levels"]),
            fuse_width=d["fuse_width"],
            num_phones=d["num_phones"],
            num_speakers=d["num_speakers"],
            grl_lambda=d["grl_lambda"],
        )


@dataclass
class Stage1Outputs:
    """Everything one forward pass produces, quantized and not."""

    h_c: Tensor
    h_p: Tensor
    h_t: Tensor
    g_t: Tensor
    q_c: Tensor
    q_p1: Tensor
    q_p2: Tensor
    q_p: Tensor
    q_t: Tensor
    x_hat: Tensor
    dec_log_f0: Tensor
    codes_c: Tensor
    codes_p1: Tensor
    codes_p2: Tensor
    codes_t: Tensor


class Stage1Decoder(nn.Module):
    """Transposed mirror of the content encoder: 50 Hz frames -> 16 kHz audio.

    Each transposed block uses kernel 3s / padding s so a stride-s layer
    multiplies the length by exactly s; total upsampling is exactly 320x.
    A harmonic excitation rendered from a per-frame F0 prediction is added
    after every stage so the convolutions shape periodicity instead of
    having to invent it.
    """

    def __init__(self, content: ContentEncoderConfig, fuse_width: int):
        super().__init__()
        channels = tuple(reversed(content.channels))
        strides = tuple(reversed(content.strides))
        self.excitation = HarmonicExcitation(fuse_width)
        self.pre = nn.Conv1d(fuse_width, channels[0], 3, padding=1)
        self.ups = nn.ModuleList()
        self.taps = nn.ModuleList()
        rates = []
        rate = self.excitation.frame_rate
        in_ch = channels[0]
        for stride, ch in zip(strides, channels):
            self.ups.append(
                nn.ConvTranspose1d(in_ch, ch, 3 * stride, stride=stride, padding=stride)
            )
            self.taps.append(nn.Conv1d(1, ch, 1))
            rate *= stride
            rates.append(rate)
            in_ch = ch
        self.rates = tuple(rates)
        self.post = nn.Conv1d(in_ch, 1, 7, padding=3)

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        # (B, L, fuse_width) -> ((B, L * 320), (B, L) predicted log-F0)
        log_f0, gain = self.excitation.predict(frames)
        h = self.pre(frames.transpose(1, 2))
        for up, tap, rate in zip(self.ups, self.taps, self.rates):
            h = up(F.elu(h))
            h = h + tap(self.excitation.render(log_f0, gain, rate))
        wav = torch.tanh(self.post(F.elu(h)))
        return wav.squeeze(1), log_f0


class Stage1Model(nn.Module):
    def __init__(self, config: Stage1Config = Stage1Config()):
        super().__init__()
        self.config = config
        self.content_encoder = ContentEncoder(config.content)
        self.prosody_encoder = ProsodyEncoder(config.prosody)
        self.timbre_encoder = TimbreEncoder(config.timbre)

        self.fsq_content = FsqConfig(levels=config.content_levels)
        self.fsq_prosody1 = FsqConfig(levels=config.prosody_levels)
        self.fsq_prosody2 = FsqConfig(levels=config.prosody_levels)
        self.fsq_timbre = FsqConfig(levels=config.timbre_levels)

        self.to_content_codes = nn.Linear(config.content.output_dim, self.fsq_content.dim)
        self.to_prosody_codes = nn.Linear(config.prosody.output_dim, self.fsq_prosody1.dim)
        self.to_timbre_codes = nn.Linear(config.timbre.output_dim, self.fsq_timbre.dim)

        self.heads = ProjectionHeads(
            content_dim=self.fsq_content.dim,
            prosody_dim=self.fsq_prosody1.dim,
            timbre_dim=self.fsq_timbre.dim,
            num_phones=config.num_phones,
            num_speakers=config.num_speakers,
            grl_lambda=config.grl_lambda,
        )

        w = config.fuse_width
        self.fuse_content = nn.Linear(self.fsq_content.dim, w)
        self.fuse_prosody = nn.Linear(self.fsq_prosody1.dim, w)
        self.fuse_timbre = nn.Linear(self.fsq_timbre.dim, w)
        self.decoder = Stage1Decoder(config.content, w)

    # ------------------------------------------------------------------
    # encoding / decoding pieces
    # ------------------------------------------------------------------

    def encode(self, wav: Tensor, mel: Tensor) -> Stage1Outputs:
        """Run encoders + quantizers; x_hat left empty (filled by forward)."""
        if wav.ndim == 1:
            wav = wav[None]
        if mel.ndim == 2:
            mel = mel[None]
        usable = mel.shape[1] * HOP
        if wav.shape[-1] < usable:
            raise ValueError(
                f"waveform ({wav.shape[-1]} samples) shorter than mel coverage ({usable})"
            )
        wav = wav[:, :usable]

        h_c = self.content_encoder(wav)
        h_p = self.prosody_encoder(mel)
        h_t = self.timbre_encoder.features(mel)
        g_t = self.timbre_encoder.pool(h_t)

        out_c = fsq_quantize(self.to_content_codes(h_c), self.fsq_content)
        out_p1, out_p2, q_p = residual_fsq_quantize(
            self.to_prosody_codes(h_p), self.fsq_prosody1, self.fsq_prosody2
        )
        out_t = fsq_quantize(self.to_timbre_codes(g_t), self.fsq_timbre)

        return Stage1Outputs(
            h_c=h_c,
            h_p=h_p,
            h_t=h_t,
            g_t=g_t,
            q_c=out_c.embeddings,
            q_p1=out_p1.embeddings,
            q_p2=out_p2.embeddings,
            q_p=q_p,
            q_t=out_t.embeddings,
            x_hat=wav.new_zeros(wav.shape),
            dec_log_f0=wav.new_zeros(mel.shape[:2]),
            codes_c=out_c.codes,
            codes_p1=out_p1.codes,
            codes_p2=out_p2.codes,
            codes_t=out_t.codes,
        )

    def _fuse(self, q_c: Tensor, q_p: Tensor, q_t: Tensor) -> Tensor:
        """Sum the projected streams: timbre enters as one pooled vector
        broadcast over every frame."""
        fused = self.fuse_content(q_c) + self.fuse_prosody(q_p)
        return fused + self.fuse_timbre(timbre_pool(q_t))[:, None, :]

    def decode_streams(self, q_c: Tensor, q_p: Tensor, q_t: Tensor) -> Tensor:
        """Fuse quantized streams and decode to a waveform."""
        return self.decoder(self._fuse(q_c, q_p, q_t))[0]

    def forward(self, wav: Tensor, mel: Tensor) -> Stage1Outputs:
        out = self.encode(wav, mel)
        out.x_hat, out.dec_log_f0 = self.decoder(self._fuse(out.q_c, out.q_p, out.q_t))
        return out

    @torch.no_grad()
    def reconstruct_modes(self, wav: Tensor, mel: Tensor, mode: str) -> Tensor:
        """Decode with a subset of streams; excluded streams become zeros."""
        if mode not in RECONSTRUCTION_MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {RECONSTRUCTION_MODES}")
        out = self.encode(wav, mel)
        q_c = out.q_c if "content" in mode or mode == "full" else torch.zeros_like(out.q_c)
        q_p = out.q_p if "prosody" in mode or mode == "full" else torch.zeros_like(out.q_p)
        q_t = out.q_t if mode == "full" else torch.zeros_like(out.q_t)
        return self.decode_streams(q_c, q_p, q_t)


def stage1_total_loss(
    model: Stage1Model,
    outputs: Stage1Outputs,
    batch: dict[str, Tensor],
    weights: Stage1LossWeights = Stage1LossWeights(),
) -> tuple[Tensor, dict[str, float]]:
    """Weighted hybrid objective; returns (total, unweighted per-term values)."""
    for key in ("wav", "phones", "f0", "voiced", "speaker"):
        if key not in batch:
            raise ValueError(f"batch is missing required labels: {key!r}")
    heads = model.heads
    l_p, l_c = heads.project_pair(outputs.q_p, outputs.q_c)
    t_vec = timbre_pool(outputs.q_t)

    terms = {
        "pho": phone_ce_loss(heads.phone_logits(outputs.q_c), batch["phones"]),
        "f0": f0_regression_loss(
            heads.f0_log_prediction(outputs.q_p1), batch["f0"], batch["voiced"]
        ),
        "cor": correlation_loss(outputs.q_p1, outputs.q_p2),
        "soft_pc": soft_orthogonality_frame(l_p, l_c),
        "soft_pt": soft_orthogonality_global(l_p, t_vec),
        "spk": speaker_ce_loss(heads.speaker_logits(outputs.q_t), batch["speaker"]),
        "adv_spk": speaker_ce_loss(heads.adversary_logits(outputs.q_p1), batch["speaker"]),
        "f0_dec": log_f0_loss(outputs.dec_log_f0, batch["f0"], batch["voiced"]),
        "mel": multiscale_mel_loss(outputs.x_hat, batch["wav"], 16000),
        "wav": waveform_loss(outputs.x_hat, batch["wav"]),
    }
    total = sum(getattr(weights, f"w_{name}") * term for name, term in terms.items())
    return total, {name: float(term.detach()) for name, term in terms.items()}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage1TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 40  # 0.8 s of audio per item
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    warmup_steps: int = 200
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0
    weights: Stage1LossWeights = field(default_factory=Stage1LossWeights)


@dataclass
class _PreparedUtterance:
    wav: Tensor  # (T,) 16 kHz
    mel: Tensor  # (L, 80)
    f0: Tensor  # (L,)
    voiced: Tensor  # (L,) bool
    phones: Tensor  # (L,)
    speaker: int


def prepare_records(records: list[UtteranceRecord]) -> list[_PreparedUtterance]:
    prepared = []
    for rec in records:
        wav = load_waveform(rec.audio_path, target_rate=16000)
        mel = mel_spectrogram(wav)
        frames = min(mel.num_frames, rec.num_frames)
        prepared.append(
            _PreparedUtterance(
                wav=torch.from_numpy(wav.samples[: frames * HOP]),
                mel=torch.from_numpy(mel.frames[:frames]),
                f0=torch.from_numpy(rec.f0.values[:frames].copy()),
                voiced=torch.from_numpy(rec.f0.voiced_mask[:frames].copy()),
                phones=torch.from_numpy(rec.phone_ids[:frames].copy()),
                speaker=rec.speaker_id,
            )
        )
    return prepared


def sample_batch(
    data: list[_PreparedUtterance], batch_size: int, crop_frames: int, seed: int, step: int
) -> dict[str, Tensor]:
    """Deterministic batch for (seed, step): resume-safe without RNG state."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, step)))
    idx = rng.integers(0, len(data), size=batch_size)
    items = []
    for i in idx:
        utt = data[int(i)]
        max_start = utt.mel.shape[0] - crop_frames
        start = int(rng.integers(0, max_start + 1))
        items.append(
            {
                "wav": utt.wav[start * HOP : (start + crop_frames) * HOP],
                "mel": utt.mel[start : start + crop_frames],
                "f0": utt.f0[start : start + crop_frames],
                "voiced": utt.voiced[start : start + crop_frames],
                "phones": utt.phones[start : start + crop_frames],
                "speaker": torch.tensor(utt.speaker),
            }
        )
    return {key: torch.stack([it[key] for it in items]) for key in items[0]}


class _LossLog:
    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        exists = path.exists() and append
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(["step", "term", "value"])

    def write(self, step: int, terms: dict[str, float], total: float) -> None:
        for name, value in terms.items():
            self._writer.writerow([step, name, f"{value:.6g}"])
        self._writer.writerow([step, "total", f"{total:.6g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _check_finite(step: int, total: float, terms: dict[str, float]) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss term {name!r} ({value}) at step {step}")
    if not math.isfinite(total):
        raise RuntimeError(f"non-finite total loss ({total}) at step {step}")


def train_stage1(
    records: list[UtteranceRecord] | str | Path,
    out_dir: str | Path,
    model_config: Stage1Config = Stage1Config(),
    train_config: Stage1TrainConfig = Stage1TrainConfig(),
    resume_from: str | Path | None = None,
) -> Stage1Model:
    """Train the tri-factor codec; writes checkpoints and a per-step loss CSV."""
    if isinstance(records, (str, Path)):
        records = read_manifest(records)
    if not records:
        raise ValueError("no training records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_config.seed)
    model = Stage1Model(model_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.lr, betas=(train_config.beta1, train_config.beta2)
    )
    start_step = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_kind="stage1")
        model_config = Stage1Config.from_dict(payload["config"])
        model = Stage1Model(model_config)
        model.load_state_dict(payload["model_state"])
        optimizer = torch.optim.Adam(
            model.parameters(), lr=train_config.lr, betas=(train_config.beta1, train_config.beta2)
        )
        optimizer.load_state_dict(payload["optimizer_state"])
        start_step = payload["step"]

    data = prepare_records(records)
    crop = min(train_config.crop_frames, min(d.mel.shape[0] for d in data))
    log = _LossLog(out_dir / "stage1_losses.csv", append=start_step > 0)

    model.train()
    try:
        for step in range(start_step, train_config.steps):
            lr_scale = min(1.0, (step + 1) / max(train_config.warmup_steps, 1))
            for group in optimizer.param_groups:
                group["lr"] = train_config.lr * lr_scale

            batch = sample_batch(data, train_config.batch_size, crop, train_config.seed, step)
            outputs = model(batch["wav"], batch["mel"])
            total, terms = stage1_total_loss(model, outputs, batch, train_config.weights)
            _check_finite(step, float(total.detach()), terms)

            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            optimizer.step()
            log.write(step, terms, float(total.detach()))

            done = step + 1
            if done % train_config.checkpoint_every == 0 or done == train_config.steps:
                save_checkpoint(
                    out_dir / f"stage1_step{done}.pt",
                    kind="stage1",
                    config=model_config.to_dict(),
                    model=model,
                    optimizer=optimizer,
                    step=done,
                )
    finally:
        log.close()

    digest = save_checkpoint(
        out_dir / "stage1_final.pt",
        kind="stage1",
        config=model_config.to_dict(),
        model=model,
        optimizer=optimizer,
        step=train_config.steps,
    )
    (out_dir / "stage1_final.hash").write_text(digest + "\n")
    model.eval()
    return model


def load_stage1(path: str | Path) -> Stage1Model:
    payload = load_checkpoint(path, expected_kind="stage1")
    model = Stage1Model(Stage1Config.from_dict(payload["config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model


def stage1_model_hash(model: Stage1Model) -> str:
    return state_hash(model.state_dict())
