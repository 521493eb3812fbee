"""Zero-shot synthesis and voice conversion over the two-stage codec.

The codec factorizes speech into a timbre-free 50 Hz token stream (z_cp)
plus 48 global timbre tokens (q_t). The language model continues z_cp for
new text under a prosody prompt; the stage-2 decoder renders any z_cp
stream in any speaker's timbre. Voice conversion is the codec-only case:
re-decode a source's z_cp with a target's q_t.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, load_waveform, mel_spectrogram, resample_waveform
from .lm import CodeLm, SamplingParams, TextTokenizer, Vocab, generate_continuation, load_lm
from .stage1 import Stage1Model, load_stage1
from .stage2 import Stage2Model, load_stage2

MIN_TOKENIZE_SECONDS = 0.2


@dataclass
class TokenizedSpeech:
    """Unified codec view of one utterance."""

    z_cp: np.ndarray  # (L,) int64 fused codes at 50 Hz
    q_t: torch.Tensor  # (num_queries, D) quantized timbre tokens

    def __post_init__(self):
        self.z_cp = np.asarray(self.z_cp, dtype=np.int64)
        if self.z_cp.ndim != 1:
            raise ValueError("z_cp must be one-dimensional")
        if self.q_t.ndim != 2:
            raise ValueError("q_t must be (num_queries, dim)")


@dataclass
class SynthesisRequest:
    target_text: str
    prompt_wav: Waveform
    prompt_transcript: str
    timbre_ref: Waveform

    def __post_init__(self):
        if not self.target_text:
            raise ValueError("target_text must be non-empty")
        if not self.prompt_transcript:
            raise ValueError("prompt_transcript must be non-empty")


@dataclass
class SynthesisResult:
    audio: Waveform
    z_cp_sys: np.ndarray
    truncated: bool
    num_generated: int


@dataclass
class PipelineModels:
    stage1: Stage1Model
    stage2: Stage2Model
    lm: CodeLm | None = None
    vocab: Vocab | None = None
    tokenizer: TextTokenizer | None = None


def load_pipeline(
    stage1_path: str | Path,
    stage2_path: str | Path,
    lm_path: str | Path | None = None,
    tokenizer_path: str | Path | None = None,
) -> PipelineModels:
    lm = vocab = tokenizer = None
    if lm_path is not None:
        lm, vocab = load_lm(lm_path)
    if tokenizer_path is not None:
        tokenizer = TextTokenizer.load(tokenizer_path)
    return PipelineModels(
        stage1=load_stage1(stage1_path),
        stage2=load_stage2(stage2_path),
        lm=lm,
        vocab=vocab,
        tokenizer=tokenizer,
    )


def _as_waveform(audio: Waveform | str | Path) -> Waveform:
    if isinstance(audio, Waveform):
        return audio
    return load_waveform(audio, target_rate=16000)


def tokenize_speech(
    audio: Waveform | str | Path, stage1: Stage1Model, stage2: Stage2Model
) -> TokenizedSpeech:
    """Frozen encoders + fusion quantizer: audio -> (z_cp, q_t)."""
    wav = _as_waveform(audio)
    if wav.duration_s < MIN_TOKENIZE_SECONDS:
        raise ValueError(
            f"audio too short to tokenize: {wav.duration_s:.3f} s < {MIN_TOKENIZE_SECONDS} s"
        )
    wav16 = resample_waveform(wav, 16000)
    mel = mel_spectrogram(wav16)
    wav_t = torch.from_numpy(wav16.samples[: mel.num_frames * 320].copy())[None].float()
    mel_t = torch.from_numpy(mel.frames)[None].float()
    stage1.eval()
    stage2.eval()
    with torch.no_grad():
        enc = stage1.encode(wav_t, mel_t)
        codes, _ = stage2.fuse_and_requantize(enc.q_c, enc.q_p)
    return TokenizedSpeech(z_cp=codes[0].numpy(), q_t=enc.q_t[0])


def decode_tokens(
    z_cp: np.ndarray | torch.Tensor, q_t: torch.Tensor, stage2: Stage2Model
) -> Waveform:
    """Render fused codes in the timbre carried by q_t (24 kHz)."""
    codes = torch.as_tensor(np.asarray(z_cp), dtype=torch.long)[None]
    if codes.shape[1] == 0:
        raise ValueError("cannot decode an empty code stream")
    stage2.eval()
    with torch.no_grad():
        wav = stage2.decode_codes(codes, q_t[None].float())[0]
    return _finalize(wav)


def _finalize(wav: torch.Tensor) -> Waveform:
    samples = wav.detach().cpu().numpy().astype(np.float32)
    if not np.all(np.isfinite(samples)):
        raise RuntimeError("decoder produced non-finite samples")
    peak = float(np.abs(samples).max())
    if peak > 0:
        samples = samples * (0.95 / max(peak, 0.95))
    return Waveform(samples=samples, sample_rate=24000)


def synthesize(
    request: SynthesisRequest,
    models: PipelineModels,
    params: SamplingParams = SamplingParams(),
) -> SynthesisResult:
    """Prosody continuation + timbre injection.

    The LM sees only text and the prompt's z_cp — timbre cannot reach it —
    then the decoder renders the generated stream with the reference q_t.
    """
    if models.lm is None or models.vocab is None or models.tokenizer is None:
        raise ValueError("synthesis requires a trained language model and tokenizer")
    prompt = tokenize_speech(request.prompt_wav, models.stage1, models.stage2)
    timbre = tokenize_speech(request.timbre_ref, models.stage1, models.stage2)
    prompt_text = models.tokenizer.encode(request.prompt_transcript)
    target_text = models.tokenizer.encode(request.target_text)
    gen = generate_continuation(
        models.lm,
        models.vocab,
        prompt_text_ids=prompt_text,
        target_text_ids=target_text,
        prompt_codes=prompt.z_cp,
        params=params,
    )
    if gen.codes.size == 0:
        raise RuntimeError("language model emitted no codec tokens")
    audio = decode_tokens(gen.codes, timbre.q_t, models.stage2)
    return SynthesisResult(
        audio=audio,
        z_cp_sys=gen.codes,
        truncated=gen.truncated,
        num_generated=gen.num_generated,
    )


def voice_convert(
    source: Waveform | str | Path,
    target: Waveform | str | Path,
    stage1: Stage1Model,
    stage2: Stage2Model,
) -> Waveform:
    """Keep the source's content-prosody stream; swap in the target's timbre."""
    src = tokenize_speech(source, stage1, stage2)
    trg = tokenize_speech(target, stage1, stage2)
    return decode_tokens(src.z_cp, trg.q_t, stage2)


def reconstruct(audio: Waveform | str | Path, stage1: Stage1Model, stage2: Stage2Model) -> Waveform:
    """Round-trip: tokenize then decode in the utterance's own timbre."""
    tok = tokenize_speech(audio, stage1, stage2)
    return decode_tokens(tok.z_cp, tok.q_t, stage2)
