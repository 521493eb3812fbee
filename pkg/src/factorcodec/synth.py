"""Synthetic formant-voice corpus with orthogonal factor labels.

Each utterance is a harmonic stack shaped by three independent template
families:

* speaker -> a band of shaped aspiration noise (2.8-7.6 kHz) whose colour is
  the identity signature; the band sits far above the phone formants and is
  independent of F0, so identity stays readable at every pitch and the
  harmonic part of the signal carries no identity at all;
* prosody pattern -> an F0 contour template (register + shape) shared across
  speakers;
* phones -> (F1, F2) formant targets on the 20 ms frame grid.

Speaker never influences F0 or the phone sequence, so content/prosody carry
no identity information by construction. Every factor is recoverable from
its own observable by a nearest-template match, which the probes and the
conversion checks lean on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import (
    ENCODER_RATE,
    FRAMES_PER_SECOND,
    F0Contour,
    MelSpectrogram,
    UtteranceRecord,
    Waveform,
    mel_filterbank,
    mel_spectrogram,
    resample_waveform,
    save_waveform,
    write_manifest,
)

_CONSONANTS = "b d g k l m n p r s t v".split()
_VOWELS = "a e i o u".split()

_MAX_HARMONIC_HZ = 7600.0  # stay under the 16 kHz Nyquist to keep resampling faithful


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Layout of a generated corpus: every (speaker, pattern) cell gets
    `utterances_per_cell` utterances with fresh phone sequences."""

    num_speakers: int = 4
    num_prosody_patterns: int = 4
    utterances_per_cell: int = 5
    phone_inventory_size: int = 12
    min_duration_s: float = 0.96
    max_duration_s: float = 1.60
    sample_rate: int = 24000
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1 or self.num_prosody_patterns < 1:
            raise ValueError("need at least one speaker and one prosody pattern")
        if self.min_duration_s < 0.2 or self.max_duration_s < self.min_duration_s:
            raise ValueError("invalid duration range")

    @property
    def num_utterances(self) -> int:
        return self.num_speakers * self.num_prosody_patterns * self.utterances_per_cell


def phone_formants(phone_id: int) -> tuple[float, float]:
    """Deterministic (F1, F2) target for a phone id, independent of inventory size."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(9021, phone_id)))
    f1 = float(rng.uniform(300.0, 850.0))
    f2 = float(rng.uniform(max(f1 + 400.0, 1150.0), 2550.0))
    return f1, f2


def phone_name(phone_id: int) -> str:
    c = _CONSONANTS[phone_id % len(_CONSONANTS)]
    v = _VOWELS[(phone_id // len(_CONSONANTS)) % len(_VOWELS)]
    return c + v


_NOISE_BAND = (2800.0, 7600.0)
_NOISE_LEVEL = 0.018  # rms relative to the 0.7 harmonic peak, about -32 dB


def speaker_envelope_db(freqs_hz: np.ndarray, speaker_id: int, num_speakers: int) -> np.ndarray:
    """Identity colour of the aspiration-noise band: tilt + one resonance."""
    freqs = np.maximum(np.asarray(freqs_hz, dtype=np.float64), 1.0)
    span = max(num_speakers - 1, 1)
    tilt_db_per_oct = -9.0 + 9.0 * (speaker_id / span)
    center = 3200.0 + 3600.0 * (speaker_id / span)  # 3.2 .. 6.8 kHz
    tilt = tilt_db_per_oct * np.log2(freqs / _NOISE_BAND[0])
    bump = 12.0 * np.exp(-0.5 * ((freqs - center) / 320.0) ** 2)
    return tilt + bump


def speaker_noise(
    num_samples: int,
    sample_rate: int,
    speaker_id: int,
    num_speakers: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unit-rms noise coloured by the speaker envelope, zero outside the band."""
    white = rng.normal(0.0, 1.0, num_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    gain = 10.0 ** (speaker_envelope_db(freqs, speaker_id, num_speakers) / 20.0)
    gain[(freqs < _NOISE_BAND[0]) | (freqs > _NOISE_BAND[1])] = 0.0
    shaped = np.fft.irfft(spec * gain, n=num_samples)
    return shaped / max(float(np.sqrt((shaped**2).mean())), 1e-12)


def phone_envelope_db(freqs_hz: np.ndarray, f1: float, f2: float) -> np.ndarray:
    freqs = np.asarray(freqs_hz, dtype=np.float64)
    peak1 = 22.0 * np.exp(-0.5 * ((freqs - f1) / 130.0) ** 2)
    peak2 = 18.0 * np.exp(-0.5 * ((freqs - f2) / 190.0) ** 2)
    return peak1 + peak2


def pattern_f0(tau: np.ndarray, pattern_id: int) -> np.ndarray:
    """F0 contour template on normalized time tau in [0, 1].

    Four base shapes (rise, fall, peak, valley) in well-separated registers;
    ids past 3 reuse the shapes in a raised register.
    """
    tau = np.asarray(tau, dtype=np.float64)
    shape = pattern_id % 4
    register = 1.0 + 0.12 * (pattern_id // 4)
    if shape == 0:
        contour = 115.0 + 70.0 * tau
    elif shape == 1:
        contour = 320.0 - 90.0 * tau
    elif shape == 2:
        contour = 180.0 + 55.0 * np.sin(np.pi * tau)
    else:
        contour = 145.0 - 35.0 * np.sin(np.pi * tau)
    return contour * register


def _jitter(tau: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Slow multiplicative wobble, ~1.5% peak, so repeats of a pattern differ."""
    a = rng.uniform(0.5, 1.5)
    b = rng.uniform(2.0, 4.0)
    p1, p2 = rng.uniform(0.0, 2 * np.pi, size=2)
    wob = np.sin(2 * np.pi * a * tau + p1) + 0.7 * np.sin(2 * np.pi * b * tau + p2)
    return 1.0 + 0.015 * wob / 1.7


def render_utterance(
    speaker_id: int,
    pattern_id: int,
    phone_seq: np.ndarray,
    frames_per_phone: np.ndarray,
    spec: SyntheticCorpusSpec,
    rng: np.random.Generator,
) -> tuple[Waveform, F0Contour, np.ndarray]:
    """Synthesize one utterance; returns (waveform, f0 labels, frame phone labels)."""
    num_frames = int(frames_per_phone.sum())
    sr = spec.sample_rate
    hop = sr // FRAMES_PER_SECOND  # samples per 20 ms frame at the render rate
    num_samples = num_frames * hop

    frame_phones = np.repeat(phone_seq, frames_per_phone)  # (num_frames,)
    tau_frame = (np.arange(num_frames) + 0.5) / num_frames
    f0_frame = pattern_f0(tau_frame, pattern_id) * _jitter(tau_frame, rng)

    # sample-level F0 by linear interpolation between frame centers
    t_frame = (np.arange(num_frames) + 0.5) * hop
    t_sample = np.arange(num_samples)
    f0_sample = np.interp(t_sample, t_frame, f0_frame)
    phase = 2 * np.pi * np.cumsum(f0_sample) / sr

    # enough harmonics for the lowest-pitched frame to reach the top of the band
    num_harmonics = int(_MAX_HARMONIC_HZ / float(f0_frame.min()))

    # per-frame amplitude of each harmonic from the phone envelope alone;
    # identity is injected afterwards as shaped noise
    k = np.arange(1, num_harmonics + 1)
    harm_hz = f0_frame[:, None] * k[None, :]  # (num_frames, K)
    f1f2 = np.array([phone_formants(int(p)) for p in range(int(phone_seq.max()) + 1)])
    env_db = phone_envelope_db(
        harm_hz,
        f1f2[frame_phones, 0][:, None],
        f1f2[frame_phones, 1][:, None],
    )
    # glottal-like source slope keeps the fundamental competitive with
    # formant-boosted harmonics, which keeps the pitch unambiguous
    amp_frame = 10.0 ** (env_db / 20.0) / k[None, :] ** 1.5
    amp_frame[harm_hz > _MAX_HARMONIC_HZ] = 0.0

    # upsample amplitudes to the sample grid so phone boundaries don't click
    amp = np.empty((num_samples, num_harmonics))
    for j in range(num_harmonics):
        amp[:, j] = np.interp(t_sample, t_frame, amp_frame[:, j])

    signal = (amp * np.sin(phase[:, None] * k[None, :])).sum(axis=1)
    signal = 0.7 * signal / max(np.max(np.abs(signal)), 1e-9)
    signal = signal + _NOISE_LEVEL * speaker_noise(
        num_samples, sr, speaker_id, spec.num_speakers, rng
    )

    wav = Waveform(samples=signal.astype(np.float32), sample_rate=sr)
    f0 = F0Contour(values=f0_frame.astype(np.float32), voiced_mask=np.ones(num_frames, bool))
    return wav, f0, frame_phones.astype(np.int64)


def _plan_phones(
    spec: SyntheticCorpusSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pick a phone sequence and per-phone durations (whole frames)."""
    lo = int(round(spec.min_duration_s * FRAMES_PER_SECOND))
    hi = int(round(spec.max_duration_s * FRAMES_PER_SECOND))
    total_frames = int(rng.integers(lo, hi + 1))
    num_phones = max(2, total_frames // 10)
    phone_seq = rng.integers(0, spec.phone_inventory_size, size=num_phones)
    # avoid immediate repeats so frame labels have real transitions
    for i in range(1, num_phones):
        if phone_seq[i] == phone_seq[i - 1]:
            phone_seq[i] = (phone_seq[i] + 1) % spec.phone_inventory_size
    cuts = np.sort(rng.choice(np.arange(1, total_frames), size=num_phones - 1, replace=False))
    frames_per_phone = np.diff(np.concatenate([[0], cuts, [total_frames]]))
    # guarantee every phone at least 3 frames (60 ms)
    while frames_per_phone.min() < 3:
        donor = int(np.argmax(frames_per_phone))
        taker = int(np.argmin(frames_per_phone))
        frames_per_phone[donor] -= 1
        frames_per_phone[taker] += 1
    return phone_seq.astype(np.int64), frames_per_phone.astype(np.int64)


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec, out_dir: str | Path
) -> list[UtteranceRecord]:
    """Render the full corpus, write WAV / F0 sidecars / manifest.jsonl, return records.

    Each utterance derives its RNG from (seed, speaker, pattern, index), so the
    corpus is reproducible record-by-record regardless of generation order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(spec.num_speakers):
        for p in range(spec.num_prosody_patterns):
            for i in range(spec.utterances_per_cell):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=(spec.seed, s, p, i))
                )
                phone_seq, frames_per_phone = _plan_phones(spec, rng)
                wav, f0, frame_phones = render_utterance(
                    s, p, phone_seq, frames_per_phone, spec, rng
                )
                name = f"spk{s}_pat{p}_utt{i}"
                audio_path = out_dir / f"{name}.wav"
                save_waveform(wav, audio_path)
                records.append(
                    UtteranceRecord(
                        audio_path=audio_path,
                        transcript=" ".join(phone_name(int(q)) for q in phone_seq),
                        phone_ids=frame_phones,
                        speaker_id=s,
                        f0=f0,
                        pattern_id=p,
                    )
                )
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


# ---------------------------------------------------------------------------
# nearest-template classifiers (ground-truth oracles for probes and checks)
# ---------------------------------------------------------------------------


_HIGH_BAND_HZ = 2800.0  # phone formants live below this; identity cues above
_template_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _high_band_profile(wav: Waveform) -> np.ndarray:
    """Mean log-mel over frames, restricted to the identity band, mean-centred."""
    if wav.sample_rate != ENCODER_RATE:
        wav = resample_waveform(wav, ENCODER_RATE)
    mel: MelSpectrogram = mel_spectrogram(wav)
    from .audio import N_FFT, NUM_MELS

    bank = mel_filterbank(ENCODER_RATE, N_FFT, NUM_MELS)
    fft_freqs = np.linspace(0, ENCODER_RATE / 2, N_FFT // 2 + 1)
    centers = (bank * fft_freqs[None, :]).sum(axis=1) / np.maximum(bank.sum(axis=1), 1e-9)
    profile = mel.frames.mean(axis=0)[centers >= _HIGH_BAND_HZ]
    return profile - profile.mean()


def _speaker_calibration(num_speakers: int) -> np.ndarray:
    """Profile of a neutral pitch sweep plus each speaker's noise signature,
    measured with the same mel front end used for classification."""
    if num_speakers in _template_cache:
        return _template_cache[num_speakers]
    sr = ENCODER_RATE
    t = np.arange(sr) / sr
    f0 = 130.0 + 150.0 * t / t[-1]  # covers the corpus pitch range
    phase = 2 * np.pi * np.cumsum(f0) / sr
    num_harmonics = int(_MAX_HARMONIC_HZ / f0.min())
    k = np.arange(1, num_harmonics + 1)
    amp = 1.0 / k[None, :] ** 1.5 * (f0[:, None] * k[None, :] <= _MAX_HARMONIC_HZ)
    sweep = (amp * np.sin(phase[:, None] * k[None, :])).sum(axis=1)
    sweep = 0.7 * sweep / np.max(np.abs(sweep))
    profiles = []
    for s in range(num_speakers):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(513, s)))
        sig = sweep + _NOISE_LEVEL * speaker_noise(sweep.size, sr, s, num_speakers, rng)
        profiles.append(_high_band_profile(Waveform(sig.astype(np.float32), sr)))
    _template_cache[num_speakers] = np.stack(profiles)
    return _template_cache[num_speakers]


def classify_speaker(wav: Waveform, num_speakers: int) -> int:
    """Nearest speaker template by high-band mel envelope shape."""
    templates = _speaker_calibration(num_speakers)
    profile = _high_band_profile(wav)
    dists = ((templates - profile[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(dists))


def classify_pattern(f0: F0Contour, num_patterns: int, grid: int = 32) -> int:
    """Nearest prosody-pattern template on a fixed log-F0 time grid."""
    voiced = f0.voiced_mask
    if voiced.sum() < 2:
        raise ValueError("need at least two voiced frames to classify a contour")
    tau_grid = (np.arange(grid) + 0.5) / grid
    tau_voiced = (np.flatnonzero(voiced) + 0.5) / f0.num_frames
    contour = np.interp(tau_grid, tau_voiced, f0.values[voiced])
    templates = np.stack([pattern_f0(tau_grid, p) for p in range(num_patterns)])
    dists = ((np.log(templates) - np.log(np.maximum(contour, 1e-3))[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(dists))
