"""Waveform I/O, mel / F0 feature extraction, and corpus manifests.

All frame-level features share one clock: 20 ms frames (50 per second),
80-bin log-mel with a 50 ms analysis window, computed on 16 kHz audio.
24 kHz audio appears only as a high-rate reconstruction target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

ENCODER_RATE = 16000
TARGET_RATE = 24000
VALID_RATES = (ENCODER_RATE, TARGET_RATE)

FRAME_SHIFT_MS = 20
FRAME_LENGTH_MS = 50
FRAMES_PER_SECOND = 1000 // FRAME_SHIFT_MS  # 50

HOP = ENCODER_RATE * FRAME_SHIFT_MS // 1000  # 320 samples
WIN = ENCODER_RATE * FRAME_LENGTH_MS // 1000  # 800 samples
N_FFT = 1024
NUM_MELS = 80
MEL_FLOOR = 1e-5

F0_MIN = 60.0
F0_MAX = 400.0
# normalized-autocorrelation peak needed to call a frame voiced; white noise
# with this window tops out near 0.11, periodic signals sit well above 0.5
VOICING_PEAK = 0.4


@dataclass
class Waveform:
    """Mono audio in [-1, 1] at one of the two supported rates."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate not in VALID_RATES:
            raise ValueError(f"sample_rate must be one of {VALID_RATES}, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0:
            self.samples = self.samples / peak

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def num_frames(self) -> int:
        """Number of 20 ms frames this waveform spans."""
        return int(self.samples.size * FRAMES_PER_SECOND // self.sample_rate)


@dataclass
class MelSpectrogram:
    """Log-compressed 80-bin mel frames, (num_frames, 80)."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_MELS:
            raise ValueError(f"expected (num_frames, {NUM_MELS}), got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class F0Contour:
    """Per-frame fundamental frequency in Hz with a voicing mask.

    values are 0 on unvoiced frames, > 0 on voiced frames.
    """

    values: np.ndarray
    voiced_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.voiced_mask = np.asarray(self.voiced_mask, dtype=bool)
        if self.values.shape != self.voiced_mask.shape or self.values.ndim != 1:
            raise ValueError("values and voiced_mask must be 1-D and the same length")
        if np.any(self.values[self.voiced_mask] <= 0):
            raise ValueError("voiced frames must carry a positive F0")

    @property
    def num_frames(self) -> int:
        return self.values.size

    @classmethod
    def from_values(cls, values: np.ndarray) -> "F0Contour":
        values = np.asarray(values, dtype=np.float32)
        return cls(values=values, voiced_mask=values > 0)


@dataclass
class UtteranceRecord:
    """One training example with frame-aligned supervision labels."""

    audio_path: Path
    transcript: str
    phone_ids: np.ndarray
    speaker_id: int
    f0: F0Contour
    pattern_id: int | None = None  # prosody-pattern provenance, synthetic corpora only

    def __post_init__(self):
        self.audio_path = Path(self.audio_path)
        self.phone_ids = np.asarray(self.phone_ids, dtype=np.int64)
        if self.phone_ids.size != self.f0.num_frames:
            raise ValueError(
                f"phone labels ({self.phone_ids.size}) and f0 ({self.f0.num_frames}) "
                "must cover the same frames"
            )

    @property
    def num_frames(self) -> int:
        return self.phone_ids.size


def load_waveform(path: str | Path, target_rate: int) -> Waveform:
    """Load a WAV file, resample to target_rate, and bound the peak to 1."""
    path = Path(path)
    if target_rate not in VALID_RATES:
        raise ValueError(f"target_rate must be one of {VALID_RATES}")
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"unreadable audio file {path}: {exc}") from exc
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.size == 0:
        raise ValueError(f"{path}: zero-length audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float32) - 128.0) / 128.0
    else:
        samples = data.astype(np.float32)
    if rate != target_rate:
        g = math.gcd(target_rate, rate)
        samples = resample_poly(samples, target_rate // g, rate // g).astype(np.float32)
    return Waveform(samples=samples, sample_rate=target_rate)


def save_waveform(wav: Waveform, path: str | Path) -> None:
    """Write PCM-16 WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clipped = np.clip(wav.samples, -1.0, 1.0)
    wavfile.write(path, wav.sample_rate, np.round(clipped * 32767.0).astype(np.int16))


def resample_waveform(wav: Waveform, target_rate: int) -> Waveform:
    if target_rate == wav.sample_rate:
        return wav
    g = math.gcd(target_rate, wav.sample_rate)
    samples = resample_poly(wav.samples, target_rate // g, wav.sample_rate // g)
    return Waveform(samples=samples.astype(np.float32), sample_rate=target_rate)


def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if fmax is None:
        fmax = sample_rate / 2
    hz_to_mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    mel_to_hz = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    bank = np.zeros((n_mels, fft_freqs.size), dtype=np.float32)
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (fft_freqs - left) / max(center - left, 1e-9)
        down = (right - fft_freqs) / max(right - center, 1e-9)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    return bank


def frame_signal(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Slice into floor(len / hop) frames of length win, zero-padded at the end."""
    num_frames = samples.size // hop
    padded = np.pad(samples, (0, max(0, (num_frames - 1) * hop + win - samples.size)))
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    return padded[idx]


_MEL_BANK_16K = None


def mel_spectrogram(wav: Waveform) -> MelSpectrogram:
    """80-bin log-mel at the shared 20 ms frame clock.

    Frame t covers samples [t * hop, t * hop + win); a 1.00 s input yields
    exactly 50 frames. Energies are floored at 1e-5 before the log.
    """
    global _MEL_BANK_16K
    if wav.sample_rate != ENCODER_RATE:
        raise ValueError(f"mel analysis expects {ENCODER_RATE} Hz input, got {wav.sample_rate}")
    if wav.samples.size < WIN:
        raise ValueError(f"waveform shorter than one {FRAME_LENGTH_MS} ms frame")
    if _MEL_BANK_16K is None:
        _MEL_BANK_16K = mel_filterbank(ENCODER_RATE, N_FFT, NUM_MELS)
    frames = frame_signal(wav.samples, WIN, HOP) * np.hanning(WIN)[None, :]
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = spec @ _MEL_BANK_16K.T
    return MelSpectrogram(frames=np.log(np.maximum(mel, MEL_FLOOR)))


def extract_f0(wav: Waveform) -> F0Contour:
    """Frame-level F0 by windowed autocorrelation over a 60-400 Hz band.

    A frame is voiced when it carries energy and a strong periodic peak;
    the smallest lag near the autocorrelation maximum wins, which avoids
    octave-down errors on strongly harmonic signals. Silence comes back
    fully unvoiced rather than raising.
    """
    if wav.sample_rate != ENCODER_RATE:
        raise ValueError(f"F0 analysis expects {ENCODER_RATE} Hz input, got {wav.sample_rate}")
    frames = frame_signal(wav.samples, WIN, HOP).astype(np.float64)
    num_frames = frames.shape[0]
    values = np.zeros(num_frames, dtype=np.float32)
    voiced = np.zeros(num_frames, dtype=bool)
    if num_frames == 0:
        return F0Contour(values=values, voiced_mask=voiced)

    lag_min = int(np.floor(wav.sample_rate / F0_MAX))
    lag_max = int(np.ceil(wav.sample_rate / F0_MIN))
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames**2).mean(axis=1))
    energy_gate = max(1e-4, 0.05 * float(rms.max(initial=0.0)))

    # autocorrelation of all frames at once via FFT
    nfft = 1 << int(np.ceil(np.log2(2 * WIN)))
    spectra = np.fft.rfft(frames, n=nfft, axis=1)
    acorr = np.fft.irfft(spectra * np.conj(spectra), n=nfft, axis=1)[:, : lag_max + 2]
    r0 = acorr[:, 0]

    for t in range(num_frames):
        if rms[t] <= energy_gate or r0[t] <= 0:
            continue
        band = acorr[t, lag_min : lag_max + 1] / r0[t]
        peak = float(band.max())
        if peak < VOICING_PEAK:
            continue
        # earliest local maximum near the global peak, then parabolic refinement;
        # preferring the earliest avoids octave-down picks on harmonic-rich input
        inner = np.flatnonzero(
            (band[1:-1] >= band[:-2]) & (band[1:-1] >= band[2:]) & (band[1:-1] >= 0.85 * peak)
        )
        lag = lag_min + (1 + int(inner[0]) if inner.size else int(np.argmax(band)))
        if lag_min < lag < lag_max:
            a, b, c = acorr[t, lag - 1 : lag + 2] / r0[t]
            denom = a - 2 * b + c
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (a - c) / denom
        values[t] = wav.sample_rate / lag
        voiced[t] = True

    # median-of-3 over voiced interiors removes single-frame octave glitches
    if num_frames >= 3:
        interior = voiced[1:-1] & voiced[:-2] & voiced[2:]
        med = np.median(np.stack([values[:-2], values[1:-1], values[2:]]), axis=0)
        values[1:-1] = np.where(interior, med, values[1:-1])
    # the median pass cannot reach the edges; snap implausible edge jumps
    if num_frames >= 2:
        for edge, inner in ((0, 1), (-1, -2)):
            if voiced[edge] and voiced[inner]:
                ratio = values[edge] / values[inner]
                if not 0.8 <= ratio <= 1.25:
                    values[edge] = values[inner]
    return F0Contour(values=values, voiced_mask=voiced)


def write_manifest(records: list[UtteranceRecord], path: str | Path) -> None:
    """Write records as JSON lines; audio / f0 paths are stored relative to the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    with open(path, "w") as fh:
        for rec in records:
            f0_path = rec.audio_path.with_suffix(".f0.npy")
            row = {
                "audio": _relativize(rec.audio_path, base),
                "text": rec.transcript,
                "speaker": int(rec.speaker_id),
                "phones": [int(p) for p in rec.phone_ids],
                "f0": _relativize(f0_path, base),
            }
            if rec.pattern_id is not None:
                row["pattern"] = int(rec.pattern_id)
            fh.write(json.dumps(row) + "\n")
            np.save(base / row["f0"], rec.f0.values)


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    path = Path(path)
    base = path.parent
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            f0_values = np.load(base / row["f0"])
            records.append(
                UtteranceRecord(
                    audio_path=base / row["audio"],
                    transcript=row["text"],
                    phone_ids=np.asarray(row["phones"], dtype=np.int64),
                    speaker_id=int(row["speaker"]),
                    f0=F0Contour.from_values(f0_values),
                    pattern_id=row.get("pattern"),
                )
            )
    if not records:
        raise ValueError(f"manifest {path} contains no records")
    return records


def _relativize(p: Path, base: Path) -> str:
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)
