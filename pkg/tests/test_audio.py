"""Oracle tests for waveform I/O, the mel front end, and F0 extraction."""

import numpy as np
import pytest
from scipy.io import wavfile

from factorcodec.audio import (
    ENCODER_RATE,
    HOP,
    MEL_FLOOR,
    N_FFT,
    NUM_MELS,
    TARGET_RATE,
    WIN,
    F0Contour,
    UtteranceRecord,
    Waveform,
    extract_f0,
    load_waveform,
    mel_filterbank,
    mel_spectrogram,
    read_manifest,
    resample_waveform,
    save_waveform,
    write_manifest,
)


def sine(freq, duration_s, rate, amp=0.5):
    t = np.arange(int(duration_s * rate)) / rate
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


# ---------------------------------------------------------------------------
# waveform container and I/O
# ---------------------------------------------------------------------------


def test_waveform_rejects_bad_rate_and_shape():
    with pytest.raises(ValueError):
        Waveform(samples=np.zeros(100, np.float32), sample_rate=44100)
    with pytest.raises(ValueError):
        Waveform(samples=np.zeros((100, 2), np.float32), sample_rate=16000)


def test_waveform_normalizes_peak_above_one():
    wav = Waveform(samples=np.array([0.0, 2.0, -4.0], np.float32), sample_rate=16000)
    assert np.max(np.abs(wav.samples)) == pytest.approx(1.0)
    assert wav.samples[1] == pytest.approx(0.5)


def test_load_resamples_24k_to_16k(tmp_path):
    path = tmp_path / "a.wav"
    save_waveform(Waveform(sine(440, 1.0, TARGET_RATE), TARGET_RATE), path)
    wav = load_waveform(path, target_rate=ENCODER_RATE)
    assert wav.samples.shape == (16000,)
    assert wav.sample_rate == ENCODER_RATE


def test_load_upsamples_and_keeps_tone_in_place(tmp_path):
    path = tmp_path / "b.wav"
    save_waveform(Waveform(sine(440, 0.5, ENCODER_RATE), ENCODER_RATE), path)
    wav = load_waveform(path, target_rate=TARGET_RATE)
    assert wav.samples.shape == (12000,)
    # locate the spectral peak with sub-Hz resolution via a zero-padded FFT
    spec = np.abs(np.fft.rfft(wav.samples * np.hanning(wav.samples.size), n=1 << 18))
    peak_hz = np.argmax(spec) * TARGET_RATE / (1 << 18)
    assert abs(peak_hz - 440.0) < 1.0


def test_load_same_rate_is_lossless_apart_from_pcm(tmp_path):
    path = tmp_path / "c.wav"
    original = sine(200, 0.3, ENCODER_RATE)
    save_waveform(Waveform(original, ENCODER_RATE), path)
    wav = load_waveform(path, target_rate=ENCODER_RATE)
    assert np.max(np.abs(wav.samples - original)) <= 2.0 / 32768


def test_load_rejects_stereo_and_empty(tmp_path):
    stereo = tmp_path / "st.wav"
    wavfile.write(stereo, 16000, np.zeros((100, 2), np.int16))
    with pytest.raises(ValueError, match="mono"):
        load_waveform(stereo, target_rate=ENCODER_RATE)
    empty = tmp_path / "empty.wav"
    wavfile.write(empty, 16000, np.zeros(0, np.int16))
    with pytest.raises(ValueError, match="zero-length"):
        load_waveform(empty, target_rate=ENCODER_RATE)


def test_load_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_waveform(tmp_path / "nope.wav", target_rate=ENCODER_RATE)


# ---------------------------------------------------------------------------
# mel spectrogram
# ---------------------------------------------------------------------------


def test_mel_frame_count_is_50_per_second():
    for dur, expected in [(1.0, 50), (0.1, 5), (1.6, 80), (0.52, 26)]:
        wav = Waveform(sine(300, dur, ENCODER_RATE), ENCODER_RATE)
        mel = mel_spectrogram(wav)
        assert mel.frames.shape == (expected, NUM_MELS)


def test_mel_silence_hits_log_floor():
    wav = Waveform(np.zeros(16000, np.float32), ENCODER_RATE)
    mel = mel_spectrogram(wav)
    assert np.all(mel.frames == np.float32(np.log(MEL_FLOOR)))


def test_mel_rejects_sub_frame_input():
    with pytest.raises(ValueError, match="shorter"):
        mel_spectrogram(Waveform(np.zeros(700, np.float32), ENCODER_RATE))
    with pytest.raises(ValueError, match="16000"):
        mel_spectrogram(Waveform(np.zeros(24000, np.float32), TARGET_RATE))


def test_mel_matches_direct_stft_oracle():
    """Recompute a 440 Hz tone's mel with an explicit per-frame loop."""
    wav = Waveform(sine(440, 1.0, ENCODER_RATE), ENCODER_RATE)
    mel = mel_spectrogram(wav)

    bank = mel_filterbank(ENCODER_RATE, N_FFT, NUM_MELS)
    window = np.hanning(WIN)
    padded = np.pad(wav.samples, (0, WIN))
    expected = np.zeros((50, NUM_MELS))
    for t in range(50):
        frame = padded[t * HOP : t * HOP + WIN] * window
        power = np.abs(np.fft.rfft(frame, n=N_FFT)) ** 2
        expected[t] = np.log(np.maximum(bank @ power, MEL_FLOOR))
    np.testing.assert_allclose(mel.frames, expected, rtol=1e-4, atol=1e-4)

    # the tone should stay in one mel bin across all frames
    argmax = mel.frames.argmax(axis=1)
    assert np.all(argmax == argmax[0])


# ---------------------------------------------------------------------------
# F0 extraction
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("freq", [120.0, 200.0, 330.0])
def test_f0_recovers_pure_tone(freq):
    wav = Waveform(sine(freq, 1.0, ENCODER_RATE), ENCODER_RATE)
    f0 = extract_f0(wav)
    assert f0.voiced_mask.mean() >= 0.9
    voiced_values = f0.values[f0.voiced_mask]
    assert np.median(np.abs(voiced_values - freq)) < 3.0


def test_f0_harmonic_stack_avoids_octave_errors():
    # strong harmonics invite an octave-down pick; the earliest-peak rule prevents it
    t = np.arange(16000) / ENCODER_RATE
    sig = sum(
        (0.5 / k) * np.sin(2 * np.pi * 220.0 * k * t) for k in range(1, 8)
    )
    f0 = extract_f0(Waveform(sig.astype(np.float32), ENCODER_RATE))
    voiced_values = f0.values[f0.voiced_mask]
    assert np.median(np.abs(voiced_values - 220.0)) < 3.0


def test_f0_white_noise_mostly_unvoiced():
    rng = np.random.default_rng(7)
    wav = Waveform(rng.normal(0, 0.3, 16000).astype(np.float32), ENCODER_RATE)
    f0 = extract_f0(wav)
    assert f0.voiced_mask.mean() <= 0.1


def test_f0_silence_fully_unvoiced():
    f0 = extract_f0(Waveform(np.zeros(16000, np.float32), ENCODER_RATE))
    assert not f0.voiced_mask.any()
    assert np.all(f0.values == 0.0)


def test_f0_and_mel_share_the_frame_clock():
    for num_samples in [16000, 8320, 25600, 12345]:
        wav = Waveform(sine(150, num_samples / ENCODER_RATE, ENCODER_RATE), ENCODER_RATE)
        assert extract_f0(wav).num_frames == mel_spectrogram(wav).num_frames == num_samples // HOP


def test_f0_contour_validation():
    with pytest.raises(ValueError):
        F0Contour(values=np.array([0.0, -5.0]), voiced_mask=np.array([False, True]))
    contour = F0Contour.from_values(np.array([0.0, 150.0, 0.0]))
    assert contour.voiced_mask.tolist() == [False, True, False]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _toy_record(tmp_path, name, speaker, pattern=None, frames=10):
    audio = tmp_path / f"{name}.wav"
    save_waveform(Waveform(sine(200, frames * HOP / ENCODER_RATE, ENCODER_RATE), ENCODER_RATE), audio)
    values = np.linspace(120, 180, frames).astype(np.float32)
    return UtteranceRecord(
        audio_path=audio,
        transcript=f"ta {name}",
        phone_ids=np.arange(frames) % 3,
        speaker_id=speaker,
        f0=F0Contour.from_values(values),
        pattern_id=pattern,
    )


def test_manifest_roundtrip(tmp_path):
    records = [
        _toy_record(tmp_path, "u0", speaker=0, pattern=2),
        _toy_record(tmp_path, "u1", speaker=3),
    ]
    manifest = tmp_path / "manifest.jsonl"
    write_manifest(records, manifest)
    loaded = read_manifest(manifest)
    assert len(loaded) == 2
    for orig, back in zip(records, loaded):
        assert back.audio_path.resolve() == orig.audio_path.resolve()
        assert back.transcript == orig.transcript
        assert back.speaker_id == orig.speaker_id
        assert back.pattern_id == orig.pattern_id
        np.testing.assert_array_equal(back.phone_ids, orig.phone_ids)
        np.testing.assert_allclose(back.f0.values, orig.f0.values)


def test_manifest_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"audio": "x.wav"\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_manifest(bad)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(ValueError, match="no records"):
        read_manifest(empty)


def test_record_rejects_mismatched_label_lengths(tmp_path):
    with pytest.raises(ValueError, match="same frames"):
        UtteranceRecord(
            audio_path=tmp_path / "x.wav",
            transcript="ta",
            phone_ids=np.zeros(5, np.int64),
            speaker_id=0,
            f0=F0Contour.from_values(np.full(6, 100.0, np.float32)),
        )
