"""Tests for F0 correlation, probe leakage, similarity metrics, reporting."""

import json

import numpy as np
import pytest

from factorcodec.audio import Waveform, extract_f0
from factorcodec.evaluation import (
    F0CorrelationResult,
    MetricEntry,
    ProbeReport,
    cosine_similarity,
    f0_correlation,
    mel_distance,
    probe_leakage,
    speaker_similarity,
    write_report,
)


def modulated_tone(seconds=1.2, rate=16000, base=150.0, depth=40.0, wobble_hz=1.1, scale=1.0):
    t = np.arange(int(seconds * rate)) / rate
    f0 = scale * (base + depth * np.sin(2 * np.pi * wobble_hz * t))
    phase = 2 * np.pi * np.cumsum(f0) / rate
    return Waveform((0.4 * np.sin(phase)).astype(np.float32), rate)


def constant_tone(seconds=1.0, rate=16000, freq=150.0):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform((0.4 * np.sin(2 * np.pi * freq * t)).astype(np.float32), rate)


# ---------------------------------------------------------------------------
# f0 correlation
# ---------------------------------------------------------------------------


def test_identical_signals_correlate_perfectly():
    a = modulated_tone()
    result = f0_correlation(a, a)
    assert result.value == pytest.approx(1.0, abs=1e-9)
    assert result.n_joint >= 10
    assert bool(result)


def test_time_reversed_contour_matches_loop_oracle():
    a = modulated_tone(seconds=1.0, wobble_hz=0.7)
    b = Waveform(a.samples[::-1].copy(), a.sample_rate)
    result = f0_correlation(a, b)

    fa, fb = extract_f0(a), extract_f0(b)
    joint = fa.voiced_mask & fb.voiced_mask & (fa.values > 0) & (fb.values > 0)
    la = np.log(fa.values[joint].astype(np.float64))
    lb = np.log(fb.values[joint].astype(np.float64))
    n = la.size
    num = np.sum((la - la.mean()) * (lb - lb.mean()))
    den = np.sqrt(np.sum((la - la.mean()) ** 2) * np.sum((lb - lb.mean()) ** 2))
    assert n >= 10
    assert result.value == pytest.approx(num / den, abs=1e-9)


def test_constant_contour_is_flagged_null():
    result = f0_correlation(constant_tone(), constant_tone(freq=180.0))
    assert result.value is None
    assert result.reason == "zero variance"
    assert not bool(result)


def test_unvoiced_input_is_flagged_null():
    rng = np.random.default_rng(0)
    noise = Waveform(0.2 * rng.standard_normal(16000).astype(np.float32), 16000)
    result = f0_correlation(modulated_tone(), noise)
    assert result.value is None
    assert result.reason == "too few jointly voiced frames"


def test_rejects_short_inputs():
    with pytest.raises(ValueError, match="too short"):
        f0_correlation(modulated_tone(seconds=0.3), modulated_tone())


def test_symmetry_and_log_scale_invariance():
    a = modulated_tone(wobble_hz=0.9)
    b = modulated_tone(wobble_hz=1.7, base=200.0)
    r_ab = f0_correlation(a, b).value
    r_ba = f0_correlation(b, a).value
    assert r_ab == pytest.approx(r_ba, abs=1e-12)

    scaled = modulated_tone(wobble_hz=0.9, scale=1.25)
    r_scaled = f0_correlation(a, scaled)
    assert r_scaled.value == pytest.approx(1.0, abs=5e-3)


def test_alignment_handles_different_lengths():
    a = modulated_tone(seconds=1.0)
    b = modulated_tone(seconds=1.5)
    result = f0_correlation(a, b)
    assert result.value is not None
    assert -1.0 <= result.value <= 1.0


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


def test_probe_perfect_when_labels_follow_coordinate():
    rng = np.random.default_rng(1)
    reps = rng.standard_normal((80, 6))
    reps = reps[np.abs(reps[:, 2]) > 0.2]  # leave a margin around the rule
    labels = (reps[:, 2] > 0).astype(int)
    # Guard against pathological imbalance in the draw.
    assert 0.25 <= labels.mean() <= 0.75
    report = probe_leakage(reps, labels, probe_target="speaker", seed=0)
    assert report.test_accuracy == 1.0
    assert report.train_accuracy == 1.0
    assert report.chance == 0.5


def test_probe_chance_when_labels_permuted():
    rng = np.random.default_rng(2)
    reps = rng.standard_normal((400, 8))
    labels = np.repeat(np.arange(4), 100)
    labels = rng.permutation(labels)
    report = probe_leakage(reps, labels, probe_target="speaker", seed=0)
    assert abs(report.test_accuracy - report.chance) <= 0.10
    assert report.chance == 0.25


def test_probe_pools_frame_representations():
    rng = np.random.default_rng(3)
    means = np.array([[-2.0, 0.0], [2.0, 0.0]])
    labels = np.repeat([0, 1], 20)
    reps = np.stack(
        [means[lab] + 0.1 * rng.standard_normal((7, 2)) for lab in labels]
    )  # (40, 7, 2)
    report = probe_leakage(reps, labels, seed=0)
    assert report.test_accuracy == 1.0


def test_probe_rejects_imbalance():
    rng = np.random.default_rng(4)
    reps = rng.standard_normal((121, 4))
    labels = np.array([0] * 111 + [1] * 10)
    with pytest.raises(ValueError, match="imbalance"):
        probe_leakage(reps, labels)
    # Exactly 10:1 is still acceptable.
    probe_leakage(rng.standard_normal((110, 4)), np.array([0] * 100 + [1] * 10))


def test_probe_reproducible():
    rng = np.random.default_rng(5)
    reps = rng.standard_normal((60, 5))
    labels = rng.integers(0, 3, size=60)
    a = probe_leakage(reps, labels, seed=7)
    b = probe_leakage(reps, labels, seed=7)
    assert a == b


# ---------------------------------------------------------------------------
# similarity metrics
# ---------------------------------------------------------------------------


def test_speaker_similarity_special_cases():
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert speaker_similarity(q, q) == pytest.approx(1.0, abs=1e-9)
    orth = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert speaker_similarity(q, orth) == pytest.approx(0.0, abs=1e-9)
    assert cosine_similarity(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(
        -1.0, abs=1e-9
    )


def test_mel_distance_properties():
    a = modulated_tone()
    b = modulated_tone(base=220.0)
    assert mel_distance(a, a) == 0.0
    d_ab = mel_distance(a, b)
    d_ba = mel_distance(b, a)
    assert d_ab == pytest.approx(d_ba, abs=1e-12)
    assert d_ab > 0


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def test_write_report_roundtrip(tmp_path):
    entries = [
        MetricEntry(metric="f0_correlation", value=0.91, n=50, seed=0, checkpoint="abc123"),
        MetricEntry(metric="speaker_probe_qt", value=None, n=0, seed=0, checkpoint="abc123"),
    ]
    path = tmp_path / "report.json"
    report = write_report(path, entries, extra={"corpus": "synthetic"})
    back = json.loads(path.read_text())
    assert back == report
    assert back["metrics"][0]["metric"] == "f0_correlation"
    assert back["metrics"][1]["value"] is None
    assert back["corpus"] == "synthetic"
