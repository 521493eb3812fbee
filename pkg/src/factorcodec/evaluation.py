"""Desk-scale evaluation: F0 correlation, linear-probe leakage, timbre
similarity, and mel distance, with JSON reporting.

External judge models (ASR word error, MOS predictors, speaker-verification
networks) are deliberately out of scope; `speaker_similarity` substitutes
the codec's own timbre embedding, and probes are plain logistic regressions
on pooled representations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from .audio import Waveform, extract_f0, mel_spectrogram, resample_waveform

MIN_JOINT_VOICED = 10


@dataclass
class F0CorrelationResult:
    """Pearson correlation of joint-voiced log-F0, or a flagged null."""

    value: float | None
    n_joint: int
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.value is not None


def _aligned_contours(a: Waveform, b: Waveform):
    # F0 analysis runs at the 16 kHz encoder rate; accept any input rate.
    fa = extract_f0(resample_waveform(a, 16000))
    fb = extract_f0(resample_waveform(b, 16000))
    va, vb = fa.values.astype(np.float64), fb.values.astype(np.float64)
    ma, mb = fa.voiced_mask.copy(), fb.voiced_mask.copy()
    if va.size == 0 or vb.size == 0:
        return None
    # Interpolate the longer contour onto the shorter one's frame grid.
    if va.size > vb.size:
        va, ma = _resample_contour(va, ma, vb.size)
    elif vb.size > va.size:
        vb, mb = _resample_contour(vb, mb, va.size)
    return va, ma, vb, mb


def _resample_contour(values: np.ndarray, mask: np.ndarray, n: int):
    src = np.linspace(0.0, 1.0, values.size)
    dst = np.linspace(0.0, 1.0, n)
    out = np.interp(dst, src, values)
    # A destination frame is voiced if its nearest source frame was.
    nearest = np.clip(np.round(dst * (values.size - 1)).astype(int), 0, values.size - 1)
    return out, mask[nearest]


def f0_correlation(a: Waveform, b: Waveform) -> F0CorrelationResult:
    """Pearson correlation of log-F0 over frames voiced in both signals."""
    for name, wav in (("first", a), ("second", b)):
        if wav.duration_s < 0.5:
            raise ValueError(f"{name} input too short for F0 correlation (< 0.5 s)")
    aligned = _aligned_contours(a, b)
    if aligned is None:
        return F0CorrelationResult(value=None, n_joint=0, reason="empty contour")
    va, ma, vb, mb = aligned
    joint = ma & mb & (va > 0) & (vb > 0)
    n = int(joint.sum())
    if n < MIN_JOINT_VOICED:
        return F0CorrelationResult(value=None, n_joint=n, reason="too few jointly voiced frames")
    la, lb = np.log(va[joint]), np.log(vb[joint])
    # Flat contours carry no usable variance; extraction jitter on a pure
    # tone is far below this threshold while real prosody sits far above.
    if np.std(la) < 1e-4 or np.std(lb) < 1e-4:
        return F0CorrelationResult(value=None, n_joint=n, reason="zero variance")
    r = float(np.corrcoef(la, lb)[0, 1])
    return F0CorrelationResult(value=r, n_joint=n)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    target: str
    representation: str
    train_accuracy: float
    test_accuracy: float
    chance: float
    num_classes: int
    n_train: int
    n_test: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def probe_leakage(
    representations: np.ndarray,
    labels: np.ndarray,
    probe_target: str = "speaker",
    representation_name: str = "",
    seed: int = 0,
) -> ProbeReport:
    """Linear-probe accuracy of `labels` from pooled representations.

    representations: (N, D) pooled, or (N, L, D) frame-level (mean-pooled).
    Train on a stratified 80% split, report held-out accuracy.
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim == 3:
        reps = reps.mean(axis=1)
    if reps.ndim != 2:
        raise ValueError(f"representations must be (N, D) or (N, L, D), got {reps.shape}")
    labels = np.asarray(labels)
    if labels.shape[0] != reps.shape[0]:
        raise ValueError("one label per representation required")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ValueError("probing needs at least two classes")
    if counts.max() > 10 * counts.min():
        raise ValueError(
            f"class imbalance beyond 10:1 rejected ({counts.max()}:{counts.min()})"
        )
    x_train, x_test, y_train, y_test = train_test_split(
        reps, labels, test_size=0.2, random_state=seed, stratify=labels
    )
    # Weak regularization: the probe should extract whatever is linearly
    # present; the held-out split is what guards against overfitting claims.
    probe = LogisticRegression(max_iter=2000, C=100.0, random_state=seed)
    probe.fit(x_train, y_train)
    return ProbeReport(
        target=probe_target,
        representation=representation_name,
        train_accuracy=float(probe.score(x_train, y_train)),
        test_accuracy=float(probe.score(x_test, y_test)),
        chance=1.0 / classes.size,
        num_classes=int(classes.size),
        n_train=int(len(y_train)),
        n_test=int(len(y_test)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# scalar similarity metrics
# ---------------------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = (np.linalg.norm(a) + 1e-12) * (np.linalg.norm(b) + 1e-12)
    return float(np.dot(a, b) / denom)


def timbre_embedding(q_t) -> np.ndarray:
    """Utterance-level timbre vector: mean over the 48 timbre tokens."""
    arr = np.asarray(q_t.detach().cpu().numpy() if hasattr(q_t, "detach") else q_t)
    if arr.ndim != 2:
        raise ValueError("q_t must be (num_queries, dim)")
    return arr.mean(axis=0)


def speaker_similarity(q_t_a, q_t_b) -> float:
    """Cosine similarity of pooled timbre tokens (internal proxy metric)."""
    return cosine_similarity(timbre_embedding(q_t_a), timbre_embedding(q_t_b))


def mel_distance(a: Waveform, b: Waveform) -> float:
    """Mean absolute log-mel difference at 16 kHz analysis, trimmed to the
    shorter signal."""
    ma = mel_spectrogram(resample_waveform(a, 16000)).frames
    mb = mel_spectrogram(resample_waveform(b, 16000)).frames
    n = min(ma.shape[0], mb.shape[0])
    if n == 0:
        raise ValueError("signals too short for mel analysis")
    return float(np.mean(np.abs(ma[:n].astype(np.float64) - mb[:n].astype(np.float64))))


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class MetricEntry:
    metric: str
    value: float | None
    n: int
    seed: int
    checkpoint: str

    def to_dict(self) -> dict:
        return asdict(self)


def write_report(path: str | Path, entries: list[MetricEntry], extra: dict | None = None) -> dict:
    """Serialize metric entries as a JSON evaluation report."""
    report = {"metrics": [e.to_dict() for e in entries]}
    if extra:
        report.update(extra)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
