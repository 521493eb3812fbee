"""Oracle and gradient tests for every training objective.

The disentanglement terms are checked three ways: hand-computable special
cases, scalar triple-loop oracles on random batches, and central finite
differences against autograd.
"""

import math

import numpy as np
import pytest
import torch

from factorcodec.audio import mel_filterbank
from factorcodec.losses import (
    ProjectionHeads,
    Stage1LossWeights,
    correlation_loss,
    discriminator_loss,
    f0_regression_loss,
    feature_matching_loss,
    gan_losses,
    generator_adversarial_loss,
    log_f0_loss,
    multiscale_mel_loss,
    phone_ce_loss,
    soft_orthogonality_frame,
    soft_orthogonality_global,
    speaker_ce_loss,
    timbre_pool,
    waveform_loss,
)

torch.manual_seed(0)

# ---------------------------------------------------------------------------
# scalar oracles (pure python / numpy float64)
# ---------------------------------------------------------------------------

EPS = 1e-8


def oracle_cos(a, b):
    num = float(np.dot(a, b))
    return num / ((float(np.linalg.norm(a)) + EPS) * (float(np.linalg.norm(b)) + EPS))


def oracle_correlation(q1, q2, alpha):
    vals = []
    for b in range(q1.shape[0]):
        for l in range(q1.shape[1]):
            vals.append(oracle_cos(q1[b, l], q2[b, l]))
    return (sum(vals) / len(vals) - alpha) ** 2


def oracle_soft_frame(lp, lc, beta):
    vals = []
    for b in range(lp.shape[0]):
        for l in range(lp.shape[1]):
            vals.append(abs(oracle_cos(lp[b, l], lc[b, l])))
    return (sum(vals) / len(vals) - beta) ** 2


def oracle_soft_global(lp, tv, beta):
    vals = []
    for b in range(lp.shape[0]):
        for l in range(lp.shape[1]):
            vals.append(abs(oracle_cos(lp[b, l], tv[b])))
    return (sum(vals) / len(vals) - beta) ** 2


def fd_gradient(fn, x: torch.Tensor, h=1e-4) -> torch.Tensor:
    """Central finite differences, element by element."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        grad.view(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_grad_error(fn, x: torch.Tensor) -> float:
    x = x.detach().clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(x), x)
    fd = fd_gradient(fn, x.detach().clone())
    return (auto - fd).norm().item() / max(auto.norm().item(), fd.norm().item(), 1e-12)


# ---------------------------------------------------------------------------
# Eq-style disentanglement terms
# ---------------------------------------------------------------------------


def test_correlation_identical_and_orthogonal():
    q = torch.randn(2, 5, 4, dtype=torch.float64)
    assert correlation_loss(q, q).item() == pytest.approx((1 - 0.2) ** 2, abs=1e-6)
    a = torch.zeros(2, 5, 4, dtype=torch.float64)
    b = torch.zeros(2, 5, 4, dtype=torch.float64)
    a[..., 0] = 1.0
    b[..., 1] = 1.0
    assert correlation_loss(a, b).item() == pytest.approx(0.2**2, abs=1e-6)


def test_soft_frame_special_cases():
    l = torch.randn(3, 4, 6, dtype=torch.float64)
    assert soft_orthogonality_frame(l, l).item() == pytest.approx(0.9801, abs=1e-6)
    assert soft_orthogonality_frame(l, -l).item() == pytest.approx(0.9801, abs=1e-6)
    a = torch.zeros(2, 3, 4, dtype=torch.float64)
    b = torch.zeros(2, 3, 4, dtype=torch.float64)
    a[..., 0] = 2.0
    b[..., 1] = 3.0
    assert soft_orthogonality_frame(a, b).item() == pytest.approx(1e-4, abs=1e-12)


def test_soft_global_special_cases():
    lp = torch.zeros(2, 3, 4, dtype=torch.float64)
    tv = torch.zeros(2, 4, dtype=torch.float64)
    lp[..., 0] = 1.0
    tv[:, 1] = 1.0
    assert soft_orthogonality_global(lp, tv).item() == pytest.approx(1e-8, abs=1e-14)
    tv2 = torch.zeros(2, 4, dtype=torch.float64)
    tv2[:, 0] = 5.0
    assert soft_orthogonality_global(lp, tv2).item() == pytest.approx(
        (1 - 0.0001) ** 2, abs=1e-7
    )


@pytest.mark.parametrize("trial", range(10))
def test_disentanglement_losses_match_loop_oracles(trial):
    rng = np.random.default_rng(trial)
    B, L, D = rng.integers(1, 5), rng.integers(1, 17), rng.integers(2, 9)
    q1 = rng.normal(size=(B, L, D))
    q2 = rng.normal(size=(B, L, D))
    tv = rng.normal(size=(B, D))
    t1, t2, tt = (torch.from_numpy(a) for a in (q1, q2, tv))
    assert correlation_loss(t1, t2).item() == pytest.approx(
        oracle_correlation(q1, q2, 0.2), abs=1e-6
    )
    assert soft_orthogonality_frame(t1, t2).item() == pytest.approx(
        oracle_soft_frame(q1, q2, 0.01), abs=1e-6
    )
    assert soft_orthogonality_global(t1, tt).item() == pytest.approx(
        oracle_soft_global(q1, tv, 0.0001), abs=1e-6
    )


def test_losses_invariant_to_per_frame_positive_rescaling():
    rng = np.random.default_rng(3)
    q1 = torch.from_numpy(rng.normal(size=(2, 6, 5)))
    q2 = torch.from_numpy(rng.normal(size=(2, 6, 5)))
    tv = torch.from_numpy(rng.normal(size=(2, 5)))
    scale = torch.from_numpy(rng.uniform(0.2, 5.0, size=(2, 6, 1)))
    assert correlation_loss(q1 * scale, q2).item() == pytest.approx(
        correlation_loss(q1, q2).item(), abs=1e-6
    )
    assert soft_orthogonality_frame(q1 * scale, q2).item() == pytest.approx(
        soft_orthogonality_frame(q1, q2).item(), abs=1e-6
    )
    assert soft_orthogonality_global(q1 * scale, tv).item() == pytest.approx(
        soft_orthogonality_global(q1, tv).item(), abs=1e-6
    )


def test_disentanglement_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    q2 = torch.from_numpy(rng.normal(size=(2, 4, 5)))
    tv = torch.from_numpy(rng.normal(size=(2, 5)))
    x0 = torch.from_numpy(rng.normal(size=(2, 4, 5)))
    assert rel_grad_error(lambda x: correlation_loss(x, q2), x0) < 1e-3
    assert rel_grad_error(lambda x: soft_orthogonality_frame(x, q2), x0) < 1e-3
    assert rel_grad_error(lambda x: soft_orthogonality_global(x, tv), x0) < 1e-3


def test_shape_mismatches_raise():
    with pytest.raises(ValueError):
        correlation_loss(torch.randn(2, 3, 4), torch.randn(2, 3, 5))
    with pytest.raises(ValueError):
        soft_orthogonality_global(torch.randn(2, 3, 4), torch.randn(3, 4))


# ---------------------------------------------------------------------------
# supervision heads
# ---------------------------------------------------------------------------


def test_phone_ce_uniform_and_confident():
    B, L, K = 2, 7, 11
    uniform = torch.zeros(B, L, K)
    labels = torch.randint(0, K, (B, L))
    assert phone_ce_loss(uniform, labels).item() == pytest.approx(math.log(K), abs=1e-6)
    confident = torch.full((B, L, K), -50.0)
    confident.scatter_(2, labels[..., None], 50.0)
    assert phone_ce_loss(confident, labels).item() < 1e-6
    with pytest.raises(ValueError):
        phone_ce_loss(torch.zeros(B, L + 1, K), labels)


def test_phone_ce_matches_hand_oracle():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(2, 3, 5))
    labels = rng.integers(0, 5, size=(2, 3))
    total = 0.0
    for b in range(2):
        for l in range(3):
            z = logits[b, l]
            total += -(z[labels[b, l]] - np.log(np.exp(z).sum()))
    expected = total / 6
    got = phone_ce_loss(torch.from_numpy(logits), torch.from_numpy(labels)).item()
    assert got == pytest.approx(expected, abs=1e-6)


def test_f0_regression_masked_mean():
    # prediction equal to the per-sample mean-removed contour -> zero loss
    contour = torch.tensor([[5.0, 5.2, 4.9], [5.1, 5.0, 5.3]], dtype=torch.float64)
    pred = contour - contour.mean(dim=1, keepdim=True)
    voiced = torch.ones_like(pred, dtype=torch.bool)
    loss = f0_regression_loss(pred, torch.exp(contour), voiced)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)

    # offset-invariance: scaling every F0 in a sample leaves the target alone
    assert f0_regression_loss(pred, 2.0 * torch.exp(contour), voiced).item() == (
        pytest.approx(0.0, abs=1e-9)
    )

    rng = np.random.default_rng(1)
    pred = torch.from_numpy(rng.normal(0.0, 0.3, size=(2, 4)))
    f0 = torch.from_numpy(rng.uniform(80, 300, size=(2, 4)))
    voiced = torch.from_numpy(rng.random((2, 4)) > 0.4)
    vals = []
    for b in range(2):
        idx = [l for l in range(4) if voiced[b, l]]
        mean = sum(math.log(f0[b, l].item()) for l in idx) / len(idx)
        vals += [
            abs(pred[b, l].item() - (math.log(f0[b, l].item()) - mean)) for l in idx
        ]
    expected = sum(vals) / len(vals)
    assert f0_regression_loss(pred, f0, voiced).item() == pytest.approx(expected, abs=1e-6)


def test_f0_regression_all_unvoiced_is_zero_with_zero_grad():
    pred = torch.randn(2, 4, requires_grad=True)
    loss = f0_regression_loss(pred, torch.full((2, 4), 100.0), torch.zeros(2, 4, dtype=torch.bool))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.all(pred.grad == 0)


def test_log_f0_loss_absolute_target():
    rng = np.random.default_rng(7)
    pred = torch.from_numpy(rng.normal(5.2, 0.3, size=(2, 5)))
    f0 = torch.from_numpy(rng.uniform(80, 300, size=(2, 5)))
    voiced = torch.from_numpy(rng.random((2, 5)) > 0.4)
    vals = [
        abs(pred[b, l].item() - math.log(f0[b, l].item()))
        for b in range(2)
        for l in range(5)
        if voiced[b, l]
    ]
    expected = sum(vals) / len(vals)
    assert log_f0_loss(pred, f0, voiced).item() == pytest.approx(expected, abs=1e-9)

    # exact prediction -> zero; scaling F0 moves the target (no offset trick)
    exact = torch.log(f0)
    assert log_f0_loss(exact, f0, voiced).item() == pytest.approx(0.0, abs=1e-9)
    assert log_f0_loss(exact, 2.0 * f0, voiced).item() == pytest.approx(math.log(2.0), abs=1e-6)

    all_unvoiced = torch.zeros(2, 5, dtype=torch.bool)
    p = torch.randn(2, 5, requires_grad=True)
    loss = log_f0_loss(p, f0, all_unvoiced)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.all(p.grad == 0)
    with pytest.raises(ValueError):
        log_f0_loss(pred, f0[:, :4], voiced)


def test_speaker_ce_and_range_check():
    logits = torch.tensor([[10.0, -10.0], [-10.0, 10.0]])
    assert speaker_ce_loss(logits, torch.tensor([0, 1])).item() < 1e-6
    with pytest.raises(ValueError):
        speaker_ce_loss(logits, torch.tensor([0, 2]))


def test_adversary_gradient_is_exactly_negated():
    torch.manual_seed(4)
    heads = ProjectionHeads(8, 6, 6, num_phones=5, num_speakers=3).double()
    ids = torch.tensor([0, 2])
    for lam in (1.0, 0.7):
        q = torch.randn(2, 9, 6, dtype=torch.float64, requires_grad=True)
        loss = speaker_ce_loss(heads.adversary_logits(q, lam), ids)
        (g_rev,) = torch.autograd.grad(loss, q)

        q2 = q.detach().clone().requires_grad_(True)
        plain = speaker_ce_loss(heads.adversary_head(q2.mean(dim=1)), ids)
        (g_plain,) = torch.autograd.grad(plain, q2)
        assert torch.equal(g_rev, -lam * g_plain)


def test_adversary_lambda_zero_kills_encoder_gradient():
    heads = ProjectionHeads(8, 6, 6, num_phones=5, num_speakers=3)
    q = torch.randn(2, 9, 6, requires_grad=True)
    loss = speaker_ce_loss(heads.adversary_logits(q, 0.0), torch.tensor([1, 2]))
    loss.backward()
    assert torch.all(q.grad == 0)
    # ...but the adversary head itself still learns
    assert heads.adversary_head.weight.grad.abs().sum() > 0


def test_heads_shapes_and_pooling():
    heads = ProjectionHeads(8, 6, 6, num_phones=12, num_speakers=4)
    q_c = torch.randn(2, 10, 8)
    q_p = torch.randn(2, 10, 6)
    q_t = torch.randn(2, 48, 6)
    l_p, l_c = heads.project_pair(q_p, q_c)
    assert l_p.shape == l_c.shape == (2, 10, 6)
    assert heads.phone_logits(q_c).shape == (2, 10, 12)
    assert heads.f0_log_prediction(q_p).shape == (2, 10)
    assert heads.speaker_logits(q_t).shape == (2, 4)
    assert timbre_pool(q_t).shape == (2, 6)
    expected = q_t.mean(dim=1)
    assert torch.allclose(timbre_pool(q_t), expected)


def test_weights_validation():
    Stage1LossWeights()  # defaults fine
    with pytest.raises(ValueError):
        Stage1LossWeights(w_mel=-1.0)
    with pytest.raises(ValueError):
        Stage1LossWeights(w_pho=float("nan"))


# ---------------------------------------------------------------------------
# reconstruction losses
# ---------------------------------------------------------------------------


def numpy_log_mel(x: np.ndarray, n_fft: int, sr: int) -> np.ndarray:
    """Independent log-mel matching centered reflect-padded STFT framing."""
    hop = n_fft // 4
    n_mels = max(5, min(80, n_fft // 8))
    pad = n_fft // 2
    padded = np.pad(x, (pad, pad), mode="reflect")
    num_frames = 1 + (padded.size - n_fft) // hop
    window = np.hanning(n_fft + 1)[:-1]  # periodic hann, as torch uses
    frames = np.stack(
        [padded[i * hop : i * hop + n_fft] * window for i in range(num_frames)]
    )
    mag = np.abs(np.fft.rfft(frames, axis=1)).T
    bank = mel_filterbank(sr, n_fft, n_mels)
    return np.log(np.maximum(bank @ mag, 1e-5))


def test_multiscale_mel_zero_on_identical_and_oracle_on_random():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 0.3, size=1600)
    xt = torch.from_numpy(x)
    scales = (32, 64, 256)
    assert multiscale_mel_loss(xt, xt.clone(), 16000, scales).item() == 0.0

    y = x + rng.normal(0, 0.05, size=1600)
    yt = torch.from_numpy(y)
    expected = sum(
        np.abs(numpy_log_mel(y, s, 16000) - numpy_log_mel(x, s, 16000)).mean()
        for s in scales
    )
    got = multiscale_mel_loss(yt, xt, 16000, scales).item()
    assert got == pytest.approx(expected, abs=1e-5)


def test_multiscale_mel_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    x = torch.from_numpy(rng.normal(0, 0.5, size=96))
    ref = torch.from_numpy(rng.normal(0, 0.5, size=96))
    err = rel_grad_error(lambda z: multiscale_mel_loss(z, ref, 16000, (32, 64)), x)
    assert err < 1e-3


def test_waveform_loss_basics():
    x = torch.linspace(-1, 1, 100, dtype=torch.float64)
    assert waveform_loss(x, x.clone()).item() == 0.0
    assert waveform_loss(x, -x).item() > 0
    with pytest.raises(ValueError):
        waveform_loss(torch.zeros(4000), torch.zeros(1000))


def test_length_tolerance_trims_within_one_hop():
    x = torch.randn(2048 + 100, dtype=torch.float64)
    y = x[:-100]  # within 2048 // 4 samples
    assert multiscale_mel_loss(x, y, 16000).item() == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# GAN losses
# ---------------------------------------------------------------------------


def test_gan_losses_special_cases_and_oracle():
    ones = [torch.ones(2, 5), torch.ones(2, 3)]
    zeros = [torch.zeros(2, 5), torch.zeros(2, 3)]
    assert discriminator_loss(ones, zeros).item() == 0.0
    assert generator_adversarial_loss(ones).item() == 0.0

    feats = [[torch.randn(2, 4), torch.randn(2, 6)], [torch.randn(2, 3)]]
    assert feature_matching_loss(feats, [[f.clone() for f in fl] for fl in feats]).item() == 0.0

    rng = np.random.default_rng(6)
    d_r = [torch.from_numpy(rng.normal(size=(2, 4))) for _ in range(2)]
    d_f = [torch.from_numpy(rng.normal(size=(2, 4))) for _ in range(2)]
    f_r = [[torch.from_numpy(rng.normal(size=(2, 3)))] for _ in range(2)]
    f_f = [[torch.from_numpy(rng.normal(size=(2, 3)))] for _ in range(2)]
    gen, disc, fm = gan_losses(d_r, d_f, f_r, f_f)

    gen_exp = sum(((a.numpy() - 1) ** 2).mean() for a in d_f)
    disc_exp = sum(
        ((r.numpy() - 1) ** 2).mean() + (f.numpy() ** 2).mean() for r, f in zip(d_r, d_f)
    )
    fm_exp = np.mean(
        [np.abs(ff[0].numpy() - fr[0].numpy()).mean() for fr, ff in zip(f_r, f_f)]
    )
    assert gen.item() == pytest.approx(gen_exp, abs=1e-6)
    assert disc.item() == pytest.approx(disc_exp, abs=1e-6)
    assert fm.item() == pytest.approx(fm_exp, abs=1e-6)


def test_gan_losses_detach_protects_generator_from_disc_loss():
    # w stands in for discriminator parameters; fake for generator output
    w = torch.randn((), requires_grad=True)
    fake = torch.randn(2, 5, requires_grad=True)
    d_real = torch.randn(2, 5) * w
    d_fake = fake * w
    gen, disc, _ = gan_losses([d_real], [d_fake], [[d_real]], [[d_fake]])
    assert torch.autograd.grad(disc, fake, retain_graph=True, allow_unused=True)[0] is None
    assert torch.autograd.grad(disc, w, retain_graph=True)[0] is not None
    assert torch.autograd.grad(gen, fake)[0].abs().sum() > 0
