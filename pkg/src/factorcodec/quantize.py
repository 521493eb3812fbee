"""Finite scalar quantization, residual FSQ, and gradient reversal.

FSQ quantizes each latent dimension independently: a bounded projection
squashes the dimension into a fixed interval, which is then rounded to a
small grid of levels. The codebook is implicit (the product grid), so no
codebook learning or usage balancing is needed. Gradients pass through the
rounding via the straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

_BOUND_EPS = 1e-3


@dataclass(frozen=True)
class FsqConfig:
    """Per-dimension level counts for one FSQ layer.

    The implicit codebook size is the product of the level counts.
    """

    levels: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("FSQ needs at least one dimension")
        if any(l < 2 for l in self.levels):
            raise ValueError(f"every level count must be >= 2, got {self.levels}")
        # normalize lists to tuples so configs stay hashable
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        size = 1
        for l in self.levels:
            size *= l
        return size

    def grid_values(self, d: int) -> Tensor:
        """All quantized values dimension ``d`` can take, ascending."""
        l = self.levels[d]
        return (torch.arange(l, dtype=torch.float32) - l // 2) / (l // 2)


@dataclass
class QuantizerOutput:
    """Codes and quantized embeddings from one FSQ layer.

    codes: integer indices into the implicit codebook, shape (B, L).
    embeddings: quantized values on the per-dimension grids, shape (B, L, D).
    Gradients w.r.t. the pre-quantization latent flow through ``embeddings``
    via the straight-through estimator.
    """

    codes: Tensor
    embeddings: Tensor


def codebook_size(cfg: FsqConfig) -> int:
    """Number of distinct codes: the product of the per-dimension levels."""
    return cfg.codebook_size


def _levels_tensor(cfg: FsqConfig, like: Tensor | None = None) -> Tensor:
    t = torch.tensor(cfg.levels, dtype=torch.float32)
    if like is not None:
        t = t.to(like.device)
    return t


def fsq_project(latent: Tensor, cfg: FsqConfig) -> Tensor:
    """Bounded projection: squash each dimension onto its grid's span.

    tanh-based, odd around the grid center; even level counts get the
    standard half-step offset so rounding yields exactly ``levels`` values.
    The output lives in the open interval spanned by the grid, normalized
    by floor(levels / 2) like the quantized embeddings.
    """
    if latent.shape[-1] != cfg.dim:
        raise ValueError(
            f"latent has {latent.shape[-1]} dims, config expects {cfg.dim}"
        )
    levels = _levels_tensor(cfg, latent)
    # (1 + eps) keeps the atanh shift finite for even level counts and lets
    # saturated inputs round onto the outermost grid points
    half_l = (levels - 1) * (1 + _BOUND_EPS) / 2
    offset = torch.where(levels % 2 == 0, 0.5, 0.0)
    shift = torch.atanh(offset / half_l)
    bounded = torch.tanh(latent + shift) * half_l - offset
    half_width = torch.div(levels, 2, rounding_mode="floor")
    return bounded / half_width


def fsq_quantize(latent: Tensor, cfg: FsqConfig) -> QuantizerOutput:
    """Quantize a latent (..., D) onto the FSQ grid with straight-through grads.

    Forward: bounded projection then per-dimension rounding to the nearest
    grid value. Backward: rounding is treated as identity, so the gradient
    equals that of :func:`fsq_project`.
    """
    projected = fsq_project(latent, cfg)
    levels = _levels_tensor(cfg, latent)
    half_width = torch.div(levels, 2, rounding_mode="floor")
    rounded = torch.round(projected * half_width) / half_width
    embeddings = projected + (rounded - projected).detach()
    codes = embeddings_to_codes(embeddings.detach(), cfg)
    return QuantizerOutput(codes=codes, embeddings=embeddings)


def residual_fsq_quantize(
    latent: Tensor, cfg1: FsqConfig, cfg2: FsqConfig
) -> tuple[QuantizerOutput, QuantizerOutput, Tensor]:
    """Two-layer residual FSQ.

    The first layer quantizes the latent; the second quantizes what the
    first missed. The fused representation is the sum of both layers'
    embeddings, so it refines the first layer's approximation.
    """
    if cfg1.dim != cfg2.dim:
        raise ValueError(
            f"residual FSQ layers must share a dimension, got {cfg1.dim} and {cfg2.dim}"
        )
    out1 = fsq_quantize(latent, cfg1)
    out2 = fsq_quantize(latent - out1.embeddings, cfg2)
    fused = out1.embeddings + out2.embeddings
    return out1, out2, fused


def embeddings_to_codes(embeddings: Tensor, cfg: FsqConfig) -> Tensor:
    """Pack per-dimension grid positions (..., D) into integer codes (...)."""
    levels = _levels_tensor(cfg, embeddings)
    half_width = torch.div(levels, 2, rounding_mode="floor")
    digits = torch.round(embeddings * half_width + half_width).long()
    basis = torch.ones(cfg.dim, dtype=torch.long, device=embeddings.device)
    for d in range(1, cfg.dim):
        basis[d] = basis[d - 1] * cfg.levels[d - 1]
    return (digits * basis).sum(dim=-1)


def codes_to_embeddings(codes: Tensor, cfg: FsqConfig) -> Tensor:
    """Unpack integer codes (...) back to grid embeddings (..., D)."""
    if codes.numel() > 0 and (codes.min() < 0 or codes.max() >= cfg.codebook_size):
        raise ValueError(
            f"codes must lie in [0, {cfg.codebook_size}), got "
            f"[{int(codes.min())}, {int(codes.max())}]"
        )
    digits = []
    rest = codes.long()
    for l in cfg.levels:
        digits.append(rest % l)
        rest = torch.div(rest, l, rounding_mode="floor")
    stacked = torch.stack(digits, dim=-1).float()
    levels = _levels_tensor(cfg, stacked)
    half_width = torch.div(levels, 2, rounding_mode="floor")
    return (stacked - half_width) / half_width


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: Tensor, lam: float) -> Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity in the forward pass; gradient scaled by ``-lam`` backward.

    Placing this in front of an auxiliary classifier trains the classifier
    normally while pushing the upstream representation to *defeat* it.
    """
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    return _GradReverse.apply(x, lam)
