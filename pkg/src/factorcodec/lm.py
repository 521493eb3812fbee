"""Text-to-codec autoregressive language model.

Sequences are laid out as [S, text tokens, T, codec tokens, E]: the model
reads BPE-encoded text, then predicts the 50 Hz fused codec stream. The
loss is masked so only codec tokens and the terminator are supervised;
the text is conditioning context. Generation continues a prompt's codec
tokens for new text, with sampling constrained to codec ids and E.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoints import load_checkpoint, save_checkpoint


# ---------------------------------------------------------------------------
# byte-pair text tokenizer
# ---------------------------------------------------------------------------


@dataclass
class TextTokenizer:
    """Deterministic character-level BPE learned from a transcript corpus."""

    vocab: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def size(self) -> int:
        return len(self.vocab)

    def _apply_merges(self, symbols: list[str]) -> list[str]:
        for pair in self.merges:
            merged = pair[0] + pair[1]
            out: list[str] = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return symbols

    def encode(self, text: str) -> list[int]:
        for ch in text:
            if ch not in self.token_to_id:
                raise ValueError(f"character {ch!r} not in tokenizer alphabet")
        return [self.token_to_id[s] for s in self._apply_merges(list(text))]

    def decode(self, ids: list[int]) -> str:
        return "".join(self.vocab[i] for i in ids)

    def save(self, path: str | Path) -> None:
        payload = {"vocab": self.vocab, "merges": [list(p) for p in self.merges]}
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=0))

    @classmethod
    def load(cls, path: str | Path) -> "TextTokenizer":
        payload = json.loads(Path(path).read_text())
        return cls(
            vocab=list(payload["vocab"]),
            merges=[tuple(p) for p in payload["merges"]],
        )


def build_text_tokenizer(transcripts: list[str], vocab_size: int = 256) -> TextTokenizer:
    """Learn BPE merges greedily: most frequent adjacent pair wins, ties
    broken lexicographically, stopping when no pair repeats or the target
    vocabulary size is reached."""
    if not transcripts or all(t == "" for t in transcripts):
        raise ValueError("cannot build a tokenizer from an empty corpus")
    alphabet = sorted({ch for t in transcripts for ch in t})
    vocab = list(alphabet)
    merges: list[tuple[str, str]] = []
    sequences = [list(t) for t in transcripts if t]
    while len(vocab) < vocab_size:
        counts: dict[tuple[str, str], int] = {}
        for seq in sequences:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merged = pair[0] + pair[1]
        vocab.append(merged)
        merges.append(pair)
        for si, seq in enumerate(sequences):
            out: list[str] = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            sequences[si] = out
    return TextTokenizer(vocab=vocab, merges=merges)


# ---------------------------------------------------------------------------
# vocabulary with disjoint text / codec / special ranges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    text_size: int
    codec_size: int

    @property
    def size(self) -> int:
        return self.text_size + self.codec_size + 3

    @property
    def start_id(self) -> int:  # S
        return self.text_size + self.codec_size

    @property
    def turn_id(self) -> int:  # T
        return self.text_size + self.codec_size + 1

    @property
    def end_id(self) -> int:  # E
        return self.text_size + self.codec_size + 2

    def codec_to_lm(self, codes: np.ndarray | Tensor) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.size and (codes.min() < 0 or codes.max() >= self.codec_size):
            raise ValueError(
                f"codec codes must lie in [0, {self.codec_size}), got "
                f"[{codes.min()}, {codes.max()}]"
            )
        return codes + self.text_size

    def lm_to_codec(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < self.text_size or ids.max() >= self.start_id):
            raise ValueError("ids outside the codec range")
        return ids - self.text_size

    def is_codec(self, token_id: int) -> bool:
        return self.text_size <= token_id < self.text_size + self.codec_size


@dataclass
class LmSequence:
    ids: np.ndarray  # int64 (N,)
    loss_mask: np.ndarray  # bool (N,); True where the NEXT token is supervised

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if self.ids.shape != self.loss_mask.shape:
            raise ValueError("ids and loss_mask must have the same length")


def build_training_sequence(
    text_ids: list[int] | np.ndarray,
    z_cp: list[int] | np.ndarray,
    vocab: Vocab,
    context_len: int | None = None,
) -> LmSequence:
    """[S, text, T, codec, E]; mask marks positions predicting codec or E."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    z_cp = np.asarray(z_cp, dtype=np.int64)
    if text_ids.size == 0 or z_cp.size == 0:
        raise ValueError("both text and codec streams must be non-empty")
    if text_ids.size and text_ids.max() >= vocab.text_size:
        raise ValueError("text ids exceed the text vocabulary")
    ids = np.concatenate(
        [
            [vocab.start_id],
            text_ids,
            [vocab.turn_id],
            vocab.codec_to_lm(z_cp),
            [vocab.end_id],
        ]
    ).astype(np.int64)
    if context_len is not None and ids.size > context_len:
        raise ValueError(f"sequence length {ids.size} exceeds context {context_len}")
    mask = np.zeros(ids.size, dtype=bool)
    # Position i predicts ids[i+1]; supervise where the target is codec or E.
    targets = ids[1:]
    is_codec = (targets >= vocab.text_size) & (targets < vocab.start_id)
    mask[:-1] = is_codec | (targets == vocab.end_id)
    return LmSequence(ids=ids, loss_mask=mask)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    layers: int = 4
    width: int = 256
    heads: int = 4
    context_len: int = 512
    temperature: float = 0.8
    top_k: int = 50
    top_p: float = 1.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)


class _LmBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )

    def forward(self, h: Tensor, causal_mask: Tensor) -> Tensor:
        x = self.norm1(h)
        h = h + self.attn(x, x, x, attn_mask=causal_mask, need_weights=False)[0]
        return h + self.mlp(self.norm2(h))


class CodeLm(nn.Module):
    """Decoder-only transformer over the joint text+codec vocabulary."""

    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.width)
        self.pos_embed = nn.Embedding(config.context_len, config.width)
        self.blocks = nn.ModuleList(
            _LmBlock(config.width, config.heads) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, config.vocab_size)

    def forward(self, ids: Tensor) -> Tensor:
        if ids.ndim == 1:
            ids = ids[None]
        n = ids.shape[1]
        if n > self.config.context_len:
            raise ValueError(f"sequence length {n} exceeds context {self.config.context_len}")
        h = self.token_embed(ids) + self.pos_embed(torch.arange(n, device=ids.device))[None]
        causal = torch.triu(torch.ones(n, n, dtype=torch.bool, device=ids.device), diagonal=1)
        for block in self.blocks:
            h = block(h, causal)
        return self.head(self.norm(h))


def batch_sequences(seqs: list[LmSequence], pad_id: int) -> tuple[Tensor, Tensor]:
    """Right-pad to the longest sequence; padding is never supervised."""
    n = max(s.ids.size for s in seqs)
    ids = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), n), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : s.ids.size] = torch.from_numpy(s.ids)
        mask[i, : s.loss_mask.size] = torch.from_numpy(s.loss_mask)
    return ids, mask


def lm_loss(model: CodeLm, seqs: list[LmSequence] | LmSequence, vocab: Vocab) -> Tensor:
    """Masked mean cross-entropy of next-token predictions."""
    if isinstance(seqs, LmSequence):
        seqs = [seqs]
    ids, mask = batch_sequences(seqs, pad_id=vocab.end_id)
    logits = model(ids)
    pred = logits[:, :-1]
    target = ids[:, 1:]
    keep = mask[:, :-1]
    if not bool(keep.any()):
        raise ValueError("no supervised positions in batch")
    losses = F.cross_entropy(
        pred.reshape(-1, pred.shape[-1]), target.reshape(-1), reduction="none"
    ).reshape(target.shape)
    return (losses * keep).sum() / keep.sum()


# ---------------------------------------------------------------------------
# sampling / generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.8
    top_k: int = 50
    top_p: float = 1.0
    seed: int = 0


def constrain_to_codec(logits: Tensor, vocab: Vocab) -> Tensor:
    """Zero probability everywhere except codec ids and E."""
    out = logits.clone()
    out[..., : vocab.text_size] = float("-inf")
    out[..., vocab.start_id] = float("-inf")
    out[..., vocab.turn_id] = float("-inf")
    return out


def sample_token(logits: Tensor, params: SamplingParams, generator: torch.Generator) -> int:
    """One next-token draw from (V,) logits; temperature 0 is greedy."""
    if params.temperature == 0.0:
        return int(torch.argmax(logits))
    scaled = logits / params.temperature
    if params.top_k > 0 and params.top_k < scaled.shape[-1]:
        kth = torch.topk(scaled, params.top_k).values[-1]
        scaled = torch.where(scaled < kth, torch.full_like(scaled, float("-inf")), scaled)
    if params.top_p < 1.0:
        sorted_logits, order = torch.sort(scaled, descending=True)
        probs = torch.softmax(sorted_logits, dim=-1)
        cum = torch.cumsum(probs, dim=-1)
        cut = cum - probs >= params.top_p  # keep tokens until mass reached
        sorted_logits[cut] = float("-inf")
        scaled = torch.full_like(scaled, float("-inf"))
        scaled[order] = sorted_logits
    probs = torch.softmax(scaled, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


@dataclass
class GenerationResult:
    codes: np.ndarray  # codec-range codes (decoder alphabet, not LM ids)
    stopped_by_end: bool
    truncated: bool
    num_generated: int


def generate_continuation(
    model: CodeLm,
    vocab: Vocab,
    prompt_text_ids: list[int] | np.ndarray,
    target_text_ids: list[int] | np.ndarray,
    prompt_codes: list[int] | np.ndarray,
    params: SamplingParams = SamplingParams(),
    max_new_tokens: int | None = None,
) -> GenerationResult:
    """Continue [S, prompt text, target text, T, prompt codes] with new codes.

    Sampling is constrained to codec ids and E; generation stops at E or at
    the guard ``20 * len(target_text_ids) + 50``, reporting truncation.
    """
    prompt_text_ids = np.asarray(prompt_text_ids, dtype=np.int64)
    target_text_ids = np.asarray(target_text_ids, dtype=np.int64)
    prompt_codes = np.asarray(prompt_codes, dtype=np.int64)
    if max_new_tokens is None:
        max_new_tokens = 20 * int(target_text_ids.size) + 50

    prefix = np.concatenate(
        [
            [vocab.start_id],
            prompt_text_ids,
            target_text_ids,
            [vocab.turn_id],
            vocab.codec_to_lm(prompt_codes) if prompt_codes.size else np.empty(0, np.int64),
        ]
    ).astype(np.int64)
    if prefix.size + max_new_tokens > model.config.context_len:
        max_new_tokens = model.config.context_len - prefix.size
        if max_new_tokens <= 0:
            raise ValueError("prompt alone exceeds the model context")

    generator = torch.Generator().manual_seed(params.seed)
    ids = torch.from_numpy(prefix)[None]
    generated: list[int] = []
    stopped = False
    model.eval()
    with torch.no_grad():
        for _ in range(max_new_tokens):
            logits = model(ids)[0, -1]
            logits = constrain_to_codec(logits, vocab)
            token = sample_token(logits, params, generator)
            if token == vocab.end_id:
                stopped = True
                break
            generated.append(token)
            ids = torch.cat([ids, torch.tensor([[token]])], dim=1)
    codes = vocab.lm_to_codec(np.asarray(generated, dtype=np.int64)) if generated else np.empty(
        0, np.int64
    )
    return GenerationResult(
        codes=codes,
        stopped_by_end=stopped,
        truncated=not stopped,
        num_generated=len(generated),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LmTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 100
    checkpoint_every: int = 1000
    seed: int = 0


def train_lm(
    sequences: list[LmSequence],
    vocab: Vocab,
    out_dir: str | Path,
    model_config: LmConfig | None = None,
    train_config: LmTrainConfig = LmTrainConfig(),
) -> CodeLm:
    if not sequences:
        raise ValueError("no training sequences")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    longest = max(s.ids.size for s in sequences)
    if model_config is None:
        model_config = LmConfig(vocab_size=vocab.size, context_len=max(512, longest))
    if model_config.context_len < longest:
        raise ValueError(
            f"context {model_config.context_len} shorter than longest sequence {longest}"
        )

    torch.manual_seed(train_config.seed)
    model = CodeLm(model_config)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.lr, betas=(train_config.beta1, train_config.beta2)
    )

    with open(out_dir / "lm_losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])
        model.train()
        for step in range(train_config.steps):
            lr_scale = min(1.0, (step + 1) / max(train_config.warmup_steps, 1))
            for group in optimizer.param_groups:
                group["lr"] = train_config.lr * lr_scale
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(train_config.seed, step)))
            idx = rng.integers(0, len(sequences), size=train_config.batch_size)
            batch = [sequences[int(i)] for i in idx]
            loss = lm_loss(model, batch, vocab)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite LM loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            writer.writerow([step, "ce", f"{value:.6g}"])
            fh.flush()

            done = step + 1
            if done % train_config.checkpoint_every == 0 or done == train_config.steps:
                save_checkpoint(
                    out_dir / f"lm_step{done}.pt",
                    kind="lm",
                    config={
                        "lm": model_config.to_dict(),
                        "vocab": {"text_size": vocab.text_size, "codec_size": vocab.codec_size},
                    },
                    model=model,
                    optimizer=optimizer,
                    step=done,
                )

    digest = save_checkpoint(
        out_dir / "lm_final.pt",
        kind="lm",
        config={
            "lm": model_config.to_dict(),
            "vocab": {"text_size": vocab.text_size, "codec_size": vocab.codec_size},
        },
        model=model,
        optimizer=optimizer,
        step=train_config.steps,
    )
    (out_dir / "lm_final.hash").write_text(digest + "\n")
    model.eval()
    return model


def load_lm(path: str | Path) -> tuple[CodeLm, Vocab]:
    payload = load_checkpoint(path, expected_kind="lm")
    model = CodeLm(LmConfig.from_dict(payload["config"]["lm"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    vocab = Vocab(**payload["config"]["vocab"])
    return model, vocab
