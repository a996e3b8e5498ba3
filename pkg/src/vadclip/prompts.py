"""Class embeddings for the alignment branch.

Labels are tokenized with a byte-level scheme, wrapped in learnable context
tokens and passed through a frozen text encoder. The default encoder is a
seeded, randomly initialised transformer that stands in for a pretrained
one; anything implementing :class:`TextEncoder` can replace it. Class
embeddings are then refined per video by the anomaly-focus visual prompt.
"""

from __future__ import annotations

import math
from typing import Protocol, Sequence

import torch
import torch.nn as nn

from .adapter import masked_softmax, unit_rows

PAD_ID = 0
END_OF_WORD = 257
VOCAB_SIZE = 258
HANDCRAFTED_TEMPLATE = "a video of"
VISUAL_PROMPT_EPS = 1e-8


def tokenize(label: str) -> list[int]:
    """Byte-level tokens for ``label``.

    The label is lower-cased and split on whitespace. Each word becomes its
    UTF-8 bytes shifted by one, followed by an end-of-word token, so a
    multi-word label is the concatenation of its words' sequences.
    """
    words = label.lower().split()
    if not words:
        raise ValueError("cannot tokenize an empty label")
    ids = []
    for w in words:
        ids.extend(b + 1 for b in w.encode("utf-8"))
        ids.append(END_OF_WORD)
    return ids


class TextEncoder(Protocol):
    """What the alignment branch needs from a frozen text encoder."""

    width: int
    out_dim: int
    max_len: int

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor: ...

    def encode(self, tokens: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        """[m, L, width] token embeddings + [m, L] validity -> [m, out_dim].
        Positional embeddings are added inside."""
        ...


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, keep):
        m, L, w = x.shape
        h, dh = self.heads, w // self.heads
        q, k, v = self.qkv(self.ln1(x)).reshape(m, L, 3, h, dh).permute(2, 0, 3, 1, 4)
        attn = masked_softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), keep[:, None, None, :])
        x = x + self.proj((attn @ v).transpose(1, 2).reshape(m, L, w))
        return x + self.mlp(self.ln2(x))


class StubTextEncoder(nn.Module):
    """Seeded 2-layer transformer over token embeddings, mean-pooled and
    projected to ``out_dim``. All parameters are frozen at construction."""

    def __init__(self, out_dim: int, width: int | None = None, layers: int = 2, heads: int = 1,
                 max_len: int = 128, seed: int = 0):
        super().__init__()
        width = width or out_dim
        self.width, self.out_dim, self.max_len, self.seed = width, out_dim, max_len, seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Parameter(torch.randn(VOCAB_SIZE, width) * 0.02)
            self.positional_embedding = nn.Parameter(torch.randn(max_len, width) * 0.01)
            self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(layers))
            self.ln_final = nn.LayerNorm(width)
            self.projection = nn.Parameter(torch.randn(width, out_dim) / math.sqrt(width))
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        # always evaluation mode; there is nothing stochastic in here anyway
        return super().train(False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding[ids]

    def encode(self, tokens: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        L = tokens.shape[1]
        if L > self.max_len:
            raise ValueError(f"prompt of length {L} exceeds encoder max_len {self.max_len}")
        x = tokens + self.positional_embedding[:L]
        for block in self.blocks:
            x = block(x, keep)
        x = self.ln_final(x)
        w = keep.to(x.dtype)[..., None]
        pooled = (x * w).sum(1) / w.sum(1).clamp_min(1.0)
        return pooled @ self.projection


class PromptBank(nn.Module):
    """Learnable context tokens shared by all labels plus per-label class tokens.

    ``mode`` is ``"learnable"`` (context tokens around the class token) or
    ``"handcrafted"`` (a fixed template in front of the class token).
    """

    def __init__(self, labels: Sequence[str], width: int, context_length: int = 20,
                 mode: str = "learnable", seed: int = 0):
        super().__init__()
        if mode not in ("learnable", "handcrafted"):
            raise ValueError(f"unknown prompt mode {mode!r}")
        self.labels = tuple(labels)
        self.mode = mode
        self.context_length = context_length
        self.class_tokens = [tokenize(label) for label in self.labels]
        self.template_tokens = tokenize(HANDCRAFTED_TEMPLATE)
        g = torch.Generator().manual_seed(seed)
        self.context = nn.Parameter(torch.randn(context_length, width, generator=g) * 0.02)

    @property
    def split(self) -> int:
        # odd context lengths put the extra token before the class token
        return math.ceil(self.context_length / 2)

    def sequence(self, index: int, encoder: TextEncoder) -> torch.Tensor:
        """Token embeddings ``[c_1..c_k, t_init, c_k+1..c_l]`` for one label."""
        cls_emb = encoder.embed_tokens(torch.tensor(self.class_tokens[index]))
        if self.mode == "handcrafted":
            tpl = encoder.embed_tokens(torch.tensor(self.template_tokens))
            return torch.cat([tpl, cls_emb]).to(self.context.dtype)
        cls_emb = cls_emb.to(self.context.dtype)
        return torch.cat([self.context[: self.split], cls_emb, self.context[self.split:]])


def build_prompted_sequence(bank: PromptBank, index: int, encoder: TextEncoder) -> torch.Tensor:
    return bank.sequence(index, encoder)


def encode_classes(bank: PromptBank, encoder: TextEncoder) -> torch.Tensor:
    """Encode every label of ``bank``; returns ``t_out`` with one row per label."""
    seqs = [bank.sequence(i, encoder) for i in range(len(bank.labels))]
    L = max(s.shape[0] for s in seqs)
    width = seqs[0].shape[1]
    if width != encoder.width:
        raise ValueError(f"prompt width {width} does not match encoder width {encoder.width}")
    tokens = seqs[0].new_zeros(len(seqs), L, width)
    keep = torch.zeros(len(seqs), L, dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : s.shape[0]] = s
        keep[i, : s.shape[0]] = True
    return encoder.encode(tokens, keep)


def visual_prompt_vector(scores: torch.Tensor, x: torch.Tensor, mask: torch.Tensor | None = None,
                         eps: float = VISUAL_PROMPT_EPS) -> torch.Tensor:
    """Anomaly-weighted mean of frame features, L2-normalised.

    ``scores`` is [n] or [B, n], ``x`` is [n, d] or [B, n, d].
    """
    if mask is not None:
        scores = scores * mask.to(scores.dtype)
    pooled = (scores[..., None] * x).sum(-2) / (scores.sum(-1, keepdim=True) + eps)
    return unit_rows(pooled)


class VisualPrompt(nn.Module):
    """``T = FFN(V + t_out) + t_out`` with FFN = linear(d, 4d), gelu, linear(4d, d)."""

    def __init__(self, d: int):
        super().__init__()
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, v: torch.Tensor, t_out: torch.Tensor) -> torch.Tensor:
        # v: [..., d] broadcast over the class rows of t_out [m, d]
        return self.ffn(v[..., None, :] + t_out) + t_out


def visual_prompt(scores, x, t_out, module: VisualPrompt, mask=None) -> torch.Tensor:
    return module(visual_prompt_vector(scores, x, mask), t_out)


def average_frame_scores(like: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Uniform attention weights, the average-frame baseline for the visual prompt."""
    w = torch.ones_like(like)
    return w if mask is None else w * mask.to(w.dtype)
