"""Local-and-global temporal adapter: windowed self-attention followed by a
two-adjacency graph convolution, each with a residual connection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ZERO_NORM = 1e-12


@dataclass
class AdapterConfig:
    window: int = 64
    overlap: float = 0.5
    heads: int = 1
    sim_threshold: float = 0.7
    sigma: float = 1.0
    use_local: bool = True
    use_gcn: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.sim_threshold < 1.0:
            raise ValueError("sim_threshold must lie in [0, 1)")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")

    @property
    def stride(self) -> int:
        return max(1, round(self.window * (1.0 - self.overlap)))


def window_starts(n: int, window: int, stride: int) -> list[int]:
    """Start frames of the windows covering ``[0, n)``; the last window may run
    past the end and is padded."""
    starts = [0]
    while starts[-1] + window < n:
        starts.append(starts[-1] + stride)
    return starts


def unit_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-normalise; rows with norm below 1e-12 map to zero."""
    norm = x.norm(dim=-1, keepdim=True)
    return torch.where(norm < ZERO_NORM, torch.zeros_like(x), x / norm.clamp_min(ZERO_NORM))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return unit_rows(a) @ unit_rows(b).transpose(-1, -2)


def masked_softmax(scores: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    # rows with nothing kept fall back to uniform so padding never yields NaN
    keep = keep | ~keep.any(dim=-1, keepdim=True)
    return torch.softmax(scores.masked_fill(~keep, float("-inf")), dim=-1)


class LocalAttention(nn.Module):
    """Self-attention restricted to overlapping fixed-length windows.

    Frames covered by several windows receive the mean of their window
    outputs; the result is added back to the input.
    """

    def __init__(self, d: int, window: int = 64, overlap: float = 0.5, heads: int = 1):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.window = window
        self.stride = max(1, round(window * (1.0 - overlap)))
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def attend(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        """Plain multi-head attention over the second-to-last axis of ``x``."""
        *lead, w, d = x.shape
        h, dh = self.heads, d // self.heads
        q, k, v = self.qkv(x).reshape(*lead, w, 3, h, dh).unbind(-3)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))  # [..., h, w, dh]
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        attn = masked_softmax(scores, keep[..., None, None, :])
        out = (attn @ v).transpose(-2, -3).reshape(*lead, w, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
            mask = None if mask is None else mask[None]
        b, n, d = x.shape
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool, device=x.device)
        starts = torch.tensor(window_starts(n, self.window, self.stride), device=x.device)
        idx = starts[:, None] + torch.arange(self.window, device=x.device)  # [W, w]
        inside = idx < n
        idx = idx.clamp(max=n - 1)
        keep = inside & mask[:, idx]  # [B, W, w]
        out = self.attend(x[:, idx], keep) * inside[..., None]
        flat = idx.reshape(-1)
        total = x.new_zeros(b, n, d).index_add_(1, flat, out.reshape(b, -1, d))
        count = x.new_zeros(n).index_add_(0, flat, inside.reshape(-1).to(x.dtype))
        y = x + total / count[:, None]
        return y[0] if squeeze else y


def build_adjacency(x: torch.Tensor, sim_threshold: float = 0.7, sigma: float = 1.0,
                    mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-softmaxed similarity and distance adjacencies for ``x`` ([n, d] or [B, n, d]).

    Cosine similarities below ``sim_threshold`` are dropped before the
    softmax; the distance adjacency is ``-|i - j| / sigma``. Padded frames
    (``mask`` False) are never aggregated from.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
        mask = None if mask is None else mask[None]
    b, n, _ = x.shape
    eye = torch.eye(n, dtype=torch.bool, device=x.device)
    sim = cosine_matrix(x, x)
    # self-similarity is 1 even for zero-norm rows
    sim = torch.where(eye, torch.ones_like(sim), sim)
    dis = distance_logits(n, sigma, x.dtype).to(x.device)
    cols = torch.ones(b, 1, n, dtype=torch.bool, device=x.device) if mask is None else mask[:, None, :]
    cols = cols | eye
    h_sim = masked_softmax(sim, cols & (sim >= sim_threshold))
    h_dis = masked_softmax(dis.expand(b, n, n), cols)
    if squeeze:
        return h_sim[0], h_dis[0]
    return h_sim, h_dis


def distance_logits(n: int, sigma: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype)
    return -(pos[:, None] - pos[None, :]).abs() / sigma


class TemporalGCN(nn.Module):
    """``X + gelu([H_sim X ; H_dis X] W)`` with a single weight ``W`` of shape 2d x d."""

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(2 * d, d))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor, h_sim: torch.Tensor, h_dis: torch.Tensor) -> torch.Tensor:
        agg = torch.cat([h_sim @ x, h_dis @ x], dim=-1)
        return x + F.gelu(agg @ self.weight)


class LGTAdapter(nn.Module):
    def __init__(self, d: int, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        self.local = LocalAttention(d, cfg.window, cfg.overlap, cfg.heads)
        self.gcn = TemporalGCN(d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if self.cfg.use_local:
            x = self.local(x, mask)
        if self.cfg.use_gcn:
            h_sim, h_dis = build_adjacency(x, self.cfg.sim_threshold, self.cfg.sigma, mask)
            x = self.gcn(x, h_sim, h_dis)
        return x
