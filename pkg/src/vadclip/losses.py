"""Training objectives: Top-K BCE, MIL-Align, contrastive separation, total."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .adapter import unit_rows

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossConfig:
    topk_divisor: int = 16  # K = floor(n / topk_divisor) + 1
    fixed_k: int | None = None
    tau: float = 0.07
    lam: float = 1e-4
    mil_pooling: str = "column"  # or "row", the literal per-frame reading
    contrastive_on: str = "prompted"  # or "raw" (pre visual prompt t_out)

    def __post_init__(self):
        if self.topk_divisor < 1:
            raise ValueError("topk_divisor must be >= 1")
        if self.fixed_k is not None and self.fixed_k < 1:
            raise ValueError("fixed_k must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.mil_pooling not in ("column", "row"):
            raise ValueError(f"unknown mil_pooling {self.mil_pooling!r}")
        if self.contrastive_on not in ("prompted", "raw"):
            raise ValueError(f"unknown contrastive_on {self.contrastive_on!r}")

    def k_for(self, n: int) -> int:
        k = self.fixed_k if self.fixed_k is not None else n // self.topk_divisor + 1
        if k > n:
            log.info("K=%d exceeds sequence length %d; clamping", k, n)
            k = n
        return k


def _batched(x: torch.Tensor, mask: torch.Tensor | None, ndim: int):
    squeeze = x.dim() == ndim - 1
    if squeeze:
        x = x[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    return x, mask, squeeze


def topk_mean(values: torch.Tensor, k: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Mean of the ``k`` largest kept entries along the last axis.

    ``k`` broadcasts against ``values.shape[:-1]``.
    """
    ranked = values.masked_fill(~keep, float("-inf")).sort(dim=-1, descending=True).values
    take = torch.arange(values.shape[-1], device=values.device) < k[..., None]
    return torch.where(take, ranked, torch.zeros_like(ranked)).sum(-1) / k.to(values.dtype)


def video_k(mask: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    return torch.tensor([cfg.k_for(int(n)) for n in mask.sum(-1)], device=mask.device)


def topk_bce(scores: torch.Tensor, labels, cfg: LossConfig, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy of the Top-K mean of ``scores`` ([n] or [B, n]) against video labels."""
    scores, mask, _ = _batched(scores, mask, 2)
    y = torch.as_tensor(labels, dtype=scores.dtype, device=scores.device).reshape(-1)
    pred = topk_mean(scores, video_k(mask, cfg), mask)
    return F.binary_cross_entropy(pred, y)


def mil_align_scores(sim: torch.Tensor, cfg: LossConfig, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-class video similarity from an alignment map ``[n, m]`` or ``[B, n, m]``.

    Column pooling (default) averages the K most similar frames of each
    class. Row pooling keeps, in every frame, its K most similar classes and
    averages the kept entries of each class over frames.
    """
    sim, mask, squeeze = _batched(sim, mask, 3)
    k = video_k(mask, cfg)
    if cfg.mil_pooling == "column":
        out = topk_mean(sim.transpose(1, 2), k[:, None], mask[:, None, :])
    else:
        m = sim.shape[-1]
        kk = k.clamp(max=m)
        rank = sim.argsort(dim=-1, descending=True).argsort(dim=-1)
        sel = (rank < kk[:, None, None]) & mask[..., None]
        w = sel.to(sim.dtype)
        out = (sim * w).sum(1) / w.sum(1).clamp_min(1.0)
    return out[0] if squeeze else out


def mil_align_loss(scores: torch.Tensor, targets, tau: float = 0.07) -> torch.Tensor:
    """Temperature-scaled cross-entropy of class scores ``S`` against the paired label(s).

    ``targets`` is one class index per video, or a list of indices for
    multi-label videos (their losses are averaged).
    """
    if scores.dim() == 1:
        scores = scores[None]
        targets = [targets]
    logp = F.log_softmax(scores / tau, dim=-1)
    per_video = []
    for row, tgt in zip(logp, targets):
        idx = [tgt] if isinstance(tgt, int) else list(tgt)
        per_video.append(-row[idx].mean())
    return torch.stack(per_video).mean()


def class_probabilities(scores: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    return torch.softmax(scores / tau, dim=-1)


def contrastive_loss(embeddings: torch.Tensor, normal_index: int = 0) -> torch.Tensor:
    """Sum over abnormal classes of the hinged cosine to the normal class
    embedding; ``[m, d]`` or batch-averaged over ``[B, m, d]``."""
    if embeddings.dim() == 2:
        embeddings = embeddings[None]
    u = unit_rows(embeddings)
    cos = (u * u[:, normal_index: normal_index + 1]).sum(-1)
    others = [j for j in range(embeddings.shape[1]) if j != normal_index]
    return cos[:, others].clamp_min(0).sum(-1).mean()


def total_loss(bce, nce, cts, lam: float) -> torch.Tensor:
    parts = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
             for k, v in {"bce": bce, "nce": nce, "cts": cts}.items()}
    bad = {k: v for k, v in parts.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss components: {bad}")
    return bce + nce + lam * cts


def video_targets(annotations: Sequence, vocab) -> list[list[int]]:
    return [vocab.targets(a) for a in annotations]
