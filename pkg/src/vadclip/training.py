"""Run configuration, batching, the optimisation loop, evaluation and
finite-difference gradient checking."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adapter import AdapterConfig
from .data import SyntheticSpec, VideoDataset, generate_synthetic_dataset
from .losses import (
    LossConfig, NonFiniteLossError, contrastive_loss, mil_align_loss, mil_align_scores, topk_bce, total_loss,
)
from .metrics import (
    COARSE_PATHS, IOU_THRESHOLDS, EvaluationReport, ano_auc, coarse_scores, extract_segments, frame_ap,
    frame_auc, map_at_iou,
)
from .model import ModelConfig, VadCLIP, load_model, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OUTPUT_ENV = "VADCLIP_OUTPUT_DIR"


def output_dir(default: str = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train_dir: str | None = None
    test_dir: str | None = None
    synthetic: SyntheticSpec | None = None
    input_cap: int = 256
    lr: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    data_seed: int = 0
    inference_path: str = "c-branch"
    segment_threshold: float = 0.55  # on similarities mapped to [0, 1]
    segment_min_length: int = 2
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.synthetic, dict):
            spec = dict(self.synthetic)
            if spec.get("class_names") is not None:
                spec["class_names"] = tuple(spec["class_names"])
            self.synthetic = SyntheticSpec(**spec)
        if self.input_cap < 1:
            raise ValueError("input_cap must be >= 1")
        if self.inference_path not in COARSE_PATHS:
            raise ValueError(f"inference_path must be one of {COARSE_PATHS}")
        if self.inference_path == "c-branch" and not self.model.c_branch:
            raise ValueError("c-branch inference needs the classification branch")
        if self.segment_min_length < 1:
            raise ValueError("segment_min_length must be >= 1")

    @classmethod
    def xd_violence(cls, **kw) -> "RunConfig":
        return cls(**kw)._preset(window=64, lam=1e-4, lr=2e-5, epochs=20)

    @classmethod
    def ucf_crime(cls, **kw) -> "RunConfig":
        return cls(**kw)._preset(window=8, lam=1e-1, lr=1e-5, epochs=10)

    def _preset(self, window: int, lam: float, lr: float, epochs: int) -> "RunConfig":
        model = replace(self.model, adapter=replace(self.model.adapter, window=window))
        return replace(self, model=model, loss=replace(self.loss, lam=lam), lr=lr, epochs=epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return cls(**obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def raw_segment_threshold(self) -> float:
        return 2.0 * self.segment_threshold - 1.0


def load_datasets(cfg: RunConfig) -> tuple[VideoDataset, VideoDataset | None]:
    if cfg.train_dir:
        train = VideoDataset.load(cfg.train_dir)
        test = VideoDataset.load(cfg.test_dir) if cfg.test_dir else None
        return train, test
    if cfg.synthetic is None:
        raise ValueError("config names neither dataset directories nor a synthetic spec")
    return generate_synthetic_dataset(cfg.synthetic, cfg.data_seed)


# ---------------------------------------------------------------------------
# batching

def pad_or_sample(features: np.ndarray, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit a sequence to exactly ``cap`` rows.

    Longer sequences are sampled uniformly in time, shorter ones are
    zero-padded. Returns the rows and a boolean validity mask.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    x = np.asarray(features, dtype=np.float32)
    n = x.shape[0]
    if n > cap:
        idx = (np.arange(cap) * n) // cap
        return x[idx], np.ones(cap, dtype=bool)
    out = np.zeros((cap, x.shape[1]), dtype=np.float32)
    out[:n] = x
    mask = np.zeros(cap, dtype=bool)
    mask[:n] = True
    return out, mask


@dataclass
class Batch:
    features: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor
    targets: list[list[int]]
    ids: list[str]


def make_batch(dataset: VideoDataset, indices: Sequence[int], cap: int, dtype=torch.float32) -> Batch:
    xs, ms = zip(*(pad_or_sample(dataset.features[i].features, cap) for i in indices))
    anns = [dataset.annotations[i] for i in indices]
    return Batch(
        torch.from_numpy(np.stack(xs)).to(dtype),
        torch.from_numpy(np.stack(ms)),
        torch.tensor([a.label for a in anns], dtype=dtype),
        [dataset.vocab.targets(a) for a in anns],
        [a.video_id for a in anns],
    )


def epoch_batches(n_videos: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n_videos)
    return [perm[i:i + batch_size] for i in range(0, n_videos, batch_size)]


# ---------------------------------------------------------------------------
# losses on a batch

def batch_losses(model: VadCLIP, batch: Batch, loss_cfg: LossConfig) -> dict[str, torch.Tensor]:
    out = model(batch.features, batch.mask)
    zero = batch.features.new_zeros(())
    bce = topk_bce(out.scores, batch.labels, loss_cfg, batch.mask) if model.cfg.c_branch else zero
    if model.cfg.a_branch:
        s = mil_align_scores(out.sim, loss_cfg, batch.mask)
        nce = mil_align_loss(s, batch.targets, loss_cfg.tau)
        emb = out.class_emb if loss_cfg.contrastive_on == "prompted" else out.text_emb
        cts = contrastive_loss(emb, model.vocab.normal_index)
    else:
        nce = cts = zero
    return {"bce": bce, "nce": nce, "cts": cts, "total": total_loss(bce, nce, cts, loss_cfg.lam)}


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: VadCLIP
    step_losses: list[float]
    history: list[dict]
    checkpoint: Path | None = None


def _optimizer(model: VadCLIP, cfg: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW([p for _, p in model.trainable_parameters()], lr=cfg.lr,
                             weight_decay=cfg.weight_decay)


def _optimizer_tensors(model, opt) -> tuple[dict, dict]:
    tensors, steps = {}, {}
    for name, p in model.trainable_parameters():
        state = opt.state.get(p)
        if not state:
            continue
        tensors[f"optim/{name}/exp_avg"] = state["exp_avg"]
        tensors[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"]
        steps[name] = float(state["step"])
    return tensors, steps


def _restore_optimizer(model, opt, arrays, steps):
    for name, p in model.trainable_parameters():
        if name not in steps:
            continue
        opt.state[p] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(arrays[f"optim/{name}/exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays[f"optim/{name}/exp_avg_sq"]).to(p.dtype),
        }


def write_checkpoint(path, model, cfg: RunConfig, opt=None, epoch: int = 0, history=None) -> Path:
    tensors, steps = _optimizer_tensors(model, opt) if opt is not None else ({}, {})
    meta = {"epoch": epoch, "optimizer_steps": steps, "history": history or []}
    save_checkpoint(path, model, cfg.to_dict(), tensors, meta)
    return Path(path)


def load_checkpoint(path) -> tuple[VadCLIP, RunConfig, dict, dict]:
    manifest, arrays = read_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"])
    return load_model(manifest, arrays, cfg.model), cfg, manifest, arrays


def train(cfg: RunConfig, train_set: VideoDataset | None = None, out_dir=None, resume=None,
          max_steps: int | None = None, on_epoch: Callable[[int, VadCLIP], None] | None = None) -> TrainResult:
    """Optimise all learnable parameters with AdamW at a constant learning rate.

    The frozen text encoder never reaches the optimizer. ``resume`` continues
    from a checkpoint written by this function (model and optimizer state).
    """
    if train_set is None:
        train_set, _ = load_datasets(cfg)
    if train_set.d != cfg.model.d:
        raise ValueError(f"dataset d={train_set.d} but model d={cfg.model.d}")
    start_epoch, history = 0, []
    if resume is not None:
        model, _, manifest, arrays = load_checkpoint(resume)
        opt = _optimizer(model, cfg)
        _restore_optimizer(model, opt, arrays, manifest["meta"]["optimizer_steps"])
        start_epoch = manifest["meta"]["epoch"]
        history = list(manifest["meta"]["history"])
    else:
        model = VadCLIP(cfg.model, train_set.vocab, seed=cfg.seed)
        opt = _optimizer(model, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    model.train()
    dtype = next(model.parameters()).dtype
    step_losses = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        totals = {"bce": 0.0, "nce": 0.0, "cts": 0.0, "total": 0.0}
        batches = epoch_batches(len(train_set), cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            batch = make_batch(train_set, idx, cfg.input_cap, dtype)
            try:
                losses = batch_losses(model, batch, cfg.loss)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(f"epoch {epoch} batch {b} ({batch.ids}): {exc}") from exc
            opt.zero_grad(set_to_none=True)
            losses["total"].backward()
            opt.step()
            step_losses.append(losses["total"].item())
            for k in totals:
                totals[k] += losses[k].item() / len(batches)
            if max_steps is not None and len(step_losses) >= max_steps:
                return TrainResult(model, step_losses, history)
        history.append({"epoch": epoch, **totals})
        log.info("epoch %d loss %.4f (bce %.4f nce %.4f cts %.4f)", epoch, totals["total"],
                 totals["bce"], totals["nce"], totals["cts"])
        if on_epoch is not None:
            on_epoch(epoch, model)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            write_checkpoint(out_dir / f"checkpoint_epoch{epoch:03d}.vadc", model, cfg, opt, epoch, history)
    ckpt = None
    if out_dir is not None:
        ckpt = write_checkpoint(out_dir / "checkpoint.vadc", model, cfg, opt, cfg.epochs, history)
        (out_dir / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    return TrainResult(model, step_losses, history, ckpt)


# ---------------------------------------------------------------------------
# inference and evaluation

@torch.no_grad()
def predict_video(model: VadCLIP, features: np.ndarray, cap: int) -> tuple[np.ndarray | None, np.ndarray]:
    """Frame scores and alignment map for one video, processed in padded
    chunks of ``cap`` frames."""
    model.eval()
    dtype = next(model.parameters()).dtype
    scores, sims = [], []
    for start in range(0, features.shape[0], cap):
        chunk = features[start:start + cap]
        x, mask = pad_or_sample(chunk, cap)
        out = model(torch.from_numpy(x).to(dtype)[None], torch.from_numpy(mask)[None])
        n = chunk.shape[0]
        if out.scores is not None:
            scores.append(out.scores[0, :n].double().numpy())
        sims.append(out.sim[0, :n].double().numpy())
    return (np.concatenate(scores) if scores else None), np.concatenate(sims)


@dataclass
class VideoPrediction:
    video_id: str
    label: int
    scores: dict[str, list[float]]
    segments: list

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "label": self.label,
            "scores": self.scores,
            "segments": [[s.label, s.start, s.end, s.confidence] for s in self.segments],
        }


def predict(model: VadCLIP, dataset: VideoDataset, cfg: RunConfig) -> list[VideoPrediction]:
    preds = []
    normal = dataset.vocab.normal_index
    for feat, ann in zip(dataset.features, dataset.annotations):
        a, m = predict_video(model, feat.features, cfg.input_cap)
        scores = {path: coarse_scores(a, m, path, normal, cfg.loss.tau).tolist()
                  for path in COARSE_PATHS if path != "c-branch" or a is not None}
        segs = extract_segments(m, dataset.vocab, cfg.raw_segment_threshold, cfg.segment_min_length, feat.video_id)
        preds.append(VideoPrediction(feat.video_id, ann.label, scores, segs))
    return preds


def evaluate_predictions(preds: list[VideoPrediction], dataset: VideoDataset, cfg: RunConfig,
                         thresholds=IOU_THRESHOLDS) -> EvaluationReport:
    labels = [a.frame_labels(f.n) for f, a in zip(dataset.features, dataset.annotations)]
    video_labels = [a.label for a in dataset.annotations]
    by_path = {}
    for path in preds[0].scores:
        s = [p.scores[path] for p in preds]
        flat_s, flat_y = np.concatenate(s), np.concatenate(labels)
        by_path[path] = {
            "ap": frame_ap(flat_s, flat_y),
            "auc": frame_auc(flat_s, flat_y),
            "ano_auc": ano_auc(s, labels, video_labels),
        }
    abnormal = {a.video_id for a in dataset.annotations if a.label == 1}
    gts = [(a.video_id, s, e, c) for a in dataset.annotations if a.label == 1 for s, e, c in a.segments]
    segs = [s for p in preds if p.video_id in abnormal for s in p.segments]
    maps, avg, per_class = map_at_iou(segs, gts, thresholds)
    chosen = by_path[cfg.inference_path]
    return EvaluationReport(chosen["ap"], chosen["auc"], chosen["ano_auc"], maps, avg, per_class,
                            cfg.inference_path, by_path)


def evaluate(model: VadCLIP, dataset: VideoDataset, cfg: RunConfig, out_dir=None) -> EvaluationReport:
    if dataset.d != model.cfg.d:
        raise ValueError(f"dataset d={dataset.d} but checkpoint d={model.cfg.d}")
    if dataset.vocab != model.vocab:
        raise ValueError("dataset vocabulary differs from the checkpoint's")
    preds = predict(model, dataset, cfg)
    report = evaluate_predictions(preds, dataset, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_predictions(out_dir / "predictions.jsonl", preds)
        (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return report


def write_predictions(path, preds: list[VideoPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps(p.to_json()) + "\n")


def segment_sweep(preds_fn: Callable[[RunConfig], list[VideoPrediction]], dataset: VideoDataset, cfg: RunConfig,
                  thresholds: Sequence[float], min_lengths: Sequence[int]) -> list[dict]:
    """Fine-grained AVG mAP across segment thresholds (mapped scale) and minimum lengths."""
    rows = []
    for t in thresholds:
        for ml in min_lengths:
            c = replace(cfg, segment_threshold=t, segment_min_length=ml)
            rep = evaluate_predictions(preds_fn(c), dataset, c)
            rows.append({"threshold": t, "min_length": ml, "avg_map": rep.avg_map,
                         "map": {f"{k:.1f}": v for k, v in rep.map_at_iou.items()}})
    return rows


# ---------------------------------------------------------------------------
# ablation over branch and prompt toggles

BRANCH_VARIANTS = {
    "C": dict(c_branch=True, a_branch=False, learnable_prompt=False, visual_prompt="off"),
    "A": dict(c_branch=False, a_branch=True, learnable_prompt=False, visual_prompt="off"),
    "C+A": dict(c_branch=True, a_branch=True, learnable_prompt=False, visual_prompt="off"),
    "C+A+L": dict(c_branch=True, a_branch=True, learnable_prompt=True, visual_prompt="off"),
    "C+A+V": dict(c_branch=True, a_branch=True, learnable_prompt=False, visual_prompt="anomaly"),
    "C+A+L+V": dict(c_branch=True, a_branch=True, learnable_prompt=True, visual_prompt="anomaly"),
}


def variant_config(cfg: RunConfig, flags: dict) -> RunConfig:
    model = replace(cfg.model, adapter=replace(cfg.model.adapter), **flags)
    path = cfg.inference_path if flags["c_branch"] else "a-branch"
    return replace(cfg, model=model, loss=replace(cfg.loss), inference_path=path)


def run_ablation(cfg: RunConfig, train_set: VideoDataset, test_set: VideoDataset) -> list[dict]:
    rows = []
    for name, flags in BRANCH_VARIANTS.items():
        vcfg = variant_config(cfg, flags)
        t0 = time.perf_counter()
        result = train(vcfg, train_set)
        rep = evaluate(result.model, test_set, vcfg)
        rows.append({
            "variant": name, **flags, "path": vcfg.inference_path, "ap": rep.ap, "auc": rep.auc,
            "avg_map": rep.avg_map, "by_path": rep.by_path, "seconds": time.perf_counter() - t0,
        })
    return rows


# ---------------------------------------------------------------------------
# gradient check

PARAM_GROUPS = (
    ("adapter attention", ("adapter.local.",)),
    ("gcn weight", ("adapter.gcn.",)),
    ("post-adapter fc", ("fc.",)),
    ("c-branch ffn/fc", ("c_ffn.", "c_fc.")),
    ("context tokens", ("prompt.context",)),
    ("visual-prompt ffn", ("visual.",)),
    ("text encoder", ("text_encoder.",)),
)


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS:
        if name.startswith(prefixes):
            return group
    return "other"


@dataclass
class GradCheckRow:
    group: str
    size: int
    status: str  # pass | fail | no gradient
    rel_error: float
    analytic_norm: float


def tiny_instance(n_frames: int = 6, n_classes: int = 3, d: int = 8, seed: int = 0):
    """Two-video double-precision batch (one abnormal, one normal) whose frames
    share a common direction, so the similarity threshold keeps some edges."""
    g = torch.Generator().manual_seed(seed)
    base = torch.randn(d, generator=g, dtype=torch.float64)
    x = base + 0.6 * torch.randn(2, n_frames, d, generator=g, dtype=torch.float64)
    mask = torch.ones(2, n_frames, dtype=torch.bool)
    return x, mask, torch.tensor([1.0, 0.0], dtype=torch.float64), [[1], [0]]


def gradcheck(model_cfg: ModelConfig | None = None, loss_cfg: LossConfig | None = None, n_frames: int = 6,
              n_classes: int = 3, d: int = 8, seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
              labels: Sequence[str] | None = None) -> list[GradCheckRow]:
    """Central finite differences against autograd for every parameter group
    of a small double-precision model."""
    from .data import LabelVocabulary

    if model_cfg is None:
        model_cfg = ModelConfig(d=d, adapter=AdapterConfig(window=4), context_length=2)
    else:
        model_cfg = replace(model_cfg, d=d, adapter=replace(model_cfg.adapter))
    loss_cfg = loss_cfg or LossConfig(lam=0.5)
    labels = labels or ("normal", "riot", "fighting")[:n_classes]
    vocab = LabelVocabulary(tuple(labels))
    model = VadCLIP(model_cfg, vocab, seed=seed).double()
    x, mask, y, targets = tiny_instance(n_frames, n_classes, d, seed)
    batch = Batch(x, mask, y, targets, ["a", "b"])

    def loss_value():
        return batch_losses(model, batch, loss_cfg)["total"]

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = {n: (p.grad.clone() if p.grad is not None else None) for n, p in model.named_parameters()}
    groups: dict[str, list[tuple[str, torch.nn.Parameter]]] = {}
    for n, p in model.named_parameters():
        groups.setdefault(param_group(n), []).append((n, p))

    rows = []
    with torch.no_grad():
        for group, params in groups.items():
            size = sum(p.numel() for _, p in params)
            if not any(p.requires_grad for _, p in params):
                rows.append(GradCheckRow(group, size, "no gradient", 0.0, 0.0))
                continue
            ga, gn = [], []
            for n, p in params:
                a = analytic[n] if analytic[n] is not None else torch.zeros_like(p)
                fd = torch.zeros_like(p)
                flat = p.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    lp = loss_value().item()
                    flat[i] = orig - eps
                    lm = loss_value().item()
                    flat[i] = orig
                    fd.view(-1)[i] = (lp - lm) / (2 * eps)
                ga.append(a.reshape(-1))
                gn.append(fd.reshape(-1))
            ga, gn = torch.cat(ga), torch.cat(gn)
            scale = max(ga.norm().item(), gn.norm().item())
            err = (ga - gn).norm().item() / scale if scale > 0 else 0.0
            rows.append(GradCheckRow(group, size, "pass" if err < tol else "fail", err, ga.norm().item()))
    return rows


def format_gradcheck(rows: list[GradCheckRow]) -> str:
    lines = [f"{'group':<20} {'size':>6} {'status':<12} {'rel_error':>10} {'|grad|':>10}"]
    for r in rows:
        lines.append(f"{r.group:<20} {r.size:>6} {r.status:<12} {r.rel_error:>10.2e} {r.analytic_norm:>10.3e}")
    return "\n".join(lines)
