"""Dual-branch detector: temporal adapter, classification branch producing
per-frame anomaly confidence and alignment branch producing the frame-vs-class
similarity map."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .adapter import AdapterConfig, LGTAdapter, unit_rows
from .data import LabelVocabulary, read_feature_file
from .prompts import PromptBank, StubTextEncoder, VisualPrompt, encode_classes, visual_prompt_vector

VISUAL_PROMPT_MODES = ("anomaly", "average", "off")


@dataclass
class ModelConfig:
    d: int = 512
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    context_length: int = 20
    c_branch: bool = True
    a_branch: bool = True
    learnable_prompt: bool = True
    visual_prompt: str = "anomaly"
    detach_visual_prompt: bool = False
    text_width: int | None = None
    text_layers: int = 2
    text_seed: int = 0
    # VADF file with one precomputed class embedding per label; disables the learnable prompt
    class_embedding_file: str | None = None

    def __post_init__(self):
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if self.visual_prompt not in VISUAL_PROMPT_MODES:
            raise ValueError(f"visual_prompt must be one of {VISUAL_PROMPT_MODES}")
        if self.visual_prompt == "anomaly" and not self.c_branch:
            raise ValueError("the anomaly-focus visual prompt needs the classification branch")
        if not (self.c_branch or self.a_branch):
            raise ValueError("at least one branch must be enabled")
        if self.class_embedding_file is not None and self.learnable_prompt:
            raise ValueError("precomputed class embeddings cannot be combined with the learnable prompt")
        if self.context_length < 0:
            raise ValueError("context_length must be >= 0")


class ModelOutput(NamedTuple):
    scores: torch.Tensor | None  # A, [B, n] anomaly confidence (None without C-branch)
    sim: torch.Tensor  # M, [B, n, m] cosine alignment map
    features: torch.Tensor  # X, [B, n, d]
    class_emb: torch.Tensor  # T, [B, m, d]
    text_emb: torch.Tensor  # t_out, [m, d]


def alignment_similarity(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every frame row of ``x`` with every class row of ``t``."""
    return unit_rows(x) @ unit_rows(t).transpose(-1, -2)


class VadCLIP(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: LabelVocabulary, seed: int = 0):
        super().__init__()
        self.cfg, self.vocab, self.seed = cfg, vocab, seed
        d = cfg.d
        # every submodule is built regardless of flags so toggles never shift the init stream
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.adapter = LGTAdapter(d, cfg.adapter)
            self.fc = nn.Linear(d, d)
            self.c_ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
            self.c_fc = nn.Linear(d, 1)
            self.visual = VisualPrompt(d)
        self.text_encoder = StubTextEncoder(d, cfg.text_width, cfg.text_layers, seed=cfg.text_seed)
        self.prompt = PromptBank(
            vocab.labels, self.text_encoder.width, cfg.context_length,
            "learnable" if cfg.learnable_prompt else "handcrafted", seed=seed + 1,
        )
        if not cfg.learnable_prompt:
            self.prompt.context.requires_grad_(False)
        if cfg.class_embedding_file is not None:
            t = read_feature_file(cfg.class_embedding_file).features
            if t.shape != (vocab.m, d):
                raise ValueError(f"class embedding file has shape {t.shape}, expected {(vocab.m, d)}")
            self.register_buffer("fixed_text_emb", torch.from_numpy(np.array(t)))
        else:
            self.register_buffer("fixed_text_emb", None)

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def text_embeddings(self) -> torch.Tensor:
        if self.fixed_text_emb is not None:
            return self.fixed_text_emb
        return encode_classes(self.prompt, self.text_encoder)

    def anomaly_confidence(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.c_fc(self.c_ffn(x) + x)).squeeze(-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> ModelOutput:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
            mask = None if mask is None else mask[None]
        if x.shape[-1] != self.cfg.d:
            raise ValueError(f"feature dimension {x.shape[-1]} does not match model d={self.cfg.d}")
        feats = self.fc(self.adapter(x, mask))
        scores = self.anomaly_confidence(feats) if self.cfg.c_branch else None
        t_out = self.text_embeddings()
        mode = self.cfg.visual_prompt
        if mode == "off":
            class_emb = t_out.expand(feats.shape[0], *t_out.shape)
        else:
            att = scores if mode == "anomaly" else torch.ones(feats.shape[:2], dtype=feats.dtype)
            if self.cfg.detach_visual_prompt:
                att = att.detach()
            class_emb = self.visual(visual_prompt_vector(att, feats, mask), t_out)
        sim = alignment_similarity(feats, class_emb)
        out = ModelOutput(scores, sim, feats, class_emb, t_out)
        if squeeze:
            out = ModelOutput(*(t if t is None or t is t_out else t[0] for t in out))
        return out


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, manifest length, JSON manifest, float32 payload

CKPT_MAGIC = b"VADC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(path, model: VadCLIP, config: dict, tensors: dict[str, torch.Tensor] | None = None,
                    meta: dict | None = None) -> None:
    """Write all learnable parameters (plus any ``tensors``, e.g. optimizer
    moments) as float32. The frozen text encoder is stored by seed only."""
    entries = {f"param/{n}": p.detach() for n, p in model.trainable_parameters()}
    if model.fixed_text_emb is not None:
        entries["buffer/fixed_text_emb"] = model.fixed_text_emb
    entries.update(tensors or {})
    manifest = {
        "config": config,
        "vocab": model.vocab.to_json(),
        "model_seed": model.seed,
        "frozen": {"text_encoder": {"kind": "stub", "seed": model.cfg.text_seed}},
        "meta": meta or {},
        "tensors": [],
    }
    payload = bytearray()
    for name, t in entries.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)) + blob + bytes(payload))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise ValueError("truncated checkpoint")
    magic, version, mlen = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size + mlen
    manifest = json.loads(buf[_CKPT_HEADER.size:start].decode("utf-8"))
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"]))
        off = start + entry["offset"]
        if off + 4 * count > len(buf):
            raise ValueError(f"truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, "<f4", count, off).reshape(entry["shape"]).copy()
    return manifest, arrays


def load_model(manifest: dict, arrays: dict[str, np.ndarray], model_cfg: ModelConfig) -> VadCLIP:
    model = VadCLIP(model_cfg, LabelVocabulary.from_json(manifest["vocab"]), seed=manifest["model_seed"])
    if model.cfg.text_seed != manifest["frozen"]["text_encoder"]["seed"]:
        raise ValueError("text encoder seed in manifest disagrees with model config")
    with torch.no_grad():
        for name, p in model.trainable_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {arrays[key].shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arrays[key]))
        if model.fixed_text_emb is not None:
            model.fixed_text_emb.copy_(torch.from_numpy(arrays["buffer/fixed_text_emb"]))
    return model


def config_dict(cfg) -> dict:
    return asdict(cfg)
