"""Core data containers, the VADF feature container, annotation sidecars and
the synthetic dataset generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"VADF"
VERSION = 1
DTYPE_FLOAT32 = 1
# magic, version, n, d, dtype, 3 reserved bytes
HEADER = struct.Struct("<4sIIIB3x")
HEADER_SIZE = HEADER.size  # 20 bytes

NORMAL_LABEL = "normal"


class FeatureFileError(ValueError):
    """Base class for problems with a VADF container."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class NonFiniteError(FeatureFileError):
    pass


class UnsupportedDtypeError(FeatureFileError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Per-video snippet features, an ``n x d`` float32 matrix."""

    video_id: str
    features: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float32, copy=True)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise NonFiniteError(f"{self.video_id}: features contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    label: int
    classes: tuple[str, ...] = ()
    # half-open [start, end) frame intervals
    segments: tuple[tuple[int, int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "segments", tuple((int(s), int(e), str(c)) for s, e, c in self.segments))
        if self.label not in (0, 1):
            raise ValueError(f"{self.video_id}: label must be 0 or 1")
        if (self.label == 1) != bool(self.classes):
            raise ValueError(f"{self.video_id}: abnormal videos need classes and normal videos none")
        for s, e, c in self.segments:
            if not 0 <= s < e:
                raise ValueError(f"{self.video_id}: bad segment [{s}, {e})")
            if c not in self.classes:
                raise ValueError(f"{self.video_id}: segment class {c!r} not among video classes")

    def validate_length(self, n: int):
        for s, e, _ in self.segments:
            if e > n:
                raise ValueError(f"{self.video_id}: segment [{s}, {e}) exceeds video length {n}")

    def frame_labels(self, n: int) -> np.ndarray:
        y = np.zeros(n, dtype=np.int64)
        for s, e, _ in self.segments:
            y[s:e] = 1
        return y

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "label": self.label,
            "classes": list(self.classes),
            "segments": [[s, e, c] for s, e, c in self.segments],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VideoAnnotation":
        return cls(
            video_id=obj["video_id"],
            label=int(obj["label"]),
            classes=tuple(obj.get("classes", ())),
            segments=tuple(tuple(s) for s in obj.get("segments", ())),
        )


@dataclass(frozen=True)
class DetectionSegment:
    label: str
    start: int
    end: int
    confidence: float
    video_id: str = ""

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered class labels; ``labels[normal_index]`` is the normal class."""

    labels: tuple[str, ...]
    normal_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise ValueError("need at least one normal and one abnormal label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be unique")
        if not 0 <= self.normal_index < len(self.labels):
            raise ValueError("normal_index out of range")

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def normal_label(self) -> str:
        return self.labels[self.normal_index]

    @property
    def abnormal_indices(self) -> list[int]:
        return [i for i in range(self.m) if i != self.normal_index]

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def targets(self, ann: VideoAnnotation) -> list[int]:
        """Class indices a video is paired with for the alignment loss."""
        if ann.label == 0:
            return [self.normal_index]
        return [self.index(c) for c in ann.classes]

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "normal_index": self.normal_index}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelVocabulary":
        return cls(tuple(obj["labels"]), int(obj.get("normal_index", 0)))


# ---------------------------------------------------------------------------
# VADF container

def encode_feature_bytes(seq: FeatureSequence | np.ndarray) -> bytes:
    x = seq.features if isinstance(seq, FeatureSequence) else np.asarray(seq)
    if x.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.isfinite(x).all():
        raise NonFiniteError("refusing to write non-finite values")
    x = np.ascontiguousarray(x, dtype="<f4")
    n, d = x.shape
    return HEADER.pack(MAGIC, VERSION, n, d, DTYPE_FLOAT32) + x.tobytes()


def decode_feature_bytes(buf: bytes, video_id: str = "") -> FeatureSequence:
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    magic, version, n, d, dtype = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    expected = HEADER_SIZE + n * d * 4
    if len(buf) < expected:
        raise TruncatedFileError(f"payload needs {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise FeatureFileError(f"{len(buf) - expected} trailing bytes after payload")
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=HEADER_SIZE).reshape(n, d)
    if not np.isfinite(x).all():
        raise NonFiniteError("payload contains non-finite values")
    return FeatureSequence(video_id, x.astype(np.float32))


def write_feature_file(path, seq: FeatureSequence | np.ndarray) -> None:
    Path(path).write_bytes(encode_feature_bytes(seq))


def read_feature_file(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    return decode_feature_bytes(path.read_bytes(), video_id if video_id is not None else path.stem)


# ---------------------------------------------------------------------------
# annotation sidecar (JSON lines) and dataset directories

def write_annotations(path, annotations: Iterable[VideoAnnotation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ann in annotations:
            f.write(json.dumps(ann.to_json(), sort_keys=True) + "\n")


def read_annotations(path) -> list[VideoAnnotation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(VideoAnnotation.from_json(json.loads(line)))
    return out


@dataclass
class VideoDataset:
    """Paired feature sequences and annotations sharing one vocabulary."""

    vocab: LabelVocabulary
    features: list[FeatureSequence]
    annotations: list[VideoAnnotation]

    def __post_init__(self):
        if len(self.features) != len(self.annotations):
            raise ValueError("features and annotations differ in length")
        dims = {f.d for f in self.features}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
        for f, a in zip(self.features, self.annotations):
            if f.video_id != a.video_id:
                raise ValueError(f"video id mismatch {f.video_id!r} vs {a.video_id!r}")
            a.validate_length(f.n)
            for c in a.classes:
                if c not in self.vocab.labels or c == self.vocab.normal_label:
                    raise ValueError(f"{a.video_id}: unknown abnormal class {c!r}")

    def __len__(self):
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features[0].d

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "features").mkdir(parents=True, exist_ok=True)
        for f in self.features:
            write_feature_file(directory / "features" / f"{f.video_id}.vadf", f)
        write_annotations(directory / "annotations.jsonl", self.annotations)
        (directory / "labels.json").write_text(json.dumps(self.vocab.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "VideoDataset":
        directory = Path(directory)
        vocab = LabelVocabulary.from_json(json.loads((directory / "labels.json").read_text()))
        anns = read_annotations(directory / "annotations.jsonl")
        feats = [read_feature_file(directory / "features" / f"{a.video_id}.vadf") for a in anns]
        return cls(vocab, feats, anns)


# ---------------------------------------------------------------------------
# synthetic data

DEFAULT_CLASS_NAMES = (
    "fighting", "shooting", "riot", "abuse", "car accident", "explosion",
    "arson", "arrest", "assault", "burglary", "robbery", "shoplifting", "vandalism",
)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3  # abnormal classes; the normal class is added on top
    videos_per_class: int = 8
    normal_videos: int = 24
    test_videos_per_class: int = 4
    test_normal_videos: int = 12
    n: int = 64
    d: int = 32
    burst_min: int = 8
    burst_max: int = 20
    max_bursts: int = 2
    margin: float = 2.0
    noise: float = 1.0  # norm of the per-frame noise vector, in expectation
    class_names: tuple[str, ...] | None = None

    def validate(self):
        if self.num_classes < 1:
            raise ValueError("need at least one abnormal class")
        if self.videos_per_class < 0 or self.normal_videos < 0:
            raise ValueError("video counts must be non-negative")
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not 1 <= self.burst_min <= self.burst_max:
            raise ValueError("need 1 <= burst_min <= burst_max")
        if self.burst_min >= self.n:
            raise ValueError(f"n={self.n} too small for bursts of length {self.burst_min}")
        if self.max_bursts < 1:
            raise ValueError("max_bursts must be >= 1")
        if self.margin < 0 or self.noise < 0:
            raise ValueError("margin and noise must be non-negative")
        names = self.names()
        if len(names) < self.num_classes or len(set(names)) != len(names) or NORMAL_LABEL in names:
            raise ValueError("class_names must be unique, exclude 'normal', and cover num_classes")

    def names(self) -> tuple[str, ...]:
        names = self.class_names if self.class_names is not None else DEFAULT_CLASS_NAMES
        return tuple(names)[: self.num_classes] if len(names) >= self.num_classes else tuple(names)

    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary((NORMAL_LABEL,) + self.names(), 0)


def _class_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm normal center plus class centers offset by ``margin`` along
    unit directions, mutually orthogonal whenever d allows it."""
    k = spec.num_classes + 1
    raw = rng.standard_normal((k, spec.d))
    if k <= spec.d:
        q, _ = np.linalg.qr(raw.T)
        basis = q.T
    else:
        basis = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    centers = basis[0] + spec.margin * basis
    centers[0] = basis[0]
    return centers


def _place_bursts(n: int, count: int, lo: int, hi: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    taken = np.zeros(n, dtype=bool)
    out = []
    for _ in range(count):
        for _attempt in range(50):
            length = int(rng.integers(lo, min(hi, n) + 1))
            start = int(rng.integers(0, n - length + 1))
            # keep a one-frame gap so bursts never touch
            lo_, hi_ = max(0, start - 1), min(n, start + length + 1)
            if not taken[lo_:hi_].any():
                taken[start:start + length] = True
                out.append((start, start + length))
                break
    return sorted(out)


def _make_split(spec, centers, vocab, per_class, normals, prefix, rng):
    sigma = spec.noise / np.sqrt(spec.d)
    feats, anns = [], []
    names = vocab.labels
    for c in range(1, len(names)):
        for k in range(per_class):
            vid = f"{prefix}_{names[c].replace(' ', '-')}_{k:03d}"
            x = centers[0] + sigma * rng.standard_normal((spec.n, spec.d))
            count = int(rng.integers(1, spec.max_bursts + 1))
            bursts = _place_bursts(spec.n, count, spec.burst_min, spec.burst_max, rng)
            for s, e in bursts:
                x[s:e] = centers[c] + sigma * rng.standard_normal((e - s, spec.d))
            feats.append(FeatureSequence(vid, x))
            anns.append(VideoAnnotation(vid, 1, (names[c],), tuple((s, e, names[c]) for s, e in bursts)))
    for k in range(normals):
        vid = f"{prefix}_normal_{k:03d}"
        x = centers[0] + sigma * rng.standard_normal((spec.n, spec.d))
        feats.append(FeatureSequence(vid, x))
        anns.append(VideoAnnotation(vid, 0))
    return VideoDataset(vocab, feats, anns)


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> tuple[VideoDataset, VideoDataset]:
    """Deterministic (train, test) pair of synthetic datasets.

    Normal frames come from one Gaussian cluster; every abnormal video is
    normal background with 1..max_bursts non-overlapping bursts drawn from its
    class cluster. Both splits carry frame-level segments; training code only
    reads the video-level label and classes.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    vocab = spec.vocabulary()
    centers = _class_centers(spec, rng)
    train = _make_split(spec, centers, vocab, spec.videos_per_class, spec.normal_videos, "train", rng)
    test = _make_split(spec, centers, vocab, spec.test_videos_per_class, spec.test_normal_videos, "test", rng)
    return train, test


def stack_frame_labels(anns: Sequence[VideoAnnotation], lengths: Sequence[int]) -> np.ndarray:
    return np.concatenate([a.frame_labels(n) for a, n in zip(anns, lengths)])


__all__ = [
    "BadMagicError", "DetectionSegment", "FeatureFileError", "FeatureSequence", "HEADER_SIZE",
    "LabelVocabulary", "NonFiniteError", "SyntheticSpec", "TruncatedFileError", "VersionMismatchError",
    "VideoAnnotation", "VideoDataset", "generate_synthetic_dataset", "read_annotations",
    "read_feature_file", "write_annotations", "write_feature_file",
]
