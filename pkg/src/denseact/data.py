"""Feature/label file formats, manifests, and the synthetic corpus generator.

Feature file (``.dadf``)::

    b"DADF" | u16 version | u32 T | u32 D | T*D float32, little endian, row-major

Label file (``.dadl``)::

    b"DADL" | u16 version | u32 T | u32 C | T*C bytes, each 0 or 1
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, ConsistencyError, FormatError

FEATURE_MAGIC = b"DADF"
LABEL_MAGIC = b"DADL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
MAX_ELEMENTS = 1 << 31


@dataclass
class FeatureSequence:
    tokens: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be [T>=1, D], got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("tokens contain non-finite values")


@dataclass
class LabelGrid:
    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"labels must be [T>=1, C], got {arr.shape}")
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("labels must be binary")
        self.labels = arr.astype(np.uint8)


@dataclass
class Video:
    features: FeatureSequence
    labels: LabelGrid
    split: str = "train"

    @property
    def video_id(self) -> str:
        return self.features.video_id

    def __len__(self) -> int:
        return self.features.tokens.shape[0]


# ----------------------------------------------------------------- binary IO

def _write(path, magic: bytes, rows: int, cols: int, payload: bytes) -> None:
    Path(path).write_bytes(_HEADER.pack(magic, FORMAT_VERSION, rows, cols) + payload)


def _read_header(blob: bytes, magic: bytes, what: str) -> tuple[int, int]:
    if len(blob) < 4 or blob[:4] != magic:
        raise FormatError(f"bad {what} magic, expected {magic!r}", 0)
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated {what} header", len(blob))
    _, version, rows, cols = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {what} version {version}", 4)
    if rows < 1:
        raise FormatError(f"{what} header declares T={rows}; need T >= 1", 6)
    if cols < 1:
        raise FormatError(f"{what} header declares zero columns", 10)
    if rows * cols >= MAX_ELEMENTS:
        raise FormatError(f"{what} shape {rows}x{cols} overflows the element limit", 6)
    return rows, cols


def write_features(path, seq: FeatureSequence) -> None:
    t, d = seq.tokens.shape
    _write(path, FEATURE_MAGIC, t, d, seq.tokens.astype("<f4").tobytes())


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    blob = Path(path).read_bytes()
    t, d = _read_header(blob, FEATURE_MAGIC, "feature")
    need = _HEADER.size + 4 * t * d
    if len(blob) < need:
        raise FormatError(f"truncated feature payload: {len(blob)} of {need} bytes", len(blob))
    if len(blob) > need:
        raise FormatError("trailing bytes after feature payload", need)
    tokens = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    if not np.all(np.isfinite(tokens)):
        bad = int(np.argmin(np.isfinite(tokens).reshape(-1)))
        raise FormatError("non-finite feature value", _HEADER.size + 4 * bad)
    return FeatureSequence(tokens.astype(np.float32), video_id or Path(path).stem)


def write_labels(path, grid: LabelGrid) -> None:
    t, c = grid.labels.shape
    _write(path, LABEL_MAGIC, t, c, grid.labels.astype(np.uint8).tobytes())


def read_labels(path, expected_classes: int | None = None) -> LabelGrid:
    blob = Path(path).read_bytes()
    t, c = _read_header(blob, LABEL_MAGIC, "label")
    need = _HEADER.size + t * c
    if len(blob) < need:
        raise FormatError(f"truncated label payload: {len(blob)} of {need} bytes", len(blob))
    if len(blob) > need:
        raise FormatError("trailing bytes after label payload", need)
    raw = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    bad = np.flatnonzero(raw > 1)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"non-binary label {raw[i]} at step {i // c}, class {i % c}",
                          _HEADER.size + i)
    if expected_classes is not None and c != expected_classes:
        raise ConsistencyError(f"{path}: label file has C={c}, manifest says C={expected_classes}")
    return LabelGrid(raw.reshape(t, c).copy())


# ------------------------------------------------------------------ manifest

@dataclass
class Dataset:
    """Videos sharing one feature width ``D`` and class count ``C``."""

    videos: list[Video] = field(default_factory=list)
    D: int | None = None
    C: int | None = None

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[Video]:
        return iter(self.videos)

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]

    def train(self) -> list[Video]:
        return self.split("train")

    def test(self) -> list[Video]:
        return self.split("test")


def write_manifest(path, entries: list[dict], D: int, C: int) -> None:
    """``entries``: dicts with video_id, features, labels (paths relative to the
    manifest directory) and split."""
    doc = {"format": "denseact-manifest", "version": 1, "D": D, "C": C, "videos": entries}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    entries = doc.get("videos", [])
    d_decl, c_decl = doc.get("D"), doc.get("C")
    ds = Dataset(D=d_decl, C=c_decl)
    seen = set()
    for i, e in enumerate(entries):
        missing = {"video_id", "features", "labels", "split"} - set(e)
        if missing:
            raise FormatError(f"manifest entry {i} lacks {sorted(missing)}")
        if e["video_id"] in seen:
            raise ConsistencyError(f"duplicate video_id {e['video_id']!r}")
        seen.add(e["video_id"])
        fpath, lpath = path.parent / e["features"], path.parent / e["labels"]
        for p in (fpath, lpath):
            if not p.exists():
                raise FileNotFoundError(f"manifest entry {e['video_id']!r} references missing {p}")
        feats = read_features(fpath, e["video_id"])
        labels = read_labels(lpath, ds.C)
        t, d = feats.tokens.shape
        if ds.D is None:
            ds.D = d
        elif d != ds.D:
            raise ConsistencyError(f"{e['video_id']}: D={d} differs from dataset D={ds.D}")
        if ds.C is None:
            ds.C = labels.labels.shape[1]
        if labels.labels.shape[0] != t:
            raise ConsistencyError(
                f"{e['video_id']}: {t} feature steps but {labels.labels.shape[0]} label steps")
        ds.videos.append(Video(feats, labels, e["split"]))
    return ds


def save_dataset(out_dir, videos: list[Video], manifest_name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in videos:
        fr, lr = f"features/{v.video_id}.dadf", f"labels/{v.video_id}.dadl"
        write_features(out / fr, v.features)
        write_labels(out / lr, v.labels)
        entries.append({"video_id": v.video_id, "features": fr, "labels": lr, "split": v.split})
    d = videos[0].features.tokens.shape[1] if videos else None
    c = videos[0].labels.labels.shape[1] if videos else None
    mpath = out / manifest_name
    write_manifest(mpath, entries, d, c)
    return mpath


def pack_external_features(tokens: np.ndarray, intervals: list[tuple[int, float, float]],
                           num_classes: int, seconds_per_token: float,
                           policy: str = "any-overlap") -> tuple[FeatureSequence, LabelGrid]:
    """Pack externally extracted per-segment features (e.g. T x 1024 from a
    frozen video encoder) with second-based action annotations.

    ``intervals`` holds ``(class, start_s, end_s)``. Token ``t`` covers
    ``[t*s, (t+1)*s)``; ``policy`` decides when a token is labelled:
    ``any-overlap`` (any intersection) or ``majority`` (covers > half the token).
    """
    if policy not in ("any-overlap", "majority"):
        raise ConfigurationError(f"unknown rasterisation policy {policy!r}")
    t = tokens.shape[0]
    grid = np.zeros((t, num_classes), dtype=np.uint8)
    starts = np.arange(t) * seconds_per_token
    ends = starts + seconds_per_token
    for c, a, b in intervals:
        overlap = np.clip(np.minimum(ends, b) - np.maximum(starts, a), 0.0, None)
        hit = overlap > 0 if policy == "any-overlap" else overlap > 0.5 * seconds_per_token
        grid[hit, c] = 1
    return FeatureSequence(tokens), LabelGrid(grid)


# ----------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    num_videos: int = 20
    t_min: int = 64
    t_max: int = 64
    C: int = 8
    D: int = 32
    max_concurrency: int = 3
    # per-class [min, max] interval length in steps; default cycles short/medium/long
    duration_ranges: list | None = None
    # (class_i, class_j, probability): class_j is switched on over class_i's interval
    co_occurrence_pairs: list = field(default_factory=list)
    events_per_class: float = 1.0
    noise_sigma: float = 0.05
    # per-class signature scale; None means 1 for every class
    amplitudes: list | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.max_concurrency > self.C or self.max_concurrency < 1:
            raise ConfigurationError("max_concurrency must be in [1, C]")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigurationError("need 1 <= t_min <= t_max")
        if self.duration_ranges is None:
            self.duration_ranges = default_duration_ranges(self.C, self.t_min)
        if len(self.duration_ranges) != self.C:
            raise ConfigurationError("duration_ranges needs one [min, max] per class")
        for lo, hi in self.duration_ranges:
            if not 1 <= lo <= hi:
                raise ConfigurationError(f"bad duration range [{lo}, {hi}]")
            if hi > self.t_min:
                raise ConfigurationError(
                    f"duration {hi} exceeds the shortest video length {self.t_min}")
        for pair in self.co_occurrence_pairs:
            i, j, p = pair
            if not (0 <= i < self.C and 0 <= j < self.C) or i == j:
                raise ConfigurationError(f"bad co-occurrence pair {pair}")
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"co-occurrence probability {p} outside [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.amplitudes is not None and (len(self.amplitudes) != self.C
                                            or min(self.amplitudes) <= 0):
            raise ConfigurationError("amplitudes needs one positive value per class")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def default_duration_ranges(num_classes: int, t_min: int) -> list[list[int]]:
    """Cycle short / medium / long durations relative to the video length."""
    bands = [(max(1, t_min // 32), max(1, t_min // 10)),
             (max(1, t_min // 8), max(1, t_min // 4)),
             (max(1, t_min // 4), max(1, t_min // 2))]
    return [list(bands[c % 3]) for c in range(num_classes)]


def class_signatures(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One unit vector per class; orthonormal rows when ``num_classes <= dim``."""
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0, keepdims=True)).T.copy()


def _place_events(spec: SyntheticSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros((length, spec.C), dtype=np.uint8)
    partners = {}
    for i, j, p in spec.co_occurrence_pairs:
        partners.setdefault(i, []).append((j, p))
    counts = rng.poisson(spec.events_per_class, size=spec.C)
    order = [(c, k) for c in range(spec.C) for k in range(counts[c])]
    rng.shuffle(order)
    for c, _ in order:
        lo, hi = spec.duration_ranges[c]
        dur = int(rng.integers(lo, hi + 1))
        group = [c] + [j for j, p in partners.get(c, ()) if rng.random() < p]
        for _attempt in range(10):
            start = int(rng.integers(0, length - dur + 1))
            window = labels[start:start + dur].copy()
            window[:, group] = 1
            if window.sum(axis=1).max() <= spec.max_concurrency:
                labels[start:start + dur] = window
                break
    return labels


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | int,
                       return_signatures: bool = False):
    """Random dense multi-label corpus whose tokens are noisy sums of class signatures.

    The last ``round(num_videos * test_fraction)`` videos form the test split.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    signatures = class_signatures(spec.C, spec.D, rng)
    n_test = int(round(spec.num_videos * spec.test_fraction))
    videos = []
    for v in range(spec.num_videos):
        length = int(rng.integers(spec.t_min, spec.t_max + 1))
        labels = _place_events(spec, length, rng)
        scale = np.ones(spec.C) if spec.amplitudes is None else np.asarray(spec.amplitudes, float)
        tokens = (labels * scale) @ signatures
        if spec.noise_sigma > 0:
            tokens = tokens + rng.normal(0.0, spec.noise_sigma, size=tokens.shape)
        split = "test" if v >= spec.num_videos - n_test else "train"
        videos.append(Video(FeatureSequence(tokens, f"vid{v:04d}"), LabelGrid(labels), split))
    if return_signatures:
        return videos, signatures
    return videos


def recover_labels(tokens: np.ndarray, signatures: np.ndarray) -> np.ndarray:
    """Least-squares class activations per step, rounded to {0, 1}."""
    coef, *_ = np.linalg.lstsq(signatures.T, np.asarray(tokens, dtype=np.float64).T, rcond=None)
    return (coef.T > 0.5).astype(np.uint8)
