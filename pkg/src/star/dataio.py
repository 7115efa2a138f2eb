"""Feature/annotation files, weak-label derivation and the synthetic generator."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEAT_MAGIC = b"STARFEAT1"
FEAT_HEADER = len(FEAT_MAGIC) + 16
STREAMS = ("rgb", "flow")
MANIFEST_NAME = "manifest.json"


class DataError(Exception):
    pass


def default_data_dir() -> Path:
    return Path(os.environ.get("STAR_DATA_DIR", "star_data"))


@dataclass(frozen=True)
class GtInstance:
    video_id: str
    cls: int
    start: float  # seconds
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"instance [{self.start}, {self.end}] of {self.video_id} is empty")


@dataclass
class VideoAnnotation:
    instances: list[GtInstance]
    weak_labels: list[int]
    counts: list[int]


@dataclass
class VideoRecord:
    id: str
    duration: float
    segment_duration: float
    features: dict[str, np.ndarray]
    annotation: VideoAnnotation
    split: str = "train"

    @property
    def N(self) -> int:
        return next(iter(self.features.values())).shape[0]

    def segments_to_seconds(self, start: int, end: int) -> tuple[float, float]:
        """Inclusive segment range to a [start, end) time span."""
        return start * self.segment_duration, (end + 1) * self.segment_duration


def derive_weak_labels(instances: Sequence[GtInstance], end_class: int) -> tuple[list[int], list[int]]:
    """Distinct classes in ascending order with END appended, and their counts."""
    counts: dict[int, int] = {}
    for inst in instances:
        if not 0 <= inst.cls < end_class:
            raise ValueError(f"class {inst.cls} outside [0, {end_class})")
        counts[inst.cls] = counts.get(inst.cls, 0) + 1
    labels = sorted(counts)
    return labels + [end_class], [counts[c] for c in labels] + [0]


def make_annotation(instances: Sequence[GtInstance], end_class: int) -> VideoAnnotation:
    labels, counts = derive_weak_labels(instances, end_class)
    return VideoAnnotation(list(instances), labels, counts)


# ---------------------------------------------------------------------------
# binary features
# ---------------------------------------------------------------------------

def write_feature_file(path: Path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f8")
    if feats.ndim != 2:
        raise ValueError("features must be N x K")
    n, k = feats.shape
    path.write_bytes(FEAT_MAGIC + struct.pack("<QQ", n, k) + feats.tobytes())


def read_feature_file(path: Path, video_id: str = "?") -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"video {video_id}: cannot read {path}: {exc}") from None
    if len(data) < FEAT_HEADER:
        raise DataError(f"video {video_id}: {path} truncated at byte offset {len(data)} "
                        f"inside the {FEAT_HEADER}-byte header")
    if not data.startswith(FEAT_MAGIC):
        raise DataError(f"video {video_id}: {path} has bad magic")
    n, k = struct.unpack("<QQ", data[len(FEAT_MAGIC):FEAT_HEADER])
    expected = FEAT_HEADER + 8 * n * k
    if len(data) != expected:
        raise DataError(f"video {video_id}: {path} truncated at byte offset {len(data)}, "
                        f"expected {expected} bytes for N={n}, K={k}")
    arr = np.frombuffer(data, dtype="<f8", offset=FEAT_HEADER).reshape(n, k).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"video {video_id}: {path} contains NaN/Inf")
    return arr


def _annotation_json(rec: VideoRecord) -> dict:
    ann = rec.annotation
    return {
        "id": rec.id,
        "duration": round(rec.duration, 3),
        "segment_duration": round(rec.segment_duration, 3),
        "instances": [{"class": i.cls, "start": round(i.start, 3), "end": round(i.end, 3)}
                      for i in ann.instances],
        "weak_labels": ann.weak_labels,
        "counts": ann.counts,
    }


def _checksum(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def save_features(records: Sequence[VideoRecord], directory: str | Path) -> Path:
    """Write one binary per video per stream plus an annotation JSON; returns the manifest."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    (directory / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        streams = {}
        for s, feats in rec.features.items():
            rel = f"features/{rec.id}.{s}.bin"
            write_feature_file(directory / rel, feats)
            streams[s] = rel
        ann_rel = f"annotations/{rec.id}.json"
        (directory / ann_rel).write_text(json.dumps(_annotation_json(rec), indent=1))
        files = [directory / streams[s] for s in sorted(streams)] + [directory / ann_rel]
        entries.append({
            "id": rec.id,
            "split": rec.split,
            "duration": round(rec.duration, 3),
            "segment_duration": round(rec.segment_duration, 3),
            "N": int(rec.N),
            "K": int(next(iter(rec.features.values())).shape[1]),
            "streams": streams,
            "annotation": ann_rel,
            "checksum": _checksum(files),
        })
    manifest = directory / MANIFEST_NAME
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest


def entry_checksum(entry: dict, root: Path) -> str:
    files = [root / entry["streams"][s] for s in sorted(entry["streams"])]
    return _checksum(files + [root / entry["annotation"]])


def load_annotation(path: Path, video_id: str) -> tuple[VideoAnnotation, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"video {video_id}: cannot read annotation {path}: {exc}") from None
    instances = [GtInstance(video_id, int(i["class"]), float(i["start"]), float(i["end"]))
                 for i in raw["instances"]]
    ann = VideoAnnotation(instances, [int(x) for x in raw["weak_labels"]],
                          [int(x) for x in raw["counts"]])
    return ann, raw


def load_features(manifest: str | Path, split: str | None = None,
                  verify_checksum: bool = False) -> list[VideoRecord]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    try:
        entries = json.loads(manifest.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from None
    root = manifest.parent
    records = []
    for e in entries:
        vid = e["id"]
        if split is not None and e.get("split", "train") != split:
            continue
        if verify_checksum and "checksum" in e and entry_checksum(e, root) != e["checksum"]:
            raise DataError(f"video {vid}: checksum mismatch")
        feats = {s: read_feature_file(root / rel, vid) for s, rel in e["streams"].items()}
        for s, arr in feats.items():
            if "N" in e and arr.shape != (e["N"], e["K"]):
                raise DataError(f"video {vid}: stream {s} has shape {arr.shape}, "
                                f"manifest says N={e['N']}, K={e['K']}")
        shapes = {a.shape for a in feats.values()}
        if len(shapes) != 1:
            raise DataError(f"video {vid}: streams disagree on shape {sorted(shapes)}")
        ann, _ = load_annotation(root / e["annotation"], vid)
        records.append(VideoRecord(vid, float(e["duration"]), float(e["segment_duration"]),
                                   feats, ann, e.get("split", "train")))
    return records


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_classes: int = 5          # excluding END
    K: int = 16
    N: int = 60
    n_train: int = 200
    n_test: int = 50
    actions_min: int = 1
    actions_max: int = 3
    length_min: int = 4
    length_max: int = 12
    separation: float = 0.5       # minimum pairwise cosine distance of prototypes
    noise_sigma: float = 0.1
    background_sigma: float = 0.1
    segment_duration: float = 0.5
    cooccurrence: bool = False    # allow instances of different classes to overlap
    seed: int = 0
    streams: tuple[str, ...] = STREAMS

    def __post_init__(self):
        for f in ("num_classes", "K", "N", "actions_min", "length_min"):
            if getattr(self, f) <= 0:
                raise ValueError(f"SynthConfig.{f} must be positive")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("SynthConfig split sizes must be >= 0")
        if self.actions_max < self.actions_min:
            raise ValueError("SynthConfig.actions_max must be >= actions_min")
        if self.length_max < self.length_min:
            raise ValueError("SynthConfig.length_max must be >= length_min")
        if self.length_max > self.N:
            raise ValueError("SynthConfig.length_max exceeds N")
        if self.noise_sigma < 0 or self.background_sigma < 0 or self.segment_duration <= 0:
            raise ValueError("SynthConfig noise levels must be >= 0 and segment_duration > 0")
        self.streams = tuple(self.streams)


def make_prototypes(n: int, k: int, separation: float, rng: np.random.Generator,
                    max_tries: int = 2000) -> np.ndarray:
    """``n`` unit vectors in R^k with pairwise cosine distance >= ``separation``."""
    # a regular simplex is the best any arrangement can do
    bound = 2.0 if n <= 1 else (1.0 + 1.0 / (n - 1) if n <= k + 1 else 2.0)
    if separation > bound + 1e-12:
        raise ValueError(f"separation {separation} infeasible for {n} prototypes in {k} dims")
    if n <= k and separation <= 1.0:
        q, _ = np.linalg.qr(rng.standard_normal((k, n)))
        return q.T.copy()
    for _ in range(max_tries):
        v = rng.standard_normal((n, k))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cos = v @ v.T
        np.fill_diagonal(cos, -1.0)
        if 1.0 - cos.max() >= separation:
            return v
    raise ValueError(f"could not place {n} prototypes in {k} dims with separation {separation}")


def _place_intervals(lengths: Sequence[int], N: int, rng: np.random.Generator,
                     allow_overlap: bool) -> list[tuple[int, int]] | None:
    spans: list[tuple[int, int]] = []
    for length in lengths:
        for _ in range(200):
            start = int(rng.integers(0, N - length + 1))
            end = start + length - 1
            # keep at least one background segment between instances
            if allow_overlap or all(end + 1 < s or start > e + 1 for s, e in spans):
                spans.append((start, end))
                break
        else:
            return None
    return spans


def render_video(video_id: str, layout: Sequence[tuple[int, int, int]], protos: dict[str, np.ndarray],
                 cfg: SynthConfig, rng: np.random.Generator, split: str) -> VideoRecord:
    """Background noise everywhere, prototype + noise over each (class, start, end) span."""
    feats = {}
    for s in cfg.streams:
        signal = np.zeros((cfg.N, cfg.K))
        active = np.zeros(cfg.N, dtype=bool)
        for c, a, b in layout:
            signal[a:b + 1] += protos[s][c]  # overlapping instances superpose
            active[a:b + 1] = True
        sigma = np.where(active, cfg.noise_sigma, cfg.background_sigma)[:, None]
        feats[s] = signal + sigma * rng.standard_normal((cfg.N, cfg.K))
    dt = cfg.segment_duration
    instances = [GtInstance(video_id, c, round(a * dt, 3), round((b + 1) * dt, 3))
                 for c, a, b in sorted(layout, key=lambda x: (x[1], x[0]))]
    return VideoRecord(video_id, round(cfg.N * dt, 3), dt, feats,
                       make_annotation(instances, cfg.num_classes), split)


def random_layout(cfg: SynthConfig, rng: np.random.Generator,
                  classes: Sequence[int] | None = None) -> list[tuple[int, int, int]]:
    while True:
        if classes is None:
            n = int(rng.integers(cfg.actions_min, cfg.actions_max + 1))
            cls = [int(c) for c in rng.integers(0, cfg.num_classes, size=n)]
        else:
            cls = list(classes)
        lengths = [int(x) for x in rng.integers(cfg.length_min, cfg.length_max + 1, size=len(cls))]
        spans = _place_intervals(lengths, cfg.N, rng, cfg.cooccurrence)
        if spans is not None:
            return [(c, a, b) for c, (a, b) in zip(cls, spans)]


@dataclass
class SynthDataset:
    train: list[VideoRecord]
    test: list[VideoRecord]
    prototypes: dict[str, np.ndarray]
    config: SynthConfig
    rng: np.random.Generator = field(repr=False, default=None)

    def extra_videos(self, n: int, classes: Sequence[int] | None = None, prefix: str = "extra",
                     seed_offset: int = 1) -> list[VideoRecord]:
        """More videos drawn from the same prototypes (own RNG stream).

        ``classes`` fixes the multiset of instance classes in every video.
        """
        rng = np.random.default_rng([self.config.seed, seed_offset])
        out = []
        for j in range(n):
            layout = random_layout(self.config, rng, classes)
            out.append(render_video(f"{prefix}_{j:04d}", layout, self.prototypes, self.config,
                                    rng, prefix))
        return out


def synthesize_dataset(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    protos = {s: make_prototypes(cfg.num_classes, cfg.K, cfg.separation, rng) for s in cfg.streams}
    splits = {"train": [], "test": []}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        for j in range(count):
            layout = random_layout(cfg, rng)
            splits[split].append(render_video(f"{split}_{j:04d}", layout, protos, cfg, rng, split))
    return SynthDataset(splits["train"], splits["test"], protos, cfg, rng)
