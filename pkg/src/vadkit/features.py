"""Clip-feature data model: binary feature files, JSONL manifests, and
segment sampling of clip sequences.

A video is an ordered stack of fixed-dimension clip feature vectors plus a
video-level binary label; test-split videos also carry per-frame labels. The
on-disk layout is a tiny custom binary format (header + float32 payload) so
round-trips are bit-exact, and a one-JSON-object-per-line manifest that ties
feature files to labels and timing metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VADF"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIII")  # magic, version, clip_count, dim


@dataclass
class VideoRecord:
    """One video: clip features (T, d) float32, label, and timing metadata.

    ``frame_labels`` is test-time only; when present its length must equal
    ``clip count * frames_per_clip`` and a label-0 video must be all zeros.
    """

    id: str
    label: int
    clips: np.ndarray
    fps: float = 30.0
    frames_per_clip: int = 16
    class_name: str | None = None
    frame_labels: np.ndarray | None = None
    feature_path: str | None = None

    def __post_init__(self) -> None:
        self.clips = np.asarray(self.clips, dtype=np.float32)
        if self.clips.ndim != 2 or self.clips.shape[1] < 1:
            raise ValueError("clips must be a (T, d) array with d >= 1")
        if not np.all(np.isfinite(self.clips)):
            raise ValueError("non-finite feature")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames_per_clip < 1:
            raise ValueError("frames_per_clip must be a positive integer")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int8)
            expected = self.clips.shape[0] * self.frames_per_clip
            if self.frame_labels.shape != (expected,):
                raise ValueError(
                    f"frame_labels length {self.frame_labels.shape} != "
                    f"clips * frames_per_clip = {expected}"
                )
            if not np.all((self.frame_labels == 0) | (self.frame_labels == 1)):
                raise ValueError("frame_labels must be binary")
            if self.label == 0 and np.any(self.frame_labels != 0):
                raise ValueError("a label-0 video must have all-zero frame_labels")

    @property
    def n_clips(self) -> int:
        return self.clips.shape[0]

    @property
    def dim(self) -> int:
        return self.clips.shape[1]

    @property
    def total_frames(self) -> int:
        return self.n_clips * self.frames_per_clip

    @property
    def clip_duration(self) -> float:
        """Seconds spanned by one clip."""
        return self.frames_per_clip / self.fps


@dataclass
class DatasetManifest:
    dimension: int
    videos: list[VideoRecord]
    split: str = "train"

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        for v in self.videos:
            if v.dim != self.dimension:
                raise ValueError(
                    f"video {v.id!r} has dim {v.dim}, manifest declares {self.dimension}"
                )

    def by_label(self, label: int) -> list[VideoRecord]:
        return [v for v in self.videos if v.label == label]


def write_features(record: VideoRecord, path: str | Path) -> None:
    """Write a record's clip features in the binary format (little-endian).

    Layout: magic "VADF", version u32, clip_count u32, dim u32, then
    clip_count * dim float32 values, clip-major.
    """
    clips = record.clips
    if not np.all(np.isfinite(clips)):
        raise ValueError("non-finite feature")
    payload = np.ascontiguousarray(clips, dtype="<f4").tobytes()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, clips.shape[0], clips.shape[1])
    Path(path).write_bytes(header + payload)


def read_features(path: str | Path, **meta) -> VideoRecord:
    """Read a feature file back into a VideoRecord.

    The binary format stores only the feature payload; label/fps/etc. come
    from the manifest and can be supplied as keyword arguments. A bare read
    yields a label-0 record named after the file.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"truncated feature file: {path}")
    magic, version, clip_count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported feature file version {version}")
    if dim == 0:
        raise ValueError(f"feature file declares dimension 0: {path}")
    expected = _HEADER.size + clip_count * dim * 4
    if len(raw) < expected:
        raise ValueError(
            f"truncated feature file: {path} declares {clip_count}x{dim} "
            f"but holds {len(raw) - _HEADER.size} payload bytes"
        )
    clips = np.frombuffer(raw, dtype="<f4", count=clip_count * dim, offset=_HEADER.size)
    clips = clips.reshape(clip_count, dim).copy()
    meta.setdefault("id", path.stem)
    meta.setdefault("label", 0)
    return VideoRecord(clips=clips, feature_path=str(path), **meta)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """One JSON object per line; feature paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent
    lines = []
    for v in manifest.videos:
        if v.feature_path is None:
            raise ValueError(f"video {v.id!r} has no feature_path")
        rel = Path(v.feature_path)
        try:
            rel = rel.relative_to(base)
        except ValueError:
            pass
        row: dict = {
            "id": v.id,
            "label": int(v.label),
            "feature_path": str(rel),
            "fps": float(v.fps),
            "frames_per_clip": int(v.frames_per_clip),
        }
        if v.class_name is not None:
            row["class_name"] = v.class_name
        if v.frame_labels is not None:
            row["frame_labels"] = [int(x) for x in v.frame_labels]
        lines.append(json.dumps(row, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, split: str = "train") -> DatasetManifest:
    """Load a JSONL manifest, reading every referenced feature file.

    All feature files must exist and agree on the feature dimension.
    """
    path = Path(path)
    base = path.parent
    videos: list[VideoRecord] = []
    dim: int | None = None
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            feature_path = base / row["feature_path"]
            if not feature_path.exists():
                raise FileNotFoundError(
                    f"{path}:{line_no}: feature file not found: {feature_path}"
                )
            record = read_features(
                feature_path,
                id=row["id"],
                label=int(row["label"]),
                fps=float(row.get("fps", 30.0)),
                frames_per_clip=int(row.get("frames_per_clip", 16)),
                class_name=row.get("class_name"),
                frame_labels=row.get("frame_labels"),
            )
            if dim is None:
                dim = record.dim
            elif record.dim != dim:
                raise ValueError(
                    f"{path}:{line_no}: feature file declares dim {record.dim}, "
                    f"manifest so far has dim {dim}"
                )
            videos.append(record)
    if dim is None:
        raise ValueError(f"empty manifest: {path}")
    return DatasetManifest(dimension=dim, videos=videos, split=split)


def segment_bounds(n_items: int, n_segments: int) -> list[tuple[int, int]]:
    """Contiguous near-equal [start, end) spans tiling range(n_items).

    Earlier segments take the remainder, so 10 items over 3 segments gives
    spans of sizes 4, 3, 3.
    """
    if n_segments <= 0:
        raise ValueError("segment count must be positive")
    if n_items < n_segments:
        raise ValueError(f"cannot cut {n_items} items into {n_segments} segments")
    base, extra = divmod(n_items, n_segments)
    bounds = []
    start = 0
    for s in range(n_segments):
        size = base + (1 if s < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def segment_sample_indices(
    n_clips: int, m: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """One clip index per segment: floor-midpoint when rng is None, else
    uniform within the segment. m is clamped to n_clips."""
    if m <= 0:
        raise ValueError("m must be positive")
    if n_clips == 0:
        raise ValueError("empty clip sequence")
    m = min(m, n_clips)
    indices = np.empty(m, dtype=np.int64)
    for s, (start, end) in enumerate(segment_bounds(n_clips, m)):
        if rng is None:
            indices[s] = start + (end - start - 1) // 2
        else:
            indices[s] = int(rng.integers(start, end))
    return indices


def segment_and_sample(
    clips: np.ndarray, m: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Partition clips into m contiguous segments and pick one clip from each.

    Deterministic mode (rng=None) picks the floor-midpoint of every segment,
    so repeated calls are identical; random mode samples uniformly per segment
    from the given generator. With m > len(clips), m is clamped.
    """
    clips = np.asarray(clips)
    idx = segment_sample_indices(clips.shape[0], m, rng)
    return clips[idx]
