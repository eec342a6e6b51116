"""Deterministic synthetic clip-feature datasets with controllable
long-range context dependence.

Every video is built around a scene vector; clips are noisy copies of it.
Abnormal videos carry a contiguous anomalous window in their second half,
plus (hard mode) a single earlier "precursor" clip that reveals the video's
private marker direction while itself being labeled normal.

Two difficulty modes:

* easy - one global marker direction shared by all videos, no unit
  normalization, no precursor. Scene vectors are projected orthogonal to the
  marker, so the marker dot product alone separates the classes clip by clip.
* hard - every clip is unit-normalized and each abnormal video uses its own
  random marker, injected faintly in the window and at full strength in the
  precursor. A clip in isolation carries no usable norm or direction cue;
  only remembering the precursor reveals where the window points.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import DatasetManifest, VideoRecord, write_features, write_manifest

CLASS_EARLY = "window-early"
CLASS_LATE = "window-late"

_SPLIT_CODES = {"train": 0, "test": 1}
_MARKER_STREAM = 2


@dataclass
class SynthConfig:
    n_videos: int = 200
    abnormal_fraction: float = 0.5
    clips_per_video: int = 32
    dimension: int = 32
    noise_sigma: float = 0.1
    marker_alpha: float = 0.35
    precursor_window: float = 0.5
    anomaly_window_length: int = 4
    mode: str = "hard"
    seed: int = 0
    fps: float = 30.0
    frames_per_clip: int = 16

    def __post_init__(self) -> None:
        if self.n_videos < 2:
            raise ValueError("need at least two videos")
        if not 0.0 < self.abnormal_fraction < 1.0:
            raise ValueError("abnormal_fraction must lie strictly between 0 and 1")
        if self.marker_alpha < 0:
            raise ValueError("marker_alpha must be non-negative")
        if not 0.0 < self.precursor_window <= 1.0:
            raise ValueError("precursor_window must lie in (0, 1]")
        t = self.clips_per_video
        w = self.anomaly_window_length
        if not 0 < w < t:
            raise ValueError("anomaly window must be shorter than the video")
        if w > t - t // 2:
            raise ValueError("anomaly window does not fit in the second half")
        if self.mode not in ("easy", "hard"):
            raise ValueError(f"mode must be 'easy' or 'hard', got {self.mode!r}")
        if self.dimension < 2:
            raise ValueError("dimension must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def global_marker(config: SynthConfig) -> np.ndarray:
    """The shared easy-mode marker direction for a given seed."""
    rng = np.random.default_rng([config.seed, _MARKER_STREAM])
    return _unit(rng.normal(size=config.dimension))


def synthesize(config: SynthConfig, split: str = "train") -> DatasetManifest:
    """Generate one split in memory.

    Deterministic: every video draws from its own generator keyed by
    (seed, split, video index), so videos may be produced in any order or in
    parallel. Test-split videos carry frame labels; train-split ones do not.
    """
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    t = config.clips_per_video
    d = config.dimension
    w = config.anomaly_window_length
    half = t // 2
    n_abnormal = round(config.n_videos * config.abnormal_fraction)
    marker_global = global_marker(config) if config.mode == "easy" else None

    videos: list[VideoRecord] = []
    for vi in range(config.n_videos):
        rng = np.random.default_rng([config.seed, _SPLIT_CODES[split], vi])
        label = 1 if vi < n_abnormal else 0
        scene = rng.normal(size=d)
        if marker_global is not None:
            # scene component along the marker would blur the class margin
            scene = scene - (scene @ marker_global) * marker_global

        clip_labels = np.zeros(t, dtype=np.int8)
        clips = np.empty((t, d), dtype=np.float64)
        for i in range(t):
            clips[i] = scene + config.noise_sigma * rng.normal(size=d)

        class_name = None
        if label == 1:
            start = int(rng.integers(half, t - w + 1))
            mid = (half + (t - w)) // 2
            class_name = CLASS_EARLY if start <= mid else CLASS_LATE
            if config.mode == "hard":
                marker = _unit(rng.normal(size=d))
                pre_limit = max(1, int(config.precursor_window * t))
                pre_pos = int(rng.integers(0, pre_limit))
                clips[pre_pos] = scene + marker + config.noise_sigma * rng.normal(size=d)
            else:
                marker = marker_global
            for i in range(start, start + w):
                clips[i] = scene + config.marker_alpha * marker + config.noise_sigma * rng.normal(size=d)
                clip_labels[i] = 1

        if config.mode == "hard":
            clips = clips / np.linalg.norm(clips, axis=1, keepdims=True)

        frame_labels = None
        if split == "test":
            frame_labels = np.repeat(clip_labels, config.frames_per_clip)
        videos.append(
            VideoRecord(
                id=f"{split}-{config.mode}-{vi:04d}",
                label=label,
                clips=clips.astype(np.float32),
                fps=config.fps,
                frames_per_clip=config.frames_per_clip,
                class_name=class_name,
                frame_labels=frame_labels,
            )
        )
    return DatasetManifest(dimension=d, videos=videos, split=split)


def generate(config: SynthConfig, out_dir: str | Path, split: str = "train") -> Path:
    """Write one split to disk: per-video feature files, a JSONL manifest,
    and the generating config echoed as JSON. Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = synthesize(config, split)
    for v in manifest.videos:
        path = out_dir / f"{v.id}.vadf"
        write_features(v, path)
        v.feature_path = str(path)
    manifest_path = out_dir / f"{split}.jsonl"
    write_manifest(manifest, manifest_path)
    config_path = out_dir / "synth_config.json"
    config_path.write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")
    return manifest_path
