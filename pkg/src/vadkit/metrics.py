"""Frame-level ROC/AUC evaluation.

Clip scores are expanded to per-frame scores by tiling each clip's score over
its frame span, then pooled across videos into a single ROC. Two headline
numbers: the AUC over every test video's frames, and the AUC restricted to
frames of abnormal-labeled videos (plus a per-class breakdown of the latter).
Ties receive half credit (Mann-Whitney convention).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .context import FusionGate, LtcConfig, stream_video_scores
from .detector import AnomalyPredictor, clip_forward
from .features import DatasetManifest, VideoRecord, segment_bounds

VideoScorer = Callable[[np.ndarray], np.ndarray]


def baseline_scorer(g: AnomalyPredictor) -> VideoScorer:
    """Clip-by-clip scoring on raw features, no memory."""

    def scorer(clips: np.ndarray) -> np.ndarray:
        return np.array([clip_forward(g, clips[i]).p for i in range(clips.shape[0])])

    return scorer


def context_scorer(g: AnomalyPredictor, gates: FusionGate, config: LtcConfig) -> VideoScorer:
    """Streaming scorer with the context memory in the loop; list ranking
    uses the live fused score of each clip."""

    def scorer(clips: np.ndarray) -> np.ndarray:
        return stream_video_scores(g, gates, config, clips)

    return scorer


def expand_clip_to_frames(
    clip_scores: Sequence[float], frames_per_clip: int, total_frames: int
) -> np.ndarray:
    """Tile clip scores over the video's frames.

    The frame range is cut into one contiguous near-equal span per clip
    (earlier spans larger), and every frame in a span takes its clip's score.
    When the clip count times frames_per_clip equals total_frames the spans
    are exactly frames_per_clip wide.
    """
    scores = np.asarray(clip_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise ValueError("clip scores must be a nonempty vector")
    if frames_per_clip < 1:
        raise ValueError("frames_per_clip must be positive")
    if total_frames < scores.shape[0]:
        raise ValueError(
            f"cannot spread {scores.shape[0]} clip scores over {total_frames} frames"
        )
    out = np.empty(total_frames, dtype=np.float64)
    for s, (start, end) in enumerate(segment_bounds(total_frames, scores.shape[0])):
        out[start:end] = scores[s]
    return out


def _validated_pool(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if scores.shape[0] == 0:
        raise ValueError("empty pool")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores, labels.astype(np.int64)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC by sort-and-rank: P(pos > neg) + 0.5 P(pos == neg)."""
    scores, labels = _validated_pool(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both label classes must be present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0  # average 1-based rank of the tie group
        i = j + 1
    pos_rank_sum = float(ranks[labels[order] == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> np.ndarray:
    """(fpr, tpr) pairs of the ROC curve, one row per distinct threshold,
    starting at (0,0); tied scores collapse into a single point."""
    scores, labels = _validated_pool(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined: both label classes must be present")
    desc = np.argsort(-scores, kind="mergesort")
    s = scores[desc]
    l = labels[desc]
    tps = np.cumsum(l)
    fps = np.cumsum(1 - l)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    fpr = fps[last_of_group] / n_neg
    tpr = tps[last_of_group] / n_pos
    return np.column_stack([np.r_[0.0, fpr], np.r_[0.0, tpr]])


@dataclass
class ScoredFrames:
    """One test video's per-frame scores and ground-truth labels."""

    video_id: str
    scores: np.ndarray
    labels: np.ndarray
    video_label: int
    class_name: str | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length vectors")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")


def score_test_video(scorer: VideoScorer, record: VideoRecord) -> ScoredFrames:
    if record.frame_labels is None:
        raise ValueError(f"video {record.id!r} carries no frame labels; cannot evaluate")
    clips = record.clips.astype(np.float64)
    clip_scores = scorer(clips)
    frame_scores = expand_clip_to_frames(
        clip_scores, record.frames_per_clip, record.total_frames
    )
    return ScoredFrames(
        video_id=record.id,
        scores=frame_scores,
        labels=record.frame_labels,
        video_label=record.label,
        class_name=record.class_name,
    )


def score_dataset(dataset: DatasetManifest, scorer: VideoScorer) -> list[ScoredFrames]:
    return [score_test_video(scorer, v) for v in dataset.videos]


def pool_frames(frames: Sequence[ScoredFrames]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate every video's frame scores and labels into one pool."""
    if not frames:
        raise ValueError("no scored videos")
    return (
        np.concatenate([f.scores for f in frames]),
        np.concatenate([f.labels for f in frames]),
    )


_pool = pool_frames


def auc_overall(frames: Sequence[ScoredFrames]) -> float:
    """AUC of every frame of every test video pooled together."""
    if not frames:
        raise ValueError("no scored videos")
    return roc_auc(*_pool(frames))


def auc_abnormal(frames: Sequence[ScoredFrames]) -> float:
    """AUC over frames of abnormal-labeled videos only."""
    abnormal = [f for f in frames if f.video_label == 1]
    if not abnormal:
        raise ValueError("no abnormal videos in the test set")
    return roc_auc(*_pool(abnormal))


def classwise_auc(frames: Sequence[ScoredFrames]) -> dict[str, float]:
    """Abnormal-video AUC per anomaly class; classes whose pooled frames
    carry a single label are omitted with a warning."""
    groups: dict[str, list[ScoredFrames]] = {}
    for f in frames:
        if f.video_label == 1 and f.class_name is not None:
            groups.setdefault(f.class_name, []).append(f)
    out: dict[str, float] = {}
    for name in sorted(groups):
        try:
            out[name] = roc_auc(*_pool(groups[name]))
        except ValueError:
            warnings.warn(
                f"class {name!r} has single-label frames; omitted from class-wise AUC",
                stacklevel=2,
            )
    return out


@dataclass
class EvalReport:
    """Headline metrics plus the configuration that produced them."""

    auc_overall: float
    auc_abnormal: float
    classwise: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for label, value in (("auc_overall", self.auc_overall), ("auc_abnormal", self.auc_abnormal)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} = {value} outside [0, 1]")
        for name, value in self.classwise.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"classwise[{name}] = {value} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "auc_overall": self.auc_overall,
            "auc_abnormal": self.auc_abnormal,
            "classwise": self.classwise,
            "config": self.config,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def evaluate_frames(frames: Sequence[ScoredFrames], config: dict | None = None) -> EvalReport:
    return EvalReport(
        auc_overall=auc_overall(frames),
        auc_abnormal=auc_abnormal(frames),
        classwise=classwise_auc(frames),
        config=config or {},
    )


def evaluate(dataset: DatasetManifest, scorer: VideoScorer, config: dict | None = None) -> EvalReport:
    """Score a test manifest and compute the full report."""
    return evaluate_frames(score_dataset(dataset, scorer), config)
