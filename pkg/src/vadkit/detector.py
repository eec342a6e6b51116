"""Clip-level anomaly scorer and its weakly-supervised training loop.

A two-layer perceptron maps a clip feature to two class logits; the
abnormal-class softmax probability is the clip's anomaly score. Supervision is
video-level only: per video, the highest-scoring sampled clip stands in for
the whole video, and binary cross-entropy over these (top score, video label)
tuples is minimized. Only the selected clip receives gradient.

The batch loop (`run_mil_training`) is shared with the context-memory
trainer: both phases plug in a per-video forward/backward pair, so a memory
configuration with every list disabled reproduces this module's training
bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import DatasetManifest, segment_sample_indices
from .neural import (
    AdamW,
    DenseLayer,
    LrSchedule,
    Params,
    dense_backward,
    dense_forward,
    init_dense,
    relu,
    relu_grad,
    schedule_lr,
    softmax_binary,
    softmax_binary_grad,
)

SCORE_EPS = 1e-7


@dataclass
class AnomalyPredictor:
    """Two dense layers: d -> hidden -> 2 logits (index 0 normal, 1 abnormal)."""

    layer1: DenseLayer
    layer2: DenseLayer

    def __post_init__(self) -> None:
        if self.layer2.n_out != 2:
            raise ValueError("layer2 must emit exactly 2 logits")
        if self.layer1.n_out != self.layer2.n_in:
            raise ValueError("layer1 output width must match layer2 input width")

    @property
    def dim(self) -> int:
        return self.layer1.n_in

    @property
    def hidden(self) -> int:
        return self.layer1.n_out


def init_predictor(dim: int, hidden: int, rng: np.random.Generator) -> AnomalyPredictor:
    return AnomalyPredictor(
        layer1=init_dense(dim, hidden, rng),
        layer2=init_dense(hidden, 2, rng),
    )


def predictor_params(g: AnomalyPredictor) -> Params:
    """Parameter dict in checkpoint order; arrays are shared, not copied."""
    return {
        "l1.w": g.layer1.weights,
        "l1.b": g.layer1.bias,
        "l2.w": g.layer2.weights,
        "l2.b": g.layer2.bias,
    }


def predictor_from_params(params: Params) -> AnomalyPredictor:
    """Build a predictor view over the given arrays (no copies), so in-place
    optimizer updates stay visible through the returned object."""
    return AnomalyPredictor(
        layer1=DenseLayer(weights=params["l1.w"], bias=params["l1.b"]),
        layer2=DenseLayer(weights=params["l2.w"], bias=params["l2.b"]),
    )


@dataclass
class ClipCache:
    """Forward intermediates for one clip, kept for the backward pass."""

    x: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    p: float


def clip_forward(g: AnomalyPredictor, x: np.ndarray) -> ClipCache:
    h_pre = dense_forward(g.layer1, x)
    h = relu(h_pre)
    logits = dense_forward(g.layer2, h)
    return ClipCache(x=x, h_pre=h_pre, h=h, logits=logits, p=softmax_binary(logits))


def clip_backward(
    g: AnomalyPredictor, cache: ClipCache, d_logits: np.ndarray
) -> tuple[Params, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the predictor parameters and the
    clip input, given the loss gradient at the logits."""
    gw2, gb2, gh = dense_backward(g.layer2, cache.h, d_logits)
    g_pre = relu_grad(cache.h_pre, gh)
    gw1, gb1, gx = dense_backward(g.layer1, cache.x, g_pre)
    return {"l1.w": gw1, "l1.b": gb1, "l2.w": gw2, "l2.b": gb2}, gx


def predict_score(g: AnomalyPredictor, x: np.ndarray) -> float:
    """Abnormal probability for one clip feature."""
    return clip_forward(g, np.asarray(x, dtype=np.float64)).p


def mil_select(scores: Sequence[float]) -> tuple[float, int]:
    """Maximum score and its first index under ties."""
    if len(scores) == 0:
        raise ValueError("empty score sequence")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return float(scores[best]), best


@dataclass
class MilTuple:
    """One video's (top clip score, video label) pair."""

    predicted: float
    label: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.predicted <= 1.0:
            raise ValueError(f"predicted score {self.predicted} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


def bce_loss(tuples: Sequence[MilTuple]) -> float:
    """Mean binary cross-entropy over (predicted, label) tuples; predictions
    are clamped to [eps, 1-eps] so a saturated score cannot produce -ln 0."""
    if len(tuples) == 0:
        raise ValueError("empty tuple set")
    total = 0.0
    for t in tuples:
        p = min(max(t.predicted, SCORE_EPS), 1.0 - SCORE_EPS)
        total += -(t.label * math.log(p) + (1 - t.label) * math.log(1.0 - p))
    return total / len(tuples)


def bce_grad(tuples: Sequence[MilTuple]) -> list[float]:
    """d(mean BCE)/d(predicted) per tuple; zero where the clamp is active."""
    n = len(tuples)
    out = []
    for t in tuples:
        if t.predicted < SCORE_EPS or t.predicted > 1.0 - SCORE_EPS:
            out.append(0.0)
            continue
        p = t.predicted
        out.append((-t.label / p + (1 - t.label) / (1.0 - p)) / n)
    return out


def score_logit(p: float) -> float:
    """log(p / (1-p)); for the binary softmax this equals the logit gap."""
    return math.log(p) - math.log1p(-p)


@dataclass
class MilHyper:
    """Hyperparameters for MIL training (both training phases)."""

    epochs: int = 30
    batch_size: int = 8
    clips_per_video: int = 32
    hidden: int = 128
    lr_max: float = 1e-5
    lr_min: float = 0.0
    warmup_epochs: int = 5
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    margin_mode: bool = False
    margin: float = 1.0
    augment_rotations: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.clips_per_video < 1:
            raise ValueError("epochs, batch_size and clips_per_video must be positive")


# Per-video callbacks the batch loop is generic over. video_pos identifies
# the video within the training list (for per-video side tables).
# forward: (params, video_pos, clips float64 (T,d), sampled indices) -> (scores (m,), cache)
# backward: (params, cache, selected position, d_logits (2,)) -> partial grads
VideoForward = Callable[[Params, int, np.ndarray, np.ndarray], tuple[np.ndarray, object]]
VideoBackward = Callable[[Params, object, int, np.ndarray], Params]


def batch_loss_and_grads(
    params: Params,
    batch: Sequence[tuple[int, np.ndarray, int, np.ndarray]],
    forward: VideoForward,
    backward: VideoBackward,
    *,
    margin_mode: bool = False,
    margin: float = 1.0,
) -> tuple[float, Params]:
    """One MIL batch: each (video_pos, clips, label, sampled indices) video
    contributes its top-scoring clip as a tuple; returns the batch loss and
    summed grads.

    Margin mode adds, per batch, a hinge in logit space between the
    best-scored abnormal video and the best-scored normal video.
    """
    tuples: list[MilTuple] = []
    infos = []
    for vpos, clips, label, idx in batch:
        scores, cache = forward(params, vpos, clips, idx)
        top, sel = mil_select(scores)
        tuples.append(MilTuple(predicted=top, label=label))
        infos.append((cache, sel))

    loss = bce_loss(tuples)
    d_p = bce_grad(tuples)
    d_z = [0.0] * len(tuples)

    if margin_mode:
        abn = [i for i, t in enumerate(tuples) if t.label == 1]
        nor = [i for i, t in enumerate(tuples) if t.label == 0]
        if abn and nor:
            ia = max(abn, key=lambda i: tuples[i].predicted)
            io = max(nor, key=lambda i: tuples[i].predicted)
            gap = score_logit(tuples[ia].predicted) - score_logit(tuples[io].predicted)
            hinge = margin - gap
            if hinge > 0.0:
                loss += hinge
                d_z[ia] -= 1.0
                d_z[io] += 1.0

    grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
    for (cache, sel), t, dp, dz in zip(infos, tuples, d_p, d_z):
        if dp == 0.0 and dz == 0.0:
            continue
        d_logits = dp * softmax_binary_grad(t.predicted)
        if dz != 0.0:
            # logit gap z = l_abn - l_nor
            d_logits = d_logits + dz * np.array([-1.0, 1.0])
        for key, value in backward(params, cache, sel, d_logits).items():
            grads[key] += value
    return loss, grads


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed orthogonal matrix (QR with sign correction)."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)


def run_mil_training(
    videos: Sequence[tuple[np.ndarray, int]],
    params: Params,
    forward: VideoForward,
    backward: VideoBackward,
    hyper: MilHyper,
) -> list[float]:
    """Shared MIL loop: shuffled batches of videos, cosine-with-warmup
    learning rate evaluated at each step's fractional epoch, one optimizer
    step per batch. Returns the per-epoch mean batch loss.

    Deterministic given hyper.seed: the only randomness is the epoch
    permutation, per-segment clip sampling, and (when enabled) the rotation
    augmentation, all drawn from one stream.

    With augment_rotations on, every video presentation is spun by a fresh
    random orthogonal matrix. Dot products and norms within a video are
    untouched, so anything a run learns is carried by the relational
    geometry of clips, never by absolute feature directions.
    """
    if not videos:
        raise ValueError("empty training set")
    rng = np.random.default_rng(hyper.seed)
    opt = AdamW(
        weight_decay=hyper.weight_decay,
        beta1=hyper.beta1,
        beta2=hyper.beta2,
        eps=hyper.eps,
    )
    sched = LrSchedule(
        warmup_epochs=min(hyper.warmup_epochs, hyper.epochs),
        total_epochs=hyper.epochs,
        lr_max=hyper.lr_max,
        lr_min=hyper.lr_min,
    )
    n = len(videos)
    steps_per_epoch = math.ceil(n / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    step = 0
    trace: list[float] = []
    for _epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, hyper.batch_size):
            batch = []
            for vi in order[start : start + hyper.batch_size]:
                clips, label = videos[vi]
                idx = segment_sample_indices(clips.shape[0], hyper.clips_per_video, rng)
                if hyper.augment_rotations:
                    clips = clips @ random_rotation(clips.shape[1], rng).T
                batch.append((int(vi), clips, label, idx))
            # fractional epoch of the *completed* step, so the first step
            # already has a nonzero rate and the last lands on lr_min
            lr = schedule_lr(sched, hyper.epochs * (step + 1) / total_steps)
            loss, grads = batch_loss_and_grads(
                params,
                batch,
                forward,
                backward,
                margin_mode=hyper.margin_mode,
                margin=hyper.margin,
            )
            opt.step(params, grads, lr)
            epoch_losses.append(loss)
            step += 1
        trace.append(float(np.mean(epoch_losses)))
    return trace


def raw_video_forward(
    params: Params, video_pos: int, clips: np.ndarray, idx: np.ndarray
) -> tuple[np.ndarray, list[ClipCache]]:
    """Score the sampled clips one at a time on raw features."""
    g = predictor_from_params(params)
    caches = [clip_forward(g, clips[i]) for i in idx]
    return np.array([c.p for c in caches]), caches


def raw_video_backward(
    params: Params, cache: list[ClipCache], sel: int, d_logits: np.ndarray
) -> Params:
    g = predictor_from_params(params)
    grads, _ = clip_backward(g, cache[sel], d_logits)
    return grads


@dataclass
class Phase1Result:
    predictor: AnomalyPredictor
    loss_trace: list[float]
    degenerate: bool = False
    params: Params = field(default_factory=dict)


def dataset_to_arrays(dataset: DatasetManifest) -> list[tuple[np.ndarray, int]]:
    """Training views: clip stacks promoted to float64 once, with labels."""
    return [(v.clips.astype(np.float64), v.label) for v in dataset.videos]


def train_phase1(
    dataset: DatasetManifest,
    hyper: MilHyper,
    init: AnomalyPredictor | None = None,
) -> Phase1Result:
    """Train the anomaly predictor from video-level labels.

    A single-class dataset trains anyway (only one branch of the objective is
    active) but is flagged as degenerate. `init` warm-starts from an existing
    predictor, e.g. to continue a previous run; parameters are copied.
    """
    labels = {v.label for v in dataset.videos}
    degenerate = len(labels) < 2
    if degenerate:
        warnings.warn(
            "training set contains a single label class; proceeding degenerately",
            stacklevel=2,
        )
    if init is None:
        g0 = init_predictor(dataset.dimension, hyper.hidden, np.random.default_rng(hyper.seed))
    else:
        if init.dim != dataset.dimension:
            raise ValueError(
                f"init predictor expects dim {init.dim}, dataset has {dataset.dimension}"
            )
        g0 = AnomalyPredictor(
            layer1=DenseLayer(init.layer1.weights.copy(), init.layer1.bias.copy()),
            layer2=DenseLayer(init.layer2.weights.copy(), init.layer2.bias.copy()),
        )
    params = predictor_params(g0)
    trace = run_mil_training(
        dataset_to_arrays(dataset),
        params,
        raw_video_forward,
        raw_video_backward,
        hyper,
    )
    return Phase1Result(
        predictor=predictor_from_params(params),
        loss_trace=trace,
        degenerate=degenerate,
        params=params,
    )
