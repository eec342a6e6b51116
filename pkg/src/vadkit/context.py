"""Per-video context memory: ranked clip lists, attention retrieval over
them, gated fusion into the current clip, and the co-training loop.

Three bounded lists are maintained online while a video streams: the K
lowest-scored clips seen so far (consensus normal context), the K highest
(abnormal context), and the K most recent (short-term history). A clip
queries each list with dot-product attention, and the retrieved summaries are
added to the clip feature through learned scalar gates before scoring.

List contents are data, never parameters: stored features carry no gradient.
With every list disabled the forward path degenerates to the plain detector,
and training reproduces the detector-only loop bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .detector import (
    AnomalyPredictor,
    ClipCache,
    MilHyper,
    Params,
    clip_backward,
    clip_forward,
    dataset_to_arrays,
    predictor_from_params,
    predictor_params,
    run_mil_training,
)
from .features import DatasetManifest
from .neural import DenseLayer, dense_forward, init_dense

ATTENTION_MODES = ("literal", "softmax")


@dataclass(frozen=True)
class LtcEntry:
    """One remembered clip: its ranking score, raw feature, and position.

    ``arrival`` is a per-video monotone counter used to break score ties
    toward the most recent entry.
    """

    score: float
    feature: np.ndarray
    clip_index: int
    arrival: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("non-finite feature")


@dataclass
class LtcState:
    """Bounded per-video memory; fresh (empty) at the start of every video."""

    k: int
    normal: tuple[LtcEntry, ...] = ()
    abnormal: tuple[LtcEntry, ...] = ()
    history: tuple[LtcEntry, ...] = ()
    next_arrival: int = 0

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if max(len(self.normal), len(self.abnormal), len(self.history)) > self.k:
            raise ValueError("list longer than capacity k")


def ltc_update(
    state: LtcState, score: float, feature: np.ndarray, clip_index: int
) -> LtcState:
    """Insert one scored clip, returning the re-ranked state.

    The normal list keeps the k lowest scores seen so far, the abnormal list
    the k highest, history the k most recent; equal scores prefer the more
    recent entry. The update is purely functional, so replaying a stream and
    streaming it incrementally agree exactly.
    """
    entry = LtcEntry(
        score=score,
        feature=np.asarray(feature, dtype=np.float64),
        clip_index=clip_index,
        arrival=state.next_arrival,
    )
    if state.k == 0:
        return replace(state, next_arrival=state.next_arrival + 1)
    # keeping only k entries is lossless: the k-best of (seen ∪ new) is
    # always contained in (k-best of seen) ∪ {new}
    normal = sorted(state.normal + (entry,), key=lambda e: (e.score, -e.arrival))[: state.k]
    abnormal = sorted(state.abnormal + (entry,), key=lambda e: (-e.score, -e.arrival))[: state.k]
    history = (state.history + (entry,))[-state.k :]
    return LtcState(
        k=state.k,
        normal=tuple(normal),
        abnormal=tuple(abnormal),
        history=tuple(history),
        next_arrival=state.next_arrival + 1,
    )


def list_features(entries: Sequence[LtcEntry]) -> np.ndarray:
    if not entries:
        raise ValueError("empty entry list")
    return np.stack([e.feature for e in entries])


def cross_attention(x: np.ndarray, feats: np.ndarray | Sequence, mode: str = "literal") -> np.ndarray:
    """Attend from x over a stack of stored features.

    Literal mode uses the raw dot products as weights: out = sum_j (x·v_j) v_j.
    Softmax mode rescales the dots by 1/sqrt(d) and normalizes them to a
    distribution. An empty list retrieves the zero vector.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if len(feats) == 0:
        return np.zeros_like(x)
    stack = np.asarray(feats, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[1] != x.shape[0]:
        raise ValueError(f"feature stack shape {stack.shape} incompatible with query {x.shape}")
    dots = stack @ x
    if mode == "literal":
        weights = dots
    else:
        scaled = dots / math.sqrt(x.shape[0])
        scaled = scaled - np.max(scaled)
        e = np.exp(scaled)
        weights = e / np.sum(e)
    return weights @ stack


@dataclass
class FusionGate:
    """Three scalar gates, one per list, each a d->1 dense layer squashed by
    a logistic; the gate value weights that list's retrieved summary."""

    gate_n: DenseLayer
    gate_a: DenseLayer
    gate_h: DenseLayer

    def __post_init__(self) -> None:
        for name, layer in (("n", self.gate_n), ("a", self.gate_a), ("h", self.gate_h)):
            if layer.n_out != 1:
                raise ValueError(f"gate_{name} must produce one pre-activation")


def init_gates(dim: int, rng: np.random.Generator) -> FusionGate:
    return FusionGate(
        gate_n=init_dense(dim, 1, rng),
        gate_a=init_dense(dim, 1, rng),
        gate_h=init_dense(dim, 1, rng),
    )


def gate_params(gates: FusionGate) -> Params:
    """Checkpoint-ordered gate parameters; arrays are shared, not copied."""
    return {
        "gate_n.w": gates.gate_n.weights,
        "gate_n.b": gates.gate_n.bias,
        "gate_a.w": gates.gate_a.weights,
        "gate_a.b": gates.gate_a.bias,
        "gate_h.w": gates.gate_h.weights,
        "gate_h.b": gates.gate_h.bias,
    }


def gates_from_params(params: Params) -> FusionGate:
    return FusionGate(
        gate_n=DenseLayer(params["gate_n.w"], params["gate_n.b"]),
        gate_a=DenseLayer(params["gate_a.w"], params["gate_a.b"]),
        gate_h=DenseLayer(params["gate_h.w"], params["gate_h.b"]),
    )


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def gate_value(layer: DenseLayer, x: np.ndarray) -> tuple[float, float]:
    """(gate weight in (0,1), pre-activation)."""
    z = float(dense_forward(layer, x)[0])
    return _sigmoid(z), z


def fuse(
    x: np.ndarray,
    terms: Sequence[tuple[float, np.ndarray | None]],
) -> np.ndarray:
    """x plus the weighted retrieved summaries; absent retrievals (None) are
    skipped outright so they contribute exactly nothing."""
    out = x
    for weight, vec in terms:
        if vec is None:
            continue
        if vec.shape != x.shape:
            raise ValueError(f"retrieval shape {vec.shape} != clip shape {x.shape}")
        out = out + weight * vec
    return out


@dataclass
class LtcConfig:
    """Memory capacity, attention flavor, and which lists participate."""

    k: int = 4
    attention: str = "softmax"
    use_normal: bool = True
    use_abnormal: bool = True
    use_history: bool = False

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention!r}")

    @property
    def any_list(self) -> bool:
        return self.use_normal or self.use_abnormal or self.use_history


@dataclass
class StreamClipCache:
    """Everything the backward pass needs for one streamed clip."""

    det: ClipCache
    x: np.ndarray
    # (params key prefix, gate weight, pre-activation, retrieved vector)
    terms: list[tuple[str, float, float, np.ndarray]] = field(default_factory=list)


def ltc_forward_stream(
    g: AnomalyPredictor,
    gates: FusionGate | None,
    config: LtcConfig,
    state: LtcState,
    x: np.ndarray,
    clip_index: int,
    selection_scorer: Callable[[np.ndarray], float] | None = None,
) -> tuple[np.ndarray, float, LtcState, StreamClipCache]:
    """One streaming step: retrieve from the current state, fuse, score the
    fused feature, then insert the clip into the state.

    The ranking score for list maintenance comes from selection_scorer on the
    raw clip when given (training: the frozen first-phase scorer); otherwise
    the live fused score just computed is used (inference).
    """
    cache = StreamClipCache(det=None, x=x)  # type: ignore[arg-type]
    lists = (
        ("gate_n", config.use_normal, state.normal, None if gates is None else gates.gate_n),
        ("gate_a", config.use_abnormal, state.abnormal, None if gates is None else gates.gate_a),
        ("gate_h", config.use_history, state.history, None if gates is None else gates.gate_h),
    )
    fused = x
    for key, enabled, entries, layer in lists:
        if not enabled or not entries or layer is None:
            continue
        retrieved = cross_attention(x, list_features(entries), config.attention)
        weight, pre = gate_value(layer, x)
        fused = fused + weight * retrieved
        cache.terms.append((key, weight, pre, retrieved))
    det_cache = clip_forward(g, fused)
    cache.det = det_cache
    score = det_cache.p
    ranking = score if selection_scorer is None else selection_scorer(x)
    new_state = ltc_update(state, ranking, x, clip_index)
    return fused, score, new_state, cache


def stream_video_scores(
    g: AnomalyPredictor,
    gates: FusionGate | None,
    config: LtcConfig,
    clips: np.ndarray,
    selection_scorer: Callable[[np.ndarray], float] | None = None,
) -> np.ndarray:
    """Anomaly score per clip for a whole video, memory starting empty."""
    state = LtcState(k=config.k)
    scores = np.empty(clips.shape[0], dtype=np.float64)
    for i in range(clips.shape[0]):
        _, scores[i], state, _ = ltc_forward_stream(
            g, gates, config, state, clips[i], i, selection_scorer
        )
    return scores


def stream_backward(
    params: Params,
    caches: list[StreamClipCache],
    sel: int,
    d_logits: np.ndarray,
) -> Params:
    """Gradients for the selected streamed clip: through the detector on the
    fused feature, and through each gate scalar (stored list contents are
    constants)."""
    g = predictor_from_params(params)
    cache = caches[sel]
    grads, gx = clip_backward(g, cache.det, d_logits)
    for key, weight, _pre, retrieved in cache.terms:
        d_weight = float(gx @ retrieved)
        d_pre = d_weight * weight * (1.0 - weight)
        grads[f"{key}.w"] = d_pre * cache.x[np.newaxis, :]
        grads[f"{key}.b"] = np.array([d_pre])
    return grads


@dataclass
class Phase2Result:
    predictor: AnomalyPredictor
    gates: FusionGate
    config: LtcConfig
    loss_trace: list[float]
    params: Params = field(default_factory=dict)


def frozen_scorer(g: AnomalyPredictor) -> Callable[[np.ndarray], float]:
    frozen = AnomalyPredictor(
        layer1=DenseLayer(g.layer1.weights.copy(), g.layer1.bias.copy()),
        layer2=DenseLayer(g.layer2.weights.copy(), g.layer2.bias.copy()),
    )
    return lambda x: clip_forward(frozen, x).p


def train_phase2(
    dataset: DatasetManifest,
    phase1_predictor: AnomalyPredictor,
    hyper: MilHyper,
    config: LtcConfig,
) -> Phase2Result:
    """Co-train detector and fusion gates with the memory in the loop.

    Per video the sampled clips stream in temporal order; list ranking uses
    the frozen first-phase scorer on raw features (detached), while the MIL
    tuple is built from the fused-feature scores. Deterministic given
    hyper.seed; with every list disabled the parameter trajectory of the
    detector equals continued first-phase training exactly.
    """
    if phase1_predictor.dim != dataset.dimension:
        raise ValueError(
            f"predictor expects dim {phase1_predictor.dim}, dataset has {dataset.dimension}"
        )
    detector_init = AnomalyPredictor(
        layer1=DenseLayer(phase1_predictor.layer1.weights.copy(), phase1_predictor.layer1.bias.copy()),
        layer2=DenseLayer(phase1_predictor.layer2.weights.copy(), phase1_predictor.layer2.bias.copy()),
    )
    gates = init_gates(dataset.dimension, np.random.default_rng([hyper.seed, 1]))
    params: Params = {**predictor_params(detector_init), **gate_params(gates)}

    videos = dataset_to_arrays(dataset)
    select = frozen_scorer(phase1_predictor)
    # ranking scores depend only on the frozen scorer and raw clips, so they
    # are computed once per video, not once per epoch
    frozen_scores = [np.array([select(clips[i]) for i in range(clips.shape[0])]) for clips, _ in videos]

    def forward(p: Params, vpos: int, clips: np.ndarray, idx: np.ndarray):
        g = predictor_from_params(p)
        gate_view = gates_from_params(p)
        state = LtcState(k=config.k)
        caches: list[StreamClipCache] = []
        scores = np.empty(len(idx), dtype=np.float64)
        ranks = frozen_scores[vpos]
        for pos, i in enumerate(idx):
            _, scores[pos], state, cache = ltc_forward_stream(
                g, gate_view, config, state, clips[i], int(i),
                selection_scorer=lambda _x, _r=ranks[i]: float(_r),
            )
            caches.append(cache)
        return scores, caches

    trace = run_mil_training(videos, params, forward, stream_backward, hyper)
    return Phase2Result(
        predictor=predictor_from_params(params),
        gates=gates_from_params(params),
        config=config,
        loss_trace=trace,
        params=params,
    )
