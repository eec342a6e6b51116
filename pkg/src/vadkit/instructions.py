"""Pseudo-instruction generation and the third training phase.

Clip scores become timestamped question/answer text pairs; each pair carries
an anomaly prompt (the raw clip feature stacked with its context-fused
version). A small projection maps the stacked prompt into a token-embedding
space, and a toy decoder (per-position affine map plus softmax over a small
vocabulary) stands in for a frozen language model so the cross-entropy
gradient path through the projection is real and testable. Detector and gate
parameters are never touched in this phase.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import FusionGate, LtcConfig, LtcState, ltc_forward_stream
from .detector import AnomalyPredictor, mil_select
from .features import DatasetManifest
from .neural import (
    AdamW,
    DenseLayer,
    LrSchedule,
    Params,
    dense_backward,
    dense_forward,
    init_dense,
    schedule_lr,
)

PAD_WORD = "<pad>"
UNK_WORD = "<unk>"
VIDEO_TOKENS_WORD = "<video-tokens>"
VIDEO_TOKENS_PLACEHOLDER = "[Video Tokens]"

QUESTION_TEMPLATE = "### Human: <Video> [Video Tokens] </video> {description} {question}"
DEFAULT_QUESTION = "Is there any anomaly in the video?"
ANSWER_PREFIX = "### Assistant: "
NO_ANOMALY_ANSWER = ANSWER_PREFIX + "No, there is no anomaly in the video."
CAPTION_QUESTION = "What is happening in the video?"

PROB_EPS = 1e-12

# stands in for a web-scale caption corpus: fifty short everyday scenes
AUXILIARY_CAPTIONS: tuple[tuple[str, str], ...] = (
    ("A quiet suburban street at noon.", "A man walks his dog past parked cars."),
    ("A small kitchen in the morning.", "A woman pours coffee into a white mug."),
    ("A city park on a sunny day.", "Children play frisbee on the open lawn."),
    ("A two lane road in light rain.", "Cars drive slowly with their wipers on."),
    ("A supermarket aisle.", "A shopper compares two boxes of cereal."),
    ("A home office with a desk lamp.", "A person types steadily on a laptop."),
    ("A river bank at sunrise.", "An angler casts a fishing line into the water."),
    ("A school gymnasium.", "Students practice free throws at one hoop."),
    ("A backyard garden.", "Someone waters tomato plants with a green can."),
    ("A train platform in the evening.", "Commuters board a train as doors open."),
    ("A bakery counter.", "A baker slides fresh loaves onto a rack."),
    ("A residential driveway.", "A teenager washes a car with a soapy sponge."),
    ("A library reading room.", "A student turns pages and takes notes."),
    ("A pedestrian crossing.", "People cross the street when the light turns green."),
    ("A workshop bench.", "A carpenter sands the edge of a wooden board."),
    ("A hotel lobby.", "A guest wheels a suitcase toward the front desk."),
    ("A beach boardwalk.", "Joggers pass a vendor selling cold drinks."),
    ("A bus interior during the day.", "Passengers sit quietly while the bus moves."),
    ("A laundromat.", "A customer loads towels into a washing machine."),
    ("An office meeting room.", "Colleagues discuss a chart on the wall screen."),
    ("A farmers market stall.", "A vendor weighs apples for a customer."),
    ("A parking garage.", "A driver backs a hatchback into a narrow spot."),
    ("A hospital corridor.", "A nurse pushes a cart past open doors."),
    ("A music practice room.", "A violinist repeats a slow scale exercise."),
    ("An apartment balcony.", "A resident hangs laundry on a folding rack."),
    ("A gas station at dusk.", "A motorist refuels a sedan at pump three."),
    ("A dog park.", "Two dogs chase the same tennis ball."),
    ("A community pool.", "Swimmers do laps in marked lanes."),
    ("A barbershop.", "A barber trims a customer's hair with clippers."),
    ("A food court at lunch.", "Diners carry trays toward shared tables."),
    ("A bicycle lane downtown.", "A cyclist signals and turns at the corner."),
    ("A pottery studio.", "An artist shapes a bowl on a spinning wheel."),
    ("A grocery checkout.", "A cashier scans items and bags them."),
    ("A ski slope for beginners.", "A skier snowplows gently down the hill."),
    ("A tech repair counter.", "A technician replaces a cracked phone screen."),
    ("A ferry deck.", "Tourists photograph the skyline from the railing."),
    ("A climbing gym.", "A climber chalks up and starts an easy route."),
    ("An elementary classroom.", "A teacher writes spelling words on the board."),
    ("A sidewalk cafe.", "A waiter serves two espressos outdoors."),
    ("A vegetable garden plot.", "A gardener pulls weeds between lettuce rows."),
    ("A subway car.", "Riders hold the rail as the car sways."),
    ("A print shop.", "An employee refills paper in a large printer."),
    ("A tennis court.", "Two players warm up with baseline rallies."),
    ("A florist shop.", "A florist wraps a bouquet of yellow tulips."),
    ("A moving day scene.", "Movers carry a couch up the front steps."),
    ("An airport gate.", "Travelers line up as boarding begins."),
    ("A lakeside trail.", "A family pedals rented bikes along the shore."),
    ("A car wash bay.", "Brushes roll over a minivan in the tunnel."),
    ("A night market.", "A cook flips skewers over a small grill."),
    ("A recycling center.", "A worker sorts bottles into colored bins."),
)

_TOKEN_RE = re.compile(r"\d+\.\d+|\d+|[a-z']+|[^\s0-9a-z]")


def split_words(text: str) -> list[str]:
    """Lowercased word/numeral/punctuation tokens; decimals stay whole."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class ToyVocab:
    """Dense word-to-id table; id 0 pad, id 1 unknown, id 2 the video slot."""

    words: list[str]

    def __post_init__(self) -> None:
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        for special in (PAD_WORD, UNK_WORD, VIDEO_TOKENS_WORD):
            if special not in self.words:
                raise ValueError(f"vocabulary must contain {special!r}")
        self.ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD_WORD]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK_WORD]

    @property
    def video_id(self) -> int:
        return self.ids[VIDEO_TOKENS_WORD]


def build_vocab(texts: Sequence[str] = ()) -> ToyVocab:
    """Specials, template words, digits, punctuation, and every token of the
    given texts, in a deterministic order."""
    base_texts = [
        QUESTION_TEMPLATE.replace(VIDEO_TOKENS_PLACEHOLDER, ""),
        DEFAULT_QUESTION,
        CAPTION_QUESTION,
        NO_ANOMALY_ANSWER,
        ANSWER_PREFIX + "Yes, there are anomalies from 0s to 1s; and from 2.5s to 3.5s.",
    ]
    inventory: set[str] = set("0123456789") | {"s"}
    for text in list(base_texts) + list(texts):
        inventory.update(split_words(text))
    words = [PAD_WORD, UNK_WORD, VIDEO_TOKENS_WORD] + sorted(inventory)
    return ToyVocab(words=words)


def tokenize(text: str, vocab: ToyVocab) -> list[int]:
    """Token ids for plain text; out-of-vocabulary words map to unknown."""
    return [vocab.ids.get(w, vocab.unk_id) for w in split_words(text)]


def encode_question(text: str, vocab: ToyVocab) -> list[int]:
    """Tokenize a question whose text contains the video-token placeholder
    exactly once; the placeholder becomes a single reserved id."""
    parts = text.split(VIDEO_TOKENS_PLACEHOLDER)
    if len(parts) != 2:
        raise ValueError(
            f"question must contain {VIDEO_TOKENS_PLACEHOLDER!r} exactly once"
        )
    return tokenize(parts[0], vocab) + [vocab.video_id] + tokenize(parts[1], vocab)


def save_vocab(vocab: ToyVocab, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.words) + "\n")


def load_vocab(path: str | Path) -> ToyVocab:
    words = Path(path).read_text().splitlines()
    return ToyVocab(words=[w for w in words if w])


def format_seconds(value: float) -> str:
    """Seconds with trailing zeros trimmed: 2.0 -> "2", 1.5 -> "1.5"."""
    if value < 0:
        raise ValueError("negative time")
    return f"{value:.6g}"


def scores_to_intervals(
    scores: Sequence[float], clip_duration: float, threshold: float = 0.5
) -> list[tuple[float, float]]:
    """Maximal runs of clips scoring above the threshold, as (start, end)
    second pairs; clip i spans [i*dur, (i+1)*dur)."""
    if len(scores) == 0:
        raise ValueError("empty score sequence")
    if clip_duration <= 0:
        raise ValueError("clip_duration must be positive")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    intervals: list[tuple[float, float]] = []
    run_start: int | None = None
    for i, s in enumerate(scores):
        if s > threshold:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            intervals.append((run_start * clip_duration, i * clip_duration))
            run_start = None
    if run_start is not None:
        intervals.append((run_start * clip_duration, len(scores) * clip_duration))
    return intervals


def render_pair(
    intervals: Sequence[tuple[float, float]],
    video_description: str,
    question: str = DEFAULT_QUESTION,
) -> tuple[str, str]:
    """Question/answer text for a video given its anomalous time intervals."""
    q = QUESTION_TEMPLATE.format(description=video_description, question=question)
    if not intervals:
        return q, NO_ANOMALY_ANSWER
    spans = [
        f"from {format_seconds(a)}s to {format_seconds(b)}s" for a, b in intervals
    ]
    body = "; and ".join(spans)
    return q, f"{ANSWER_PREFIX}Yes, there are anomalies {body}."


@dataclass
class AnomalyPrompt:
    """Raw clip feature stacked with its context-fused counterpart."""

    raw: np.ndarray
    fused: np.ndarray

    def __post_init__(self) -> None:
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.fused = np.asarray(self.fused, dtype=np.float64)
        if self.raw.shape != self.fused.shape or self.raw.ndim != 1:
            raise ValueError("raw and fused features must be equal-length vectors")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.raw, self.fused])


@dataclass
class InstructionPair:
    """One training example: rendered text, its token ids, and the prompt."""

    question: str
    answer: str
    question_tokens: list[int]
    answer_tokens: list[int]
    prompt: AnomalyPrompt
    source: str
    video_id: str | None = None
    clip_index: int | None = None

    def __post_init__(self) -> None:
        if not self.answer_tokens:
            raise ValueError("answer_tokens must be nonempty")
        if self.source not in ("vad", "auxiliary"):
            raise ValueError(f"source must be 'vad' or 'auxiliary', got {self.source!r}")


def make_pair(
    question: str,
    answer: str,
    prompt: AnomalyPrompt,
    vocab: ToyVocab,
    source: str,
    video_id: str | None = None,
    clip_index: int | None = None,
) -> InstructionPair:
    question_tokens = encode_question(question, vocab)
    if question_tokens.count(vocab.video_id) != 1:
        raise ValueError("question must embed exactly one video-token position")
    return InstructionPair(
        question=question,
        answer=answer,
        question_tokens=question_tokens,
        answer_tokens=tokenize(answer, vocab),
        prompt=prompt,
        source=source,
        video_id=video_id,
        clip_index=clip_index,
    )


def video_description(n_clips: int, frames_per_clip: int, fps: float) -> str:
    length = format_seconds(n_clips * frames_per_clip / fps)
    rate = format_seconds(fps)
    return f"The video lasts {length}s and was sampled at {rate} frames per second."


def video_prompt_and_scores(
    g: AnomalyPredictor,
    gates: FusionGate | None,
    config: LtcConfig,
    clips: np.ndarray,
) -> tuple[np.ndarray, AnomalyPrompt, int]:
    """Stream a whole video, returning per-clip scores plus the anomaly
    prompt (raw, fused) of its top-scoring clip."""
    state = LtcState(k=config.k)
    scores = np.empty(clips.shape[0], dtype=np.float64)
    fused_feats = []
    for i in range(clips.shape[0]):
        fused, scores[i], state, _ = ltc_forward_stream(
            g, gates, config, state, clips[i], i
        )
        fused_feats.append(fused)
    _, top = mil_select(scores)
    prompt = AnomalyPrompt(raw=clips[top], fused=fused_feats[top])
    return scores, prompt, top


def build_vad_pairs(
    dataset: DatasetManifest,
    g: AnomalyPredictor,
    gates: FusionGate | None,
    config: LtcConfig,
    vocab: ToyVocab,
    threshold: float = 0.5,
) -> list[InstructionPair]:
    """One instruction pair per video: the model's own scores become the
    timestamped pseudo answer, and the top clip supplies the prompt."""
    pairs = []
    for v in dataset.videos:
        clips = v.clips.astype(np.float64)
        scores, prompt, top = video_prompt_and_scores(g, gates, config, clips)
        intervals = scores_to_intervals(scores, v.clip_duration, threshold)
        description = video_description(v.n_clips, v.frames_per_clip, v.fps)
        question, answer = render_pair(intervals, description)
        pairs.append(
            make_pair(question, answer, prompt, vocab, "vad", v.id, top)
        )
    return pairs


def build_auxiliary_pairs(dim: int, vocab: ToyVocab) -> list[InstructionPair]:
    """Caption pairs with an all-zero anomaly prompt."""
    zero = AnomalyPrompt(raw=np.zeros(dim), fused=np.zeros(dim))
    pairs = []
    for description, caption in AUXILIARY_CAPTIONS:
        question = QUESTION_TEMPLATE.format(
            description=description, question=CAPTION_QUESTION
        )
        pairs.append(
            make_pair(question, ANSWER_PREFIX + caption, zero, vocab, "auxiliary")
        )
    return pairs


def instruction_texts(dataset: DatasetManifest) -> list[str]:
    """Every text fragment the vocabulary must cover for a dataset."""
    texts = [AUXILIARY_CAPTIONS[i][j] for i in range(len(AUXILIARY_CAPTIONS)) for j in (0, 1)]
    for v in dataset.videos:
        texts.append(video_description(v.n_clips, v.frames_per_clip, v.fps))
        dur = v.clip_duration
        for i in range(v.n_clips + 1):
            texts.append(format_seconds(i * dur))
    return texts


def assemble_dataset(
    vad_pairs: Sequence[InstructionPair],
    auxiliary_pairs: Sequence[InstructionPair],
    mix_ratio: float = 1.0,
    seed: int = 0,
) -> list[InstructionPair]:
    """Mix the two sources at the target vad:auxiliary ratio and shuffle.

    Surplus auxiliary pairs are subsampled deterministically; a shortage just
    uses what exists (zero auxiliaries trains on vad pairs alone, warned).
    """
    if not vad_pairs:
        raise ValueError("no vad pairs to assemble")
    if mix_ratio <= 0:
        raise ValueError("mix_ratio must be positive")
    rng = np.random.default_rng(seed)
    target_aux = round(len(vad_pairs) * mix_ratio)
    aux = list(auxiliary_pairs)
    if not aux:
        warnings.warn("no auxiliary pairs; dataset is vad-only", stacklevel=2)
    elif len(aux) > target_aux:
        pick = rng.choice(len(aux), size=target_aux, replace=False)
        aux = [aux[i] for i in sorted(pick)]
    combined = list(vad_pairs) + aux
    order = rng.permutation(len(combined))
    return [combined[i] for i in order]


def write_instruction_dataset(pairs: Sequence[InstructionPair], path: str | Path) -> None:
    """One JSON object per line with the rendered text and prompt reference."""
    lines = []
    for p in pairs:
        ref = None if p.video_id is None else f"{p.video_id}#{p.clip_index}"
        lines.append(
            json.dumps(
                {
                    "question": p.question,
                    "answer": p.answer,
                    "video_id": p.video_id,
                    "clip_index": p.clip_index,
                    "source": p.source,
                    "prompt_ref": ref,
                },
                separators=(",", ":"),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


# --- the adaptor and the toy decoder -------------------------------------


@dataclass
class Adaptor:
    """One dense layer from the stacked prompt (2d) into embedding space."""

    projection: DenseLayer


def adaptor_forward(f: Adaptor, prompt: AnomalyPrompt) -> np.ndarray:
    stacked = prompt.stacked
    if stacked.shape[0] != f.projection.n_in:
        raise ValueError(
            f"stacked prompt has length {stacked.shape[0]}, adaptor expects {f.projection.n_in}"
        )
    return dense_forward(f.projection, stacked)


def ce_loss(distributions: Sequence[np.ndarray], targets: Sequence[int]) -> float:
    """Mean negative log-likelihood of the targets under the per-position
    distributions."""
    if len(distributions) != len(targets):
        raise ValueError("one distribution per target required")
    if len(targets) == 0:
        raise ValueError("empty target sequence")
    total = 0.0
    for dist, t in zip(distributions, targets):
        dist = np.asarray(dist, dtype=np.float64)
        if abs(float(dist.sum()) - 1.0) > 1e-9 or np.any(dist < 0):
            raise ValueError("each prediction must be a probability distribution")
        if not 0 <= t < dist.shape[0]:
            raise ValueError(f"target id {t} outside vocabulary of {dist.shape[0]}")
        total += -math.log(max(float(dist[t]), PROB_EPS))
    return total / len(targets)


@dataclass
class Phase3Hyper:
    iterations: int = 300
    batch_size: int = 2
    d_embed: int = 16
    max_positions: int = 24
    lr_max: float = 1e-2
    lr_min: float = 0.0
    warmup_steps: int = 15
    weight_decay: float = 0.001
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.d_embed < 1 or self.max_positions < 1:
            raise ValueError("d_embed and max_positions must be positive")


def init_phase3_params(
    vocab_size: int, prompt_dim: int, hyper: Phase3Hyper, rng: np.random.Generator
) -> Params:
    """Adaptor, token embedding table, and decoder output head."""
    adapt = init_dense(2 * prompt_dim, hyper.d_embed, rng)
    bound = math.sqrt(6.0 / (vocab_size + hyper.d_embed))
    emb = rng.uniform(-bound, bound, size=(vocab_size, hyper.d_embed))
    out = init_dense(2 * hyper.d_embed + hyper.max_positions, vocab_size, rng)
    return {
        "adapt.w": adapt.weights,
        "adapt.b": adapt.bias,
        "emb": emb,
        "out.w": out.weights,
        "out.b": out.bias,
    }


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def decoder_distributions(
    params: Params, pair: InstructionPair, max_positions: int
) -> np.ndarray:
    """Per-answer-position token distributions, (n_positions, |V|).

    Each position sees the adaptor embedding of the pair's prompt, the mean
    question-token embedding, and a one-hot position slot (clamped to the
    last slot for long answers).
    """
    adapt = DenseLayer(params["adapt.w"], params["adapt.b"])
    e = dense_forward(adapt, pair.prompt.stacked)
    q_bar = params["emb"][pair.question_tokens].mean(axis=0)
    n = len(pair.answer_tokens)
    d_embed = e.shape[0]
    z = np.zeros((n, 2 * d_embed + max_positions), dtype=np.float64)
    z[:, :d_embed] = e
    z[:, d_embed : 2 * d_embed] = q_bar
    for j in range(n):
        z[j, 2 * d_embed + min(j, max_positions - 1)] = 1.0
    logits = z @ params["out.w"].T + params["out.b"]
    return _softmax_rows(logits)


def pair_loss_and_grads(
    params: Params, pair: InstructionPair, max_positions: int
) -> tuple[float, Params]:
    """Mean answer-token cross-entropy for one pair and its gradients."""
    adapt = DenseLayer(params["adapt.w"], params["adapt.b"])
    stacked = pair.prompt.stacked
    e = dense_forward(adapt, stacked)
    q_tokens = pair.question_tokens
    q_bar = params["emb"][q_tokens].mean(axis=0)
    targets = np.asarray(pair.answer_tokens)
    n = targets.shape[0]
    d_embed = e.shape[0]

    z = np.zeros((n, 2 * d_embed + max_positions), dtype=np.float64)
    z[:, :d_embed] = e
    z[:, d_embed : 2 * d_embed] = q_bar
    for j in range(n):
        z[j, 2 * d_embed + min(j, max_positions - 1)] = 1.0
    logits = z @ params["out.w"].T + params["out.b"]
    probs = _softmax_rows(logits)
    loss = float(-np.log(np.maximum(probs[np.arange(n), targets], PROB_EPS)).mean())

    d_logits = probs.copy()
    d_logits[np.arange(n), targets] -= 1.0
    d_logits /= n
    grads: Params = {
        "out.w": d_logits.T @ z,
        "out.b": d_logits.sum(axis=0),
    }
    dz = d_logits @ params["out.w"]
    de = dz[:, :d_embed].sum(axis=0)
    dq_bar = dz[:, d_embed : 2 * d_embed].sum(axis=0)
    d_emb = np.zeros_like(params["emb"])
    np.add.at(d_emb, q_tokens, dq_bar / len(q_tokens))
    grads["emb"] = d_emb
    gw, gb, _ = dense_backward(adapt, stacked, de)
    grads["adapt.w"] = gw
    grads["adapt.b"] = gb
    return loss, grads


@dataclass
class Phase3Result:
    params: Params
    loss_trace: list[float]
    vocab: ToyVocab
    hyper: Phase3Hyper


def train_phase3(
    pairs: Sequence[InstructionPair], vocab: ToyVocab, hyper: Phase3Hyper
) -> Phase3Result:
    """Train adaptor and toy decoder on instruction pairs.

    Only these parameters exist in this phase; the detector and gates that
    produced the prompts are untouched by construction. Deterministic given
    hyper.seed. Returns the per-iteration batch loss trace.
    """
    if not pairs:
        raise ValueError("empty instruction dataset")
    prompt_dim = pairs[0].prompt.raw.shape[0]
    for p in pairs:
        if p.prompt.raw.shape[0] != prompt_dim:
            raise ValueError("inconsistent prompt dimensions")
    rng = np.random.default_rng(hyper.seed)
    params = init_phase3_params(len(vocab), prompt_dim, hyper, rng)
    opt = AdamW(weight_decay=hyper.weight_decay)
    sched = LrSchedule(
        warmup_epochs=min(hyper.warmup_steps, hyper.iterations),
        total_epochs=hyper.iterations,
        lr_max=hyper.lr_max,
        lr_min=hyper.lr_min,
    )
    trace: list[float] = []
    for step in range(hyper.iterations):
        picks = rng.integers(0, len(pairs), size=hyper.batch_size)
        lr = schedule_lr(sched, step + 1)
        batch_loss = 0.0
        grads: Params = {k: np.zeros_like(v) for k, v in params.items()}
        for pi in picks:
            loss, g = pair_loss_and_grads(params, pairs[pi], hyper.max_positions)
            batch_loss += loss / hyper.batch_size
            for k, v in g.items():
                grads[k] += v / hyper.batch_size
        opt.step(params, grads, lr)
        trace.append(batch_loss)
    return Phase3Result(params=params, loss_trace=trace, vocab=vocab, hyper=hyper)
