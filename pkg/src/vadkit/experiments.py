"""Preset recipes, ablation grid, and memory-size sweep.

A preset bundles everything a full run needs: the synthetic data recipe, the
hyperparameters of both training phases, and the memory configuration. The
grid helpers retrain the second phase once per row with a per-row seed derived
from the base seed, so rows are independent of each other and of how many
worker processes computed them. Emitted tables are plain CSV with full-precision
floats (str round-trips exactly), one writer per table shape.
"""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .context import LtcConfig, init_gates, train_phase2
from .detector import AnomalyPredictor, MilHyper
from .features import DatasetManifest
from .metrics import baseline_scorer, context_scorer, evaluate
from .synth import SynthConfig

__all__ = [
    "ABLATION_ROWS",
    "GridRow",
    "Preset",
    "ablation_grid",
    "derive_seed",
    "easy_preset",
    "hard_preset",
    "k_sweep",
    "write_classwise_csv",
    "write_grid_csv",
    "write_roc_csv",
]


def derive_seed(base_seed: int, label: str) -> int:
    """Stable 32-bit seed for a named sub-run of a base-seeded experiment."""
    if base_seed < 0:
        raise ValueError("base_seed must be non-negative")
    digest = hashlib.sha256(f"{base_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class Preset:
    """A complete run recipe: data, both training phases, memory."""

    name: str
    synth: SynthConfig
    phase1: MilHyper
    phase2: MilHyper
    ltc: LtcConfig


def easy_preset(seed: int = 42) -> Preset:
    """Sanity-scale recipe: linearly separable anomaly direction, first-phase
    training alone reaches near-perfect frame AUC within a couple of minutes."""
    phase1 = MilHyper(
        epochs=30,
        batch_size=8,
        clips_per_video=32,
        hidden=128,
        lr_max=5e-3,
        warmup_epochs=5,
        seed=seed,
    )
    return Preset(
        name="easy",
        synth=SynthConfig(
            n_videos=200,
            clips_per_video=32,
            dimension=32,
            noise_sigma=0.1,
            marker_alpha=1.0,
            mode="easy",
            seed=seed,
        ),
        phase1=phase1,
        phase2=replace(phase1, epochs=30),
        ltc=LtcConfig(k=4, attention="softmax"),
    )


def hard_preset(seed: int = 42) -> Preset:
    """Context-bound recipe. Every video presentation is randomly rotated
    during training, so per-clip rules cannot memorize scene directions and
    only the relation between a clip and its retrieved memory carries signal;
    literal attention lets retrieved magnitude scale with that alignment.
    The first phase is kept short (it cannot do better than chance here) and
    serves as the frozen ranking scorer for the second phase.
    """
    phase1 = MilHyper(
        epochs=2,
        batch_size=8,
        clips_per_video=32,
        hidden=128,
        lr_max=5e-3,
        lr_min=1e-3,
        warmup_epochs=5,
        weight_decay=0.0,
        augment_rotations=True,
        seed=seed,
    )
    return Preset(
        name="hard",
        synth=SynthConfig(
            n_videos=200,
            clips_per_video=32,
            dimension=16,
            noise_sigma=0.1,
            marker_alpha=8.0,
            anomaly_window_length=8,
            mode="hard",
            seed=seed,
        ),
        phase1=phase1,
        phase2=replace(phase1, epochs=80),
        ltc=LtcConfig(
            k=8,
            attention="literal",
            use_normal=True,
            use_abnormal=True,
            use_history=True,
        ),
    )


PRESETS = {"easy": easy_preset, "hard": hard_preset}


def preset_by_name(name: str, seed: int = 42) -> Preset:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](seed)


@dataclass(frozen=True)
class GridRow:
    """One evaluated configuration of a grid. config None means raw
    first-phase scoring with no memory in the loop."""

    row: str
    seed: int
    config: LtcConfig | None
    auc_overall: float
    auc_abnormal: float


# Which lists each ablation row enables, in presentation order.
ABLATION_ROWS: tuple[tuple[str, dict[str, bool] | None], ...] = (
    ("baseline", None),
    ("normal", dict(use_normal=True, use_abnormal=False, use_history=False)),
    ("abnormal", dict(use_normal=False, use_abnormal=True, use_history=False)),
    ("normal+abnormal", dict(use_normal=True, use_abnormal=True, use_history=False)),
    ("normal+abnormal+history", dict(use_normal=True, use_abnormal=True, use_history=True)),
)


def _baseline_row(row: str, seed: int, test: DatasetManifest, predictor: AnomalyPredictor) -> GridRow:
    report = evaluate(test, baseline_scorer(predictor))
    return GridRow(
        row=row,
        seed=seed,
        config=None,
        auc_overall=report.auc_overall,
        auc_abnormal=report.auc_abnormal,
    )


def _retrained_row(args: tuple) -> GridRow:
    row, seed, train, test, predictor, hyper, config = args
    result = train_phase2(train, predictor, replace(hyper, seed=seed), config)
    report = evaluate(test, context_scorer(result.predictor, result.gates, config))
    return GridRow(
        row=row,
        seed=seed,
        config=config,
        auc_overall=report.auc_overall,
        auc_abnormal=report.auc_abnormal,
    )


def _empty_memory_row(
    row: str, seed: int, test: DatasetManifest, predictor: AnomalyPredictor, config: LtcConfig
) -> GridRow:
    # k=0 keeps every list empty, so fusion returns the raw feature and the
    # scores equal first-phase scoring bit for bit; nothing to train.
    dim = test.videos[0].clips.shape[1]
    gates = init_gates(dim, np.random.default_rng([seed, 1]))
    report = evaluate(test, context_scorer(predictor, gates, config))
    return GridRow(
        row=row,
        seed=seed,
        config=config,
        auc_overall=report.auc_overall,
        auc_abnormal=report.auc_abnormal,
    )


def _run_tasks(tasks: Sequence[tuple], jobs: int) -> list[GridRow]:
    if jobs < 1:
        raise ValueError("jobs must be positive")
    if jobs == 1 or len(tasks) <= 1:
        return [_retrained_row(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_retrained_row, tasks))


def ablation_grid(
    train: DatasetManifest,
    test: DatasetManifest,
    predictor: AnomalyPredictor,
    hyper: MilHyper,
    ltc: LtcConfig,
    base_seed: int,
    jobs: int = 1,
) -> list[GridRow]:
    """Retrain the second phase once per list combination and evaluate each.

    The first row scores the raw first-phase predictor. Every other row keeps
    k and the attention flavor of `ltc` and toggles which lists participate;
    its training seed is derived from base_seed and the row name, so the grid
    is reproducible row by row and independent of `jobs`.
    """
    rows = [_baseline_row(ABLATION_ROWS[0][0], base_seed, test, predictor)]
    tasks = []
    for row, flags in ABLATION_ROWS[1:]:
        config = replace(ltc, **flags)
        tasks.append((row, derive_seed(base_seed, row), train, test, predictor, hyper, config))
    rows.extend(_run_tasks(tasks, jobs))
    return rows


def k_sweep(
    train: DatasetManifest,
    test: DatasetManifest,
    predictor: AnomalyPredictor,
    hyper: MilHyper,
    ltc: LtcConfig,
    ks: Sequence[int],
    base_seed: int,
    jobs: int = 1,
) -> list[GridRow]:
    """Retrain the second phase at each memory size and evaluate.

    k=0 is evaluated without training through the streaming path (all lists
    stay empty, so it reproduces raw first-phase scores exactly); larger k
    retrain with a seed derived from base_seed and the row name.
    """
    if len(ks) == 0:
        raise ValueError("ks must be nonempty")
    if len(set(ks)) != len(ks):
        raise ValueError("ks must not repeat")
    rows: list[GridRow] = []
    tasks = []
    for k in ks:
        row = f"k{k}"
        if k == 0:
            rows.append(_empty_memory_row(row, base_seed, test, predictor, replace(ltc, k=0)))
        else:
            config = replace(ltc, k=k)
            tasks.append((row, derive_seed(base_seed, row), train, test, predictor, hyper, config))
    rows.extend(_run_tasks(tasks, jobs))
    order = {f"k{k}": i for i, k in enumerate(ks)}
    rows.sort(key=lambda r: order[r.row])
    return rows


GRID_CSV_COLUMNS = (
    "row",
    "seed",
    "k",
    "attention",
    "use_normal",
    "use_abnormal",
    "use_history",
    "auc_overall",
    "auc_abnormal",
)


def write_grid_csv(rows: Sequence[GridRow], path: str | Path) -> Path:
    """One line per grid row; memory columns are empty on no-memory rows.
    Floats are written with str(), which round-trips float64 exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_CSV_COLUMNS)
        for r in rows:
            cfg = r.config
            writer.writerow(
                [
                    r.row,
                    r.seed,
                    "" if cfg is None else cfg.k,
                    "" if cfg is None else cfg.attention,
                    "" if cfg is None else int(cfg.use_normal),
                    "" if cfg is None else int(cfg.use_abnormal),
                    "" if cfg is None else int(cfg.use_history),
                    str(r.auc_overall),
                    str(r.auc_abnormal),
                ]
            )
    return path


def write_roc_csv(points: np.ndarray, path: str | Path) -> Path:
    """ROC curve as fpr,tpr rows, one per distinct threshold."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("ROC points must be an (n, 2) array")
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            writer.writerow([str(float(fpr)), str(float(tpr))])
    return path


def write_classwise_csv(classwise: Mapping[str, float], path: str | Path) -> Path:
    """Per-class abnormal-frame AUC, sorted by class name."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "auc"])
        for name in sorted(classwise):
            writer.writerow([name, str(float(classwise[name]))])
    return path


def read_grid_csv(path: str | Path) -> list[GridRow]:
    """Inverse of write_grid_csv."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(GRID_CSV_COLUMNS):
            raise ValueError(f"unexpected grid CSV columns in {path}")
        for rec in reader:
            config = None
            if rec["k"] != "":
                config = LtcConfig(
                    k=int(rec["k"]),
                    attention=rec["attention"],
                    use_normal=bool(int(rec["use_normal"])),
                    use_abnormal=bool(int(rec["use_abnormal"])),
                    use_history=bool(int(rec["use_history"])),
                )
            rows.append(
                GridRow(
                    row=rec["row"],
                    seed=int(rec["seed"]),
                    config=config,
                    auc_overall=float(rec["auc_overall"]),
                    auc_abnormal=float(rec["auc_abnormal"]),
                )
            )
    return rows
