"""Command-line entry point.

Subcommands cover the whole pipeline: data synthesis, the three training
phases, instruction-pair export, evaluation, the two grids, and figure
rendering. Every command writes its artifacts under one output root
(flag --out, else the VADKIT_OUT_ROOT environment variable, else the
config file, else ./vadkit-run) and records a run manifest capturing the
effective configuration, the seed, and a content hash of every file it
consumed. Rerunning a command with the same inputs writes bit-identical
checkpoints and reports.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import OUT_ROOT_ENV, RunConfig, load_run_config
from .context import LtcConfig, gate_params, gates_from_params, train_phase2
from .detector import predictor_from_params, predictor_params, train_phase1
from .experiments import (
    ablation_grid,
    k_sweep,
    write_classwise_csv,
    write_grid_csv,
    write_roc_csv,
)
from .features import load_manifest
from .figures import plot_loss_traces, render_report_figures
from .instructions import (
    assemble_dataset,
    build_auxiliary_pairs,
    build_vad_pairs,
    build_vocab,
    instruction_texts,
    save_vocab,
    train_phase3,
    write_instruction_dataset,
)
from .metrics import (
    baseline_scorer,
    context_scorer,
    evaluate_frames,
    pool_frames,
    roc_points,
    score_dataset,
)
from .synth import generate

DEFAULT_KS = "0,2,4,6,8"


class CliError(Exception):
    """User-facing failure; the message is printed and the exit status is 1."""


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dataset_sha256(manifest_path: Path) -> str:
    """One digest covering the manifest and every feature file it references."""
    digest = hashlib.sha256(manifest_path.read_bytes())
    base = manifest_path.parent
    with manifest_path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            feature_path = base / json.loads(line)["feature_path"]
            if feature_path.exists():
                digest.update(feature_path.read_bytes())
    return digest.hexdigest()


def write_run_manifest(
    out_root: Path,
    command: str,
    cfg: RunConfig,
    inputs: dict[str, str],
    outputs: Sequence[Path],
    started: float,
) -> Path:
    manifest_dir = out_root / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "desk_scale": cfg.desk_scale,
        "inputs": inputs,
        "outputs": [str(p) for p in outputs],
        "runtime_seconds": round(time.perf_counter() - started, 3),
    }
    path = manifest_dir / f"{command}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def require_dataset(data_dir: Path, split: str) -> Path:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise CliError(f"dataset manifest not found: {path} (run `vadkit synth` first)")
    return path


def require_checkpoint(out_root: Path, phase: int) -> Path:
    path = out_root / "checkpoints" / f"phase{phase}.ckpt"
    if not path.exists():
        raise CliError(
            f"missing prerequisite checkpoint: {path} (run `vadkit train-phase{phase}` first)"
        )
    return path


def load_phase1(path: Path):
    params, meta = load_checkpoint(path, "phase1")
    return predictor_from_params(params), meta


def load_phase2(path: Path):
    params, meta = load_checkpoint(path, "phase2")
    gate = {k: v for k, v in params.items() if k.startswith("gate_")}
    rest = {k: v for k, v in params.items() if not k.startswith("gate_")}
    return predictor_from_params(rest), gates_from_params(gate), LtcConfig(**meta["ltc"]), meta


def cmd_synth(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    data_dir = out_root / "data"
    train_path = generate(cfg.synth, data_dir, "train")
    test_path = generate(cfg.synth, data_dir, "test")
    inputs = {}
    if args.config:
        inputs[str(args.config)] = file_sha256(Path(args.config))
    write_run_manifest(
        out_root, "synth", cfg, inputs,
        [train_path, test_path, data_dir / "synth_config.json"], started,
    )
    print(f"wrote {train_path}")
    print(f"wrote {test_path}")
    return 0


def _base_inputs(args) -> dict[str, str]:
    if args.config:
        return {str(args.config): file_sha256(Path(args.config))}
    return {}


def cmd_train_phase1(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    data_dir = Path(args.data) if args.data else out_root / "data"
    manifest_path = require_dataset(data_dir, "train")
    dataset = load_manifest(manifest_path, "train")
    result = train_phase1(dataset, cfg.phase1)
    ckpt = out_root / "checkpoints" / "phase1.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        ckpt,
        "phase1",
        predictor_params(result.predictor),
        meta={
            "hyper": asdict(cfg.phase1),
            "loss_trace": result.loss_trace,
            "degenerate": result.degenerate,
        },
    )
    inputs = _base_inputs(args)
    inputs[str(manifest_path)] = dataset_sha256(manifest_path)
    write_run_manifest(out_root, "train-phase1", cfg, inputs, [ckpt], started)
    print(f"final training loss {result.loss_trace[-1]:.6f}")
    print(f"wrote {ckpt}")
    return 0


def cmd_train_phase2(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    data_dir = Path(args.data) if args.data else out_root / "data"
    manifest_path = require_dataset(data_dir, "train")
    prereq = require_checkpoint(out_root, 1)
    predictor, _ = load_phase1(prereq)
    dataset = load_manifest(manifest_path, "train")
    result = train_phase2(dataset, predictor, cfg.phase2, cfg.ltc)
    ckpt = out_root / "checkpoints" / "phase2.ckpt"
    save_checkpoint(
        ckpt,
        "phase2",
        {**predictor_params(result.predictor), **gate_params(result.gates)},
        meta={
            "hyper": asdict(cfg.phase2),
            "ltc": asdict(cfg.ltc),
            "loss_trace": result.loss_trace,
        },
    )
    inputs = _base_inputs(args)
    inputs[str(manifest_path)] = dataset_sha256(manifest_path)
    inputs[str(prereq)] = file_sha256(prereq)
    write_run_manifest(out_root, "train-phase2", cfg, inputs, [ckpt], started)
    print(f"final training loss {result.loss_trace[-1]:.6f}")
    print(f"wrote {ckpt}")
    return 0


def _build_instruction_pairs(args, cfg: RunConfig, out_root: Path):
    """Shared by gen-instructions and train-phase3: deterministic pair set."""
    data_dir = Path(args.data) if args.data else out_root / "data"
    manifest_path = require_dataset(data_dir, "train")
    prereq = require_checkpoint(out_root, 2)
    predictor, gates, ltc, _ = load_phase2(prereq)
    dataset = load_manifest(manifest_path, "train")
    vocab = build_vocab(instruction_texts(dataset))
    vad = build_vad_pairs(dataset, predictor, gates, ltc, vocab, threshold=cfg.threshold)
    aux = build_auxiliary_pairs(dataset.dimension, vocab)
    pairs = assemble_dataset(vad, aux, mix_ratio=cfg.mix_ratio, seed=cfg.seed)
    inputs = _base_inputs(args)
    inputs[str(manifest_path)] = dataset_sha256(manifest_path)
    inputs[str(prereq)] = file_sha256(prereq)
    return pairs, vocab, inputs


def cmd_gen_instructions(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    pairs, vocab, inputs = _build_instruction_pairs(args, cfg, out_root)
    inst_dir = out_root / "instructions"
    inst_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = inst_dir / "instructions.jsonl"
    vocab_path = inst_dir / "vocab.txt"
    write_instruction_dataset(pairs, dataset_path)
    save_vocab(vocab, vocab_path)
    write_run_manifest(
        out_root, "gen-instructions", cfg, inputs, [dataset_path, vocab_path], started
    )
    n_vad = sum(1 for p in pairs if p.source == "vad")
    print(f"wrote {len(pairs)} pairs ({n_vad} anomaly, {len(pairs) - n_vad} auxiliary)")
    print(f"wrote {dataset_path}")
    print(f"wrote {vocab_path}")
    return 0


def cmd_train_phase3(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    pairs, vocab, inputs = _build_instruction_pairs(args, cfg, out_root)
    result = train_phase3(pairs, vocab, cfg.phase3)
    ckpt = out_root / "checkpoints" / "phase3.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        ckpt,
        "phase3",
        result.params,
        meta={
            "hyper": asdict(cfg.phase3),
            "loss_trace": result.loss_trace,
            "vocab": vocab.words,
        },
    )
    write_run_manifest(out_root, "train-phase3", cfg, inputs, [ckpt], started)
    print(f"final training loss {result.loss_trace[-1]:.6f}")
    print(f"wrote {ckpt}")
    return 0


def cmd_eval(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    data_dir = Path(args.data) if args.data else out_root / "data"
    manifest_path = require_dataset(data_dir, "test")
    dataset = load_manifest(manifest_path, "test")
    prereq = require_checkpoint(out_root, args.phase)
    snapshot: dict = {"phase": args.phase, "preset": cfg.preset, "seed": cfg.seed}
    if args.phase == 1:
        predictor, _ = load_phase1(prereq)
        scorer = baseline_scorer(predictor)
    else:
        predictor, gates, ltc, _ = load_phase2(prereq)
        scorer = context_scorer(predictor, gates, ltc)
        snapshot["ltc"] = asdict(ltc)
    frames = score_dataset(dataset, scorer)
    report = evaluate_frames(frames, snapshot)
    reports_dir = out_root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report_path = reports_dir / "report.json"
    report_path.write_text(report.to_json())
    scores, labels = pool_frames(frames)
    roc_path = write_roc_csv(roc_points(scores, labels), reports_dir / "roc_points.csv")
    cls_path = write_classwise_csv(report.classwise, reports_dir / "classwise.csv")
    inputs = _base_inputs(args)
    inputs[str(manifest_path)] = dataset_sha256(manifest_path)
    inputs[str(prereq)] = file_sha256(prereq)
    write_run_manifest(
        out_root, "eval", cfg, inputs, [report_path, roc_path, cls_path], started
    )
    print(f"auc_overall  {report.auc_overall:.6f}")
    print(f"auc_abnormal {report.auc_abnormal:.6f}")
    print(f"wrote {report_path}")
    return 0


def _grid_prerequisites(args, cfg: RunConfig, out_root: Path):
    data_dir = Path(args.data) if args.data else out_root / "data"
    train_path = require_dataset(data_dir, "train")
    test_path = require_dataset(data_dir, "test")
    prereq = require_checkpoint(out_root, 1)
    predictor, _ = load_phase1(prereq)
    train = load_manifest(train_path, "train")
    test = load_manifest(test_path, "test")
    inputs = _base_inputs(args)
    inputs[str(train_path)] = dataset_sha256(train_path)
    inputs[str(test_path)] = dataset_sha256(test_path)
    inputs[str(prereq)] = file_sha256(prereq)
    return train, test, predictor, inputs


def cmd_ablate(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    train, test, predictor, inputs = _grid_prerequisites(args, cfg, out_root)
    rows = ablation_grid(
        train, test, predictor, cfg.phase2, cfg.ltc, cfg.seed, jobs=cfg.jobs
    )
    reports_dir = out_root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    path = write_grid_csv(rows, reports_dir / "ablation.csv")
    write_run_manifest(out_root, "ablate", cfg, inputs, [path], started)
    for r in rows:
        print(f"{r.row:<26} auc_overall {r.auc_overall:.4f}  auc_abnormal {r.auc_abnormal:.4f}")
    print(f"wrote {path}")
    return 0


def parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad --ks value {raw!r}: {exc}") from exc
    if not ks:
        raise CliError(f"bad --ks value {raw!r}: no values")
    if any(k < 0 for k in ks):
        raise CliError(f"bad --ks value {raw!r}: memory sizes must be non-negative")
    return ks


def cmd_ksweep(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    train, test, predictor, inputs = _grid_prerequisites(args, cfg, out_root)
    ks = parse_ks(args.ks)
    rows = k_sweep(
        train, test, predictor, cfg.phase2, cfg.ltc, ks, cfg.seed, jobs=cfg.jobs
    )
    reports_dir = out_root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    path = write_grid_csv(rows, reports_dir / "ksweep.csv")
    write_run_manifest(out_root, "ksweep", cfg, inputs, [path], started)
    for r in rows:
        print(f"{r.row:<6} auc_overall {r.auc_overall:.4f}  auc_abnormal {r.auc_abnormal:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_report(args, cfg: RunConfig, out_root: Path, started: float) -> int:
    reports_dir = out_root / "reports"
    if not reports_dir.is_dir():
        raise CliError(f"no reports directory at {reports_dir} (run `vadkit eval` first)")
    rendered = render_report_figures(reports_dir)
    traces: dict[str, list[float]] = {}
    inputs = _base_inputs(args)
    for phase in (1, 2, 3):
        ckpt = out_root / "checkpoints" / f"phase{phase}.ckpt"
        if ckpt.exists():
            _, meta = load_checkpoint(ckpt)
            if meta.get("loss_trace"):
                traces[f"phase{phase}"] = meta["loss_trace"]
                inputs[str(ckpt)] = file_sha256(ckpt)
    if traces:
        rendered.append(plot_loss_traces(traces, reports_dir / "loss.png"))
    for table in ("roc_points.csv", "classwise.csv", "ablation.csv", "ksweep.csv"):
        path = reports_dir / table
        if path.exists():
            inputs[str(path)] = file_sha256(path)
    write_run_manifest(out_root, "report", cfg, inputs, rendered, started)
    if rendered:
        for p in rendered:
            print(f"wrote {p}")
    else:
        print("nothing to render: no tables or checkpoints found")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-phase1": cmd_train_phase1,
    "train-phase2": cmd_train_phase2,
    "train-phase3": cmd_train_phase3,
    "gen-instructions": cmd_gen_instructions,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "ksweep": cmd_ksweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file; flags override its values")
    common.add_argument("--preset", choices=["easy", "hard"], help="recipe the defaults come from")
    common.add_argument("--seed", type=int, help="base seed threaded through every stage")
    common.add_argument("--jobs", type=int, help="worker processes for grid rows")
    common.add_argument(
        "--out",
        help=f"output root (default: ${OUT_ROOT_ENV} if set, else ./vadkit-run)",
    )
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (default: <out>/data)")

    parser = argparse.ArgumentParser(
        prog="vadkit",
        description="Weakly supervised video anomaly detection on synthetic features: "
        "three training phases, context-memory ablations, and report rendering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic train/test splits")
    sub.add_parser(
        "train-phase1", parents=[common, data], help="train the clip scorer from video labels"
    )
    sub.add_parser(
        "train-phase2", parents=[common, data], help="co-train scorer and memory fusion gates"
    )
    sub.add_parser(
        "train-phase3", parents=[common, data], help="train the toy decoder on instruction pairs"
    )
    sub.add_parser(
        "gen-instructions", parents=[common, data], help="export instruction pairs and vocabulary"
    )
    eval_parser = sub.add_parser(
        "eval", parents=[common, data], help="frame-level AUC report on the test split"
    )
    eval_parser.add_argument(
        "--phase", type=int, choices=[1, 2], default=2,
        help="which checkpoint to evaluate (default 2)",
    )
    sub.add_parser(
        "ablate", parents=[common, data], help="retrain with each memory-list combination"
    )
    ksweep_parser = sub.add_parser(
        "ksweep", parents=[common, data], help="retrain across memory sizes"
    )
    ksweep_parser.add_argument(
        "--ks", default=DEFAULT_KS, help=f"comma-separated memory sizes (default {DEFAULT_KS})"
    )
    sub.add_parser("report", parents=[common], help="render figures next to the report tables")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_run_config(
            args.config,
            preset=args.preset,
            seed=args.seed,
            jobs=args.jobs,
            out_dir=args.out,
        )
        out_root = Path(cfg.out_dir)
        out_root.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out_root, started)
    except (CliError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
