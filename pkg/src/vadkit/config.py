"""Run configuration: preset defaults, INI config files, flag overrides.

A run is configured in three layers with increasing precedence: a named
preset supplies every default, an INI file overrides individual keys, and
command-line flags override the file. The seed in [run] threads into every
stage; a stage section may still pin its own seed. desk_scale shrinks the
full-scale decoder iteration count (30000) to something a desk run can
afford; an explicit [phase3] iterations wins over the scaled value.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .context import LtcConfig
from .detector import MilHyper
from .experiments import preset_by_name
from .instructions import Phase3Hyper
from .synth import SynthConfig

OUT_ROOT_ENV = "VADKIT_OUT_ROOT"
DEFAULT_OUT_DIR = "vadkit-run"
FULL_SCALE_ITERATIONS = 30000
DEFAULT_DESK_SCALE = 0.01


@dataclass
class RunConfig:
    """Everything a CLI run needs, gathered in one place."""

    preset: str = "hard"
    seed: int = 42
    jobs: int = 1
    desk_scale: float = DEFAULT_DESK_SCALE
    out_dir: str = DEFAULT_OUT_DIR
    threshold: float = 0.5
    mix_ratio: float = 1.0
    synth: SynthConfig = field(default_factory=SynthConfig)
    phase1: MilHyper = field(default_factory=MilHyper)
    phase2: MilHyper = field(default_factory=MilHyper)
    ltc: LtcConfig = field(default_factory=LtcConfig)
    phase3: Phase3Hyper = field(default_factory=Phase3Hyper)

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ValueError("jobs must be positive")
        if self.desk_scale <= 0:
            raise ValueError("desk_scale must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly between 0 and 1")
        if self.mix_ratio < 0:
            raise ValueError("mix_ratio must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["out_dir"] = str(self.out_dir)
        return out


def default_config(preset: str = "hard", seed: int = 42) -> RunConfig:
    """Preset defaults with every stage seeded from one seed."""
    p = preset_by_name(preset, seed)
    return RunConfig(
        preset=preset,
        seed=seed,
        synth=p.synth,
        phase1=p.phase1,
        phase2=p.phase2,
        ltc=p.ltc,
        phase3=Phase3Hyper(
            iterations=round(FULL_SCALE_ITERATIONS * DEFAULT_DESK_SCALE), seed=seed
        ),
    )


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _convert(raw: str, target_type: type) -> Any:
    if target_type is bool:
        return _parse_bool(raw)
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _apply_section(obj: Any, section: str, values: Mapping[str, str]) -> Any:
    """Replace dataclass fields named by the section's keys, with type-checked
    string conversion; unknown keys are an error."""
    by_name = {f.name: f for f in fields(obj)}
    updates: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in by_name:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        ftype = by_name[key].type
        base = {"int": int, "float": float, "bool": bool, "str": str}.get(
            ftype if isinstance(ftype, str) else getattr(ftype, "__name__", "")
        )
        if base is None:
            raise ValueError(f"key {key!r} in section [{section}] cannot be set from a file")
        try:
            updates[key] = _convert(raw, base)
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r} in section [{section}]: {exc}") from exc
    return replace(obj, **updates)


_KNOWN_SECTIONS = ("run", "synth", "phase1", "phase2", "memory", "phase3", "instructions")
_RUN_KEYS = {"preset", "seed", "out_dir", "jobs", "desk_scale"}
_INSTRUCTION_KEYS = {"threshold", "mix_ratio"}


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Parse an INI file into plain nested dicts, validating section names."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"invalid config file {path}: {exc}") from exc
    sections: dict[str, dict[str, str]] = {}
    for name in parser.sections():
        if name not in _KNOWN_SECTIONS:
            raise ValueError(
                f"unknown section [{name}] in {path}; known sections: "
                + ", ".join(_KNOWN_SECTIONS)
            )
        sections[name] = dict(parser[name])
    return sections


def load_run_config(
    config_path: str | Path | None = None,
    *,
    preset: str | None = None,
    seed: int | None = None,
    jobs: int | None = None,
    out_dir: str | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Build the effective configuration.

    Precedence per key, low to high: preset defaults, config file, flags.
    The output directory additionally honors the environment between file
    and flag: flag, then env var, then [run] out_dir, then the default.
    """
    env = os.environ if env is None else env
    sections = read_config_file(config_path) if config_path is not None else {}
    run_raw = sections.get("run", {})
    for key in run_raw:
        if key not in _RUN_KEYS:
            raise ValueError(f"unknown key {key!r} in section [run]")

    effective_preset = preset if preset is not None else run_raw.get("preset", "hard")
    if seed is not None:
        effective_seed = seed
    elif "seed" in run_raw:
        effective_seed = int(run_raw["seed"])
    else:
        effective_seed = 42

    cfg = default_config(effective_preset, effective_seed)

    desk_scale = cfg.desk_scale
    if "desk_scale" in run_raw:
        desk_scale = float(run_raw["desk_scale"])
        if desk_scale <= 0:
            raise ValueError("desk_scale must be positive")
        cfg.phase3 = replace(
            cfg.phase3, iterations=max(1, round(FULL_SCALE_ITERATIONS * desk_scale))
        )

    cfg.synth = _apply_section(cfg.synth, "synth", sections.get("synth", {}))
    cfg.phase1 = _apply_section(cfg.phase1, "phase1", sections.get("phase1", {}))
    cfg.phase2 = _apply_section(cfg.phase2, "phase2", sections.get("phase2", {}))
    cfg.ltc = _apply_section(cfg.ltc, "memory", sections.get("memory", {}))
    cfg.phase3 = _apply_section(cfg.phase3, "phase3", sections.get("phase3", {}))

    instructions = sections.get("instructions", {})
    for key in instructions:
        if key not in _INSTRUCTION_KEYS:
            raise ValueError(f"unknown key {key!r} in section [instructions]")
    threshold = float(instructions.get("threshold", 0.5))
    mix_ratio = float(instructions.get("mix_ratio", 1.0))

    effective_jobs = jobs if jobs is not None else int(run_raw.get("jobs", 1))
    if out_dir is not None:
        effective_out = out_dir
    elif env.get(OUT_ROOT_ENV):
        effective_out = env[OUT_ROOT_ENV]
    elif "out_dir" in run_raw:
        effective_out = run_raw["out_dir"]
    else:
        effective_out = DEFAULT_OUT_DIR

    return RunConfig(
        preset=effective_preset,
        seed=effective_seed,
        jobs=effective_jobs,
        desk_scale=desk_scale,
        out_dir=effective_out,
        threshold=threshold,
        mix_ratio=mix_ratio,
        synth=cfg.synth,
        phase1=cfg.phase1,
        phase2=cfg.phase2,
        ltc=cfg.ltc,
        phase3=cfg.phase3,
    )
