"""Run configuration: presets, YAML loading, flag overrides, digests.

Precedence is CLI flag > config file > preset default. The config digest is
the SHA-256 of the fully resolved configuration's canonical JSON form, so two
runs share a digest exactly when they ran the same effective configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentConfig, CropConfig
from .backbone import ViTConfig
from .distill import DistillConfig, HeadConfig
from .errors import ConfigError
from .probe import ProbeConfig


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    bands: int = 8
    tile_size: int = 126
    quantize_lo_pct: float = 2.0
    quantize_hi_pct: float = 98.0
    featureless_dark: int = 5
    featureless_bright: int = 250
    featureless_frac: float = 0.98
    synth_tiles: int = 2000
    synth_classes: int = 4
    synth_imbalance: str | None = None  # "pos:neg", e.g. "1:10"
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def imbalance_ratio(self) -> tuple[int, int] | None:
        if self.synth_imbalance is None:
            return None
        try:
            pos, neg = (int(x) for x in self.synth_imbalance.split(":"))
        except ValueError as exc:
            raise ConfigError(f"imbalance must look like '1:10', got {self.synth_imbalance!r}") from exc
        if pos < 1 or neg < 1:
            raise ConfigError(f"imbalance parts must be >= 1, got {self.synth_imbalance!r}")
        return pos, neg


@dataclass(frozen=True)
class EvalConfig:
    k_folds: int = 5
    scales: tuple[float, ...] = (1.0,)
    seg_scales: tuple[int, ...] = (10,)
    k_list: tuple[int, ...] = (5, 20, 50, 100)
    checkpoint_every: int = 200


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    preset: str = "desk-micro"
    data: DataConfig = field(default_factory=DataConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def canonical_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


# Preset bundles: section -> field overrides applied beneath the config file.
PRESETS: dict[str, dict] = {
    "desk-micro": {
        "vit": {"embed_dim": 96, "depth": 4, "heads": 4, "patch_size": 14, "pos_grid": 8},
        "head": {"prototypes": 256, "bottleneck": 64, "hidden": 512, "layers": 3},
        "crop": {"global_size": 112, "local_size": 56, "n_local": 8},
        "distill": {
            "total_steps": 1000,
            "batch_size": 16,
            "lr_override": 1e-3,
            "warmup_frac": 0.1,
            "freeze_proto_steps": 0,
        },
        "data": {"tile_size": 126},
    },
    "paper-vitl14": {
        "vit": {"embed_dim": 1024, "depth": 24, "heads": 16, "patch_size": 14, "pos_grid": 16},
        "head": {"prototypes": 65536, "bottleneck": 256, "hidden": 2048, "layers": 3},
        "crop": {"global_size": 224, "local_size": 98, "n_local": 8},
        "distill": {
            "total_steps": 500_000,
            "batch_size": 512,
            "base_lr": 2e-4,
            "lr_override": None,
            "warmup_frac": 0.16,
            "teacher_temp_warmup_frac": 0.06,
            "freeze_proto_steps": 1000,
        },
        "data": {"tile_size": 256},
    },
}

_SECTION_TYPES = {
    "data": DataConfig,
    "vit": ViTConfig,
    "head": HeadConfig,
    "crop": CropConfig,
    "aug": AugmentConfig,
    "distill": DistillConfig,
    "probe": ProbeConfig,
    "eval": EvalConfig,
}


def _coerce(value, annotation):
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, *layers: dict):
    merged: dict = {}
    for layer in layers:
        if layer:
            merged.update(layer)
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(merged) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {k: _coerce(v, allowed[k].type) for k, v in merged.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path: Path | str | None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from preset defaults, an optional YAML file, and
    top-level overrides (e.g. CLI flags: seed, threads, preset)."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
            raw = loaded
    overrides = overrides or {}

    preset_name = overrides.get("preset") or raw.get("preset") or "desk-micro"
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[preset_name]

    unknown_sections = set(raw) - set(_SECTION_TYPES) - {"seed", "threads", "preset"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    sections = {
        name: _build_section(cls, preset.get(name), raw.get(name))
        for name, cls in _SECTION_TYPES.items()
    }
    seed = overrides.get("seed")
    if seed is None:
        seed = raw.get("seed", 0)
    threads = overrides.get("threads")
    if threads is None:
        threads = raw.get("threads", 1)
    try:
        cfg = RunConfig(seed=int(seed), threads=int(threads), preset=preset_name, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc
    cfg.crop.validate_patch_size(cfg.vit.patch_size)
    return cfg
