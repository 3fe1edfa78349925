"""Run configuration: every tunable, its default, and its provenance.

Precedence is defaults < preset < config file < flag overrides. Each field
carries a provenance tag: ``paper`` for values adopted from the original
experiment recipe this pipeline follows, ``chosen`` for values set by this
implementation. The ``desk`` preset shrinks dimensions so full training
runs finish in minutes; ``tiny`` shrinks further for finite-difference
checks; ``paper`` keeps the full-size dimensions (shape checks only).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigRangeError, ConfigTypeError, UnknownKeyError


@dataclass(frozen=True)
class FieldInfo:
    name: str
    kind: type
    default: object
    provenance: str  # "paper" or "chosen"
    help: str
    min: float | None = None
    max: float | None = None
    choices: tuple | None = None


FIELDS = [
    FieldInfo("seed", int, 0, "chosen", "global random seed"),
    # model dimensions
    FieldInfo("d_enc", int, 1408, "paper", "instance feature width (correlation module width)"),
    FieldInfo("d_model", int, 768, "paper", "fusion transformer width"),
    FieldInfo("num_queries", int, 32, "paper", "learnable query count K"),
    FieldInfo("fusion_blocks", int, 12, "paper", "fusion transformer depth N"),
    FieldInfo("decoder_blocks", int, 2, "chosen", "caption decoder depth"),
    FieldInfo("corr_layers", int, 1, "chosen", "correlation blocks before fusion (0 disables)"),
    FieldInfo("num_heads", int, 8, "chosen", "attention heads (must divide d_enc and d_model)"),
    FieldInfo("landmarks", int, 64, "chosen", "landmark count m for approximate attention"),
    FieldInfo("pinv_iterations", int, 14, "chosen", "pseudoinverse iterations"),
    FieldInfo("nystrom_threshold", int, 256, "chosen",
              "bag size above which correlation switches to landmark attention"),
    FieldInfo("max_text_len", int, 64, "chosen", "maximum caption length in tokens"),
    # objective
    FieldInfo("alpha", float, 0.5, "chosen",
              "weight of the classification loss in the joint objective", min=0.0, max=1.0),
    # optimization
    FieldInfo("lr", float, 1e-4, "paper", "peak learning rate", min=0.0),
    FieldInfo("warmup_lr", float, 1e-5, "paper", "learning rate at step 0", min=0.0),
    FieldInfo("warmup_steps", int, 1000, "paper", "linear warmup steps", min=0),
    FieldInfo("weight_decay", float, 0.05, "paper", "decoupled weight decay", min=0.0),
    FieldInfo("beta1", float, 0.9, "paper", "Adam first-moment decay", min=0.0, max=1.0),
    FieldInfo("beta2", float, 0.999, "paper", "Adam second-moment decay", min=0.0, max=1.0),
    FieldInfo("adam_eps", float, 1e-8, "chosen", "Adam denominator epsilon", min=0.0),
    FieldInfo("batch_size", int, 16, "paper", "bags per optimizer step", min=1),
    FieldInfo("epochs", int, 30, "chosen", "training epochs", min=1),
    # data
    FieldInfo("num_bags", int, 300, "chosen", "synthetic corpus size", min=0),
    FieldInfo("num_classes", int, 3, "chosen", "synthetic class count", min=2),
    FieldInfo("vocab_size", int, 64, "chosen", "caption vocabulary size", min=4),
    FieldInfo("m_min", int, 50, "chosen", "minimum instances per bag", min=1),
    FieldInfo("m_max", int, 200, "chosen", "maximum instances per bag", min=1),
    FieldInfo("motif_strength", float, 3.0, "chosen", "planted class signal magnitude", min=0.0),
    FieldInfo("noise_std", float, 1.0, "chosen", "instance noise standard deviation", min=1e-9),
    FieldInfo("train_frac", float, 0.2, "paper", "training split fraction", min=0.0, max=1.0),
    FieldInfo("val_frac", float, 0.4, "paper", "validation split fraction", min=0.0, max=1.0),
    FieldInfo("test_frac", float, 0.4, "paper", "test split fraction", min=0.0, max=1.0),
    FieldInfo("stratify", bool, True, "chosen", "stratify the split by class"),
    # evaluation / bench
    FieldInfo("eval_mode", str, "image_and_text", "chosen", "inference modality",
              choices=("image_only", "image_and_text")),
    FieldInfo("eval_split", str, "test", "chosen", "split used by eval/caption",
              choices=("train", "val", "test")),
    FieldInfo("bench_sizes", list, [256, 512, 1024, 2048], "chosen",
              "bag sizes benchmarked"),
    FieldInfo("bench_repeats", int, 3, "chosen", "timing repetitions per size", min=1),
    FieldInfo("bench_dim", int, 64, "chosen", "per-head width used by the benchmark", min=1),
    # paths
    FieldInfo("data_dir", str, "data", "chosen", "corpus directory (manifest.json + features)"),
    FieldInfo("out_root", str, "runs", "chosen", "parent directory for run artifacts"),
    FieldInfo("checkpoint", str, "", "chosen", "checkpoint path for eval/caption"),
]

FIELD_MAP = {f.name: f for f in FIELDS}

PRESETS = {
    # Full-size dimensions; useful for shape-level checks only.
    "paper": {},
    # Desk scale: trains on the synthetic corpus in minutes.
    "desk": {
        "d_enc": 32,
        "d_model": 64,
        "num_queries": 4,
        "fusion_blocks": 2,
        "decoder_blocks": 2,
        "landmarks": 16,
        "vocab_size": 64,
        "max_text_len": 24,
        "batch_size": 4,
        "lr": 1e-3,
        "warmup_lr": 1e-4,
        "warmup_steps": 30,
        "epochs": 30,
    },
    # Minimal configuration for finite-difference gradient verification.
    "tiny": {
        "d_enc": 8,
        "d_model": 8,
        "num_queries": 2,
        "fusion_blocks": 1,
        "decoder_blocks": 1,
        "num_heads": 2,
        "landmarks": 4,
        "vocab_size": 11,
        "num_classes": 2,
        "max_text_len": 8,
        "num_bags": 6,
        "m_min": 6,
        "m_max": 6,
        "batch_size": 2,
        "epochs": 2,
        "lr": 1e-3,
        "warmup_lr": 1e-4,
        "warmup_steps": 2,
    },
}

RunConfig = dataclasses.make_dataclass(
    "RunConfig",
    [(f.name, f.kind, dataclasses.field(default_factory=(lambda d=f.default: (
        list(d) if isinstance(d, list) else d)))) for f in FIELDS],
    frozen=True,
)
RunConfig.__doc__ = "Validated bundle of every tunable; see FIELDS for provenance."


def _coerce(field: FieldInfo, value):
    try:
        if field.kind is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "1", "yes"):
                    return True
                if low in ("false", "0", "no"):
                    return False
            raise ValueError(value)
        if field.kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if field.kind is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if field.kind is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        if field.kind is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [int(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigTypeError(
            f"field '{field.name}' expects {field.kind.__name__}, got {value!r}"
        ) from exc
    raise ConfigTypeError(f"field '{field.name}' has unsupported kind {field.kind}")


def _check_range(field: FieldInfo, value):
    if field.kind in (int, float):
        if field.min is not None and value < field.min:
            raise ConfigRangeError(f"field '{field.name}' must be >= {field.min}, got {value}")
        if field.max is not None and value > field.max:
            raise ConfigRangeError(f"field '{field.name}' must be <= {field.max}, got {value}")
    if field.choices is not None and value not in field.choices:
        raise ConfigRangeError(
            f"field '{field.name}' must be one of {field.choices}, got {value!r}"
        )


def validate_config(cfg) -> None:
    """Cross-field checks beyond per-field ranges."""
    if cfg.d_enc % cfg.num_heads != 0 or cfg.d_model % cfg.num_heads != 0:
        raise ConfigRangeError(
            f"num_heads {cfg.num_heads} must divide d_enc {cfg.d_enc} and d_model {cfg.d_model}"
        )
    if cfg.m_min > cfg.m_max:
        raise ConfigRangeError(f"m_min {cfg.m_min} exceeds m_max {cfg.m_max}")
    if abs(cfg.train_frac + cfg.val_frac + cfg.test_frac - 1.0) > 1e-9:
        raise ConfigRangeError("train_frac + val_frac + test_frac must equal 1")
    if cfg.landmarks > cfg.nystrom_threshold:
        raise ConfigRangeError(
            f"landmarks {cfg.landmarks} exceed nystrom_threshold {cfg.nystrom_threshold}"
        )
    if cfg.vocab_size <= 3:
        raise ConfigRangeError("vocab_size must leave room beyond PAD/BOS/EOS")
    if not cfg.bench_sizes:
        raise ConfigRangeError("bench_sizes must not be empty")


def make_config(preset: str | None = None, file: str | Path | None = None,
                overrides: dict | None = None):
    """Layer defaults, preset, config file, and overrides; then validate."""
    values = {f.name: (list(f.default) if isinstance(f.default, list) else f.default)
              for f in FIELDS}

    def apply(source: dict, origin: str):
        for key, val in source.items():
            if key not in FIELD_MAP:
                raise UnknownKeyError(f"unknown config key '{key}' ({origin})")
            fld = FIELD_MAP[key]
            coerced = _coerce(fld, val)
            _check_range(fld, coerced)
            values[key] = coerced

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigRangeError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
            )
        apply(PRESETS[preset], f"preset '{preset}'")
    if file:
        doc = json.loads(Path(file).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ConfigTypeError("config file must hold a JSON object")
        apply(doc, f"file '{file}'")
    if overrides:
        apply(overrides, "flags")

    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def write_effective_config(cfg, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True),
                    encoding="utf-8")
