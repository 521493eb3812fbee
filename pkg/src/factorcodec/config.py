"""Run configuration: TOML file + command-line overrides over documented
defaults, with unknown keys rejected and a stable hash for run manifests."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoders import ContentEncoderConfig, ProsodyEncoderConfig, TimbreEncoderConfig
from .losses import Stage1LossWeights
from .stage1 import Stage1Config, Stage1TrainConfig
from .stage2 import Stage2Config, Stage2TrainConfig


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad type, bad value)."""


# Every key has a documented default; the README mirrors this table.
DEFAULTS: dict[str, dict] = {
    "data": {
        "speakers": 4,
        "patterns": 4,
        "per_cell": 5,
        "phone_inventory": 12,
        "min_duration_s": 0.96,
        "max_duration_s": 1.60,
        "sample_rate": 24000,
        "seed": 0,
    },
    "stage1": {
        "steps": 2000,
        "batch_size": 8,
        "crop_frames": 40,
        "lr": 1e-4,
        "warmup_steps": 200,
        "grad_clip": 1.0,
        "checkpoint_every": 500,
        "seed": 0,
        "content_levels": [4, 4, 4, 4, 4, 4, 4, 4],
        "prosody_levels": [6, 6, 6, 6, 6, 6],
        "timbre_levels": [6, 6, 6, 6, 6, 6],
        "content_channels": [64, 96, 128, 160],
        "prosody_width": 128,
        "prosody_dilations": [1, 2, 4, 8, 1, 2, 4, 8],
        "timbre_width": 128,
        "timbre_queries": 48,
        "timbre_blocks": 3,
        "fuse_width": 128,
        "num_phones": 12,
        "num_speakers": 4,
        "grl_lambda": 1.0,
        "w_pho": 1.0,
        "w_f0": 1.0,
        "w_cor": 1.0,
        "w_soft_pc": 1.0,
        "w_soft_pt": 1.0,
        "w_spk": 1.0,
        "w_adv_spk": 0.5,
        "w_f0_dec": 1.0,
        "w_mel": 15.0,
        "w_wav": 1.0,
    },
    "stage2": {
        "steps": 2000,
        "batch_size": 4,
        "crop_frames": 40,
        "lr": 1e-4,
        "checkpoint_every": 500,
        "seed": 0,
        "fusion_levels": [4, 4, 4, 4, 4, 4, 4, 4],
        "width": 256,
        "num_blocks": 2,
        "num_heads": 4,
        "upsample_factors": [8, 6, 5, 2],
        "upsample_channels": [128, 64, 32, 16],
        "disc_periods": [2, 3, 5, 7, 11],
        "disc_resolutions": [512, 1024, 2048],
        "disc_channels": 16,
        "w_mel": 15.0,
        "w_fm": 2.0,
        "w_adv": 1.0,
        "w_f0": 1.0,
    },
    "lm": {
        "steps": 2000,
        "batch_size": 8,
        "lr": 3e-4,
        "warmup_steps": 100,
        "checkpoint_every": 1000,
        "seed": 0,
        "layers": 4,
        "width": 256,
        "heads": 4,
        "context_len": 512,
        "text_vocab_size": 64,
    },
    "sampling": {
        "temperature": 0.8,
        "top_k": 50,
        "top_p": 1.0,
        "seed": 0,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _check_known(config: dict) -> None:
    for section, values in config.items():
        if section not in DEFAULTS:
            raise ConfigError(
                f"unknown config section [{section}]; known: {sorted(DEFAULTS)}"
            )
        if not isinstance(values, dict):
            raise ConfigError(f"section [{section}] must be a table of keys")
        for key in values:
            if key not in DEFAULTS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]; "
                    f"known: {sorted(DEFAULTS[section])}"
                )


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in update.items():
        out[section].update(values)
    return out


def _parse_override(spec: str) -> tuple[str, str, object]:
    """Parse 'section.key=value' with the value read as a TOML literal."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    dotted, raw = spec.split("=", 1)
    if dotted.count(".") != 1:
        raise ConfigError(f"override key {dotted!r} must look like section.key")
    section, key = dotted.split(".")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw  # bare string
    return section.strip(), key.strip(), value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> dict:
    """Defaults <- TOML file <- --set overrides, validated at each layer."""
    config = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
        _check_known(loaded)
        config = _merge(config, loaded)
    for spec in overrides:
        section, key, value = _parse_override(spec)
        _check_known({section: {key: value}})
        config[section][key] = value
    _validate_values(config)
    return config


def _validate_values(config: dict) -> None:
    for section, values in config.items():
        for key, value in values.items():
            default = DEFAULTS[section][key]
            if isinstance(default, bool) != isinstance(value, bool):
                pass  # no boolean keys today
            if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(
                    f"[{section}].{key} must be a number, got {type(value).__name__}"
                )
            if isinstance(default, list) and not isinstance(value, list):
                raise ConfigError(
                    f"[{section}].{key} must be a list, got {type(value).__name__}"
                )
    d = config["data"]
    if d["min_duration_s"] > d["max_duration_s"]:
        raise ConfigError("[data].min_duration_s must not exceed max_duration_s")
    for section in ("stage1", "stage2", "lm"):
        if config[section]["steps"] < 1:
            raise ConfigError(f"[{section}].steps must be at least 1")


def config_hash(config: dict) -> str:
    """Stable digest of the fully-merged configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# dataclass builders
# ---------------------------------------------------------------------------


def build_stage1_configs(config: dict) -> tuple[Stage1Config, Stage1TrainConfig]:
    s = config["stage1"]
    model = Stage1Config(
        content=ContentEncoderConfig(channels=tuple(s["content_channels"])),
        prosody=ProsodyEncoderConfig(
            width=s["prosody_width"], dilations=tuple(s["prosody_dilations"])
        ),
        timbre=TimbreEncoderConfig(
            width=s["timbre_width"],
            num_queries=s["timbre_queries"],
            num_blocks=s["timbre_blocks"],
        ),
        content_levels=tuple(s["content_levels"]),
        prosody_levels=tuple(s["prosody_levels"]),
        timbre_levels=tuple(s["timbre_levels"]),
        fuse_width=s["fuse_width"],
        num_phones=s["num_phones"],
        num_speakers=s["num_speakers"],
        grl_lambda=s["grl_lambda"],
    )
    weights = Stage1LossWeights(
        w_pho=s["w_pho"],
        w_f0=s["w_f0"],
        w_cor=s["w_cor"],
        w_soft_pc=s["w_soft_pc"],
        w_soft_pt=s["w_soft_pt"],
        w_spk=s["w_spk"],
        w_adv_spk=s["w_adv_spk"],
        w_f0_dec=s["w_f0_dec"],
        w_mel=s["w_mel"],
        w_wav=s["w_wav"],
    )
    train = Stage1TrainConfig(
        steps=s["steps"],
        batch_size=s["batch_size"],
        crop_frames=s["crop_frames"],
        lr=s["lr"],
        warmup_steps=s["warmup_steps"],
        grad_clip=s["grad_clip"],
        checkpoint_every=s["checkpoint_every"],
        seed=s["seed"],
        weights=weights,
    )
    return model, train


def build_stage2_configs(
    config: dict, content_dim: int, prosody_dim: int, timbre_dim: int
) -> tuple[Stage2Config, Stage2TrainConfig]:
    s = config["stage2"]
    model = Stage2Config(
        fusion_levels=tuple(s["fusion_levels"]),
        content_dim=content_dim,
        prosody_dim=prosody_dim,
        timbre_dim=timbre_dim,
        width=s["width"],
        num_blocks=s["num_blocks"],
        num_heads=s["num_heads"],
        upsample_factors=tuple(s["upsample_factors"]),
        upsample_channels=tuple(s["upsample_channels"]),
        disc_periods=tuple(s["disc_periods"]),
        disc_resolutions=tuple(s["disc_resolutions"]),
        disc_channels=s["disc_channels"],
    )
    train = Stage2TrainConfig(
        steps=s["steps"],
        batch_size=s["batch_size"],
        crop_frames=s["crop_frames"],
        lr=s["lr"],
        w_mel=s["w_mel"],
        w_fm=s["w_fm"],
        w_adv=s["w_adv"],
        w_f0=s["w_f0"],
        checkpoint_every=s["checkpoint_every"],
        seed=s["seed"],
    )
    return model, train
