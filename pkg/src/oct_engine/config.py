"""Run configuration: flat ``key = value`` files with ``[section]`` headers,
merged with command-line overrides and validated against a fixed schema.

Unknown sections or keys are rejected outright; every key below carries its
default and is documented in the README.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .data import AugmentConfig
from .models import ModelConfig, StageConfig
from .training import LRSchedule, TrainSettings

ENV_SEED = "OCT_ENGINE_SEED"


class ConfigError(Exception):
    """Invalid configuration file, key, or value."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default-as-string, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "input_channels": (int, "3", "input image channels"),
        "input_size": (int, "224", "square model input side (pixels)"),
        "stages": (str, "1x24,1x48d", "stage list: <blocks>x<channels>[d][f]"),
        "attention": (str, "0>1", "attention links 'src+src>target;...' (empty = none)"),
        "num_classes": (int, "4", "number of output classes"),
        "latent_dim": (int, "32", "latent width of the variational encoder"),
        "dropout": (float, "0.2", "dropout rate before the classifier head"),
    },
    "augment": {
        "resize": (int, "256", "square resize side before cropping"),
        "crop": (int, "224", "square crop side fed to the model"),
        "flip_lr": (float, "0.5", "left/right flip probability"),
        "flip_ud": (float, "0.5", "up/down flip probability"),
        "hue": (float, "0.05", "max hue shift (fraction of the hue circle)"),
        "contrast_lo": (float, "0.8", "contrast factor lower bound"),
        "contrast_hi": (float, "1.2", "contrast factor upper bound"),
        "saturation_lo": (float, "0.8", "saturation factor lower bound"),
        "saturation_hi": (float, "1.2", "saturation factor upper bound"),
        "mask_min": (int, "5", "min random masks per image"),
        "mask_max": (int, "8", "max random masks per image"),
        "mask_size_lo": (float, "0.05", "mask side lower bound (fraction of image side)"),
        "mask_size_hi": (float, "0.20", "mask side upper bound (fraction of image side)"),
        "quasi_random": (_bool, "true", "drive draws with scrambled Halton (false = seeded PRNG)"),
    },
    "train": {
        "optimizer": (str, "", "nesterov | adam (empty = phase default)"),
        "base_lr": (float, "0.01", "initial learning rate"),
        "end_lr": (float, "1e-5", "final learning rate"),
        "power": (float, "2.0", "polynomial decay power"),
        "steps": (int, "500", "number of optimization steps"),
        "batch_size": (int, "16", "samples per step"),
        "balanced": (_bool, "true", "sample classes with equal probability"),
        "clip_norm": (float, "5.0", "global gradient-norm ceiling"),
        "eval_every": (int, "50", "steps between metric evaluations"),
        "label_smoothing": (float, "0.1", "soft-target mixing factor"),
        "golden_weight": (float, "1.0", "loss weight for golden-tier samples"),
        "tfl_weight": (float, "0.3", "loss weight for tfl-tier samples"),
        "vae_beta": (float, "1.0", "KL coefficient of the VAE loss"),
        "vae_lambda": (float, "1.0", "classification coefficient of the VAE loss"),
        "momentum": (float, "0.9", "Nesterov momentum"),
        "beta1": (float, "0.9", "Adam first-moment decay"),
        "beta2": (float, "0.999", "Adam second-moment decay"),
        "adam_eps": (float, "1e-8", "Adam denominator epsilon"),
        "seed": (int, "", "master seed (empty = $OCT_ENGINE_SEED or 0)"),
        "workers": (int, "1", "data worker threads (1 keeps strict determinism)"),
    },
    "data": {
        "manifest": (str, "", "training manifest CSV"),
        "val_manifest": (str, "", "validation manifest CSV (optional)"),
    },
}


def parse_stages(text: str) -> list[StageConfig]:
    """Parse e.g. ``2x32,1x64df``: blocks x channels, d = downsample, f = factorized."""
    stages = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        flags = ""
        while token and token[-1] in "df":
            flags = token[-1] + flags
            token = token[:-1]
        try:
            blocks, channels = token.split("x")
            stages.append(StageConfig(
                num_blocks=int(blocks), out_channels=int(channels),
                downsample="d" in flags, factorized="f" in flags,
            ))
        except ValueError as e:
            raise ConfigError(f"bad stage token {token!r} (want <blocks>x<channels>[d][f])") from e
    if not stages:
        raise ConfigError("model.stages must define at least one stage")
    return stages


def parse_attention(text: str) -> list[tuple[list[int], int]]:
    """Parse e.g. ``0>1;0+1>2`` into (source stage ids, target stage id) pairs."""
    links = []
    for token in text.split(";"):
        token = token.strip()
        if not token:
            continue
        try:
            sources, target = token.split(">")
            links.append(([int(s) for s in sources.split("+")], int(target)))
        except ValueError as e:
            raise ConfigError(f"bad attention link {token!r} (want 'src+src>target')") from e
    return links


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Read a ``[section] key = value`` file, rejecting unknown entries."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            out.setdefault(section, {})[key] = value
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    augment: AugmentConfig
    train: TrainSettings
    manifest: str
    val_manifest: str
    golden_weight: float
    tfl_weight: float
    workers: int
    seed: int


def build_run_config(file_values: dict | None = None,
                     overrides: dict[str, str] | None = None,
                     phase: str = "classifier") -> RunConfig:
    """Merge schema defaults, config-file values, and ``section.key`` overrides.

    Seed precedence: explicit value, then $OCT_ENGINE_SEED, then 0.
    """
    values: dict[str, dict[str, str]] = {
        s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()
    }
    for section, pairs in (file_values or {}).items():
        values[section].update(pairs)
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        values[section][key] = raw

    parsed: dict[str, dict] = {}
    for section, pairs in values.items():
        parsed[section] = {}
        for key, raw in pairs.items():
            caster = SCHEMA[section][key][0]
            if raw == "" and caster is not str:
                parsed[section][key] = None
                continue
            try:
                parsed[section][key] = caster(raw)
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})") from e

    m, a, t, d = parsed["model"], parsed["augment"], parsed["train"], parsed["data"]

    seed = t["seed"]
    if seed is None:
        env = os.environ.get(ENV_SEED, "").strip()
        if env:
            try:
                seed = int(env)
            except ValueError as e:
                raise ConfigError(f"${ENV_SEED} is not an integer: {env!r}") from e
        else:
            seed = 0

    head = "vae_twohead" if phase == "vae" else "classifier"
    model_cfg = ModelConfig(
        input_size=(m["input_channels"], m["input_size"], m["input_size"]),
        stages=parse_stages(m["stages"]),
        attention_links=parse_attention(m["attention"]),
        num_classes=m["num_classes"],
        latent_dim=m["latent_dim"],
        dropout_rate=m["dropout"],
        head=head,
    )
    augment_cfg = AugmentConfig(
        resize=(a["resize"], a["resize"]),
        crop=(a["crop"], a["crop"]),
        flip_lr_prob=a["flip_lr"],
        flip_ud_prob=a["flip_ud"],
        hue_delta_max=a["hue"],
        contrast_range=(a["contrast_lo"], a["contrast_hi"]),
        saturation_range=(a["saturation_lo"], a["saturation_hi"]),
        mask_count_range=(a["mask_min"], a["mask_max"]),
        mask_size_range=(a["mask_size_lo"], a["mask_size_hi"]),
        quasi_random=a["quasi_random"],
    )
    optimizer = t["optimizer"] or ("adam" if phase == "vae" else "nesterov")
    settings = TrainSettings(
        phase=phase,
        optimizer=optimizer,
        schedule=LRSchedule(base_lr=t["base_lr"], end_lr=t["end_lr"],
                            power=t["power"], total_steps=t["steps"]),
        max_steps=t["steps"],
        batch_size=t["batch_size"],
        balanced=t["balanced"],
        clip_norm=t["clip_norm"],
        eval_every=t["eval_every"],
        label_smoothing=t["label_smoothing"],
        vae_beta=t["vae_beta"],
        vae_lambda=t["vae_lambda"],
        momentum=t["momentum"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        adam_eps=t["adam_eps"],
        seed=seed,
    )
    try:
        model_cfg.validate()
        augment_cfg.validate()
        settings.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if augment_cfg.crop[0] != model_cfg.input_size[1]:
        raise ConfigError(
            f"augment.crop ({augment_cfg.crop[0]}) must equal model.input_size "
            f"({model_cfg.input_size[1]})"
        )
    return RunConfig(
        model=model_cfg,
        augment=augment_cfg,
        train=settings,
        manifest=d["manifest"] or "",
        val_manifest=d["val_manifest"] or "",
        golden_weight=t["golden_weight"],
        tfl_weight=t["tfl_weight"],
        workers=t["workers"],
        seed=seed,
    )


def schema_documentation() -> str:
    """Human-readable table of every config key with its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, help_text) in keys.items():
            shown = default if default != "" else "(empty)"
            lines.append(f"  {key} = {shown}  # {help_text}")
        lines.append("")
    return "\n".join(lines)
