"""Flat key-value run configuration with dotted sections.

A config file is plain text, one `section.key = value` per line, `#`
comments allowed; command-line overrides use the same dotted keys. Types
are inferred from the defaults below. The CLI defaults target the synthetic
desk-scale datasets (notably the learning rate); the paper-protocol values
remain the library defaults of LossConfig.
"""

from __future__ import annotations

import json
from pathlib import Path

from .captions import Modality
from .encoders import ModelDims, PrefixConfig, VARIANTS
from .synth_data import SynthConfig
from .training import ConfigError, LossConfig, ModelConfig

DEFAULTS = {
    "synth.num_identities": 24,
    "synth.samples_per_identity": 8,
    "synth.num_cameras": 4,
    "synth.image_h": 64,
    "synth.image_w": 32,
    "synth.subject_kind": "person",
    "synth.train_fraction": 0.5,
    "synth.attribute_vocab_size": 0,
    "synth.occlusion_rgb": 0.1,
    "synth.occlusion_nir": 0.2,
    "synth.occlusion_tir": 0.2,
    "synth.noise_rgb": 0.3,
    "synth.noise_nir": 0.3,
    "synth.noise_tir": 0.3,
    "synth.noise_sigma": 0.05,
    "model.embed_dim": 64,
    "model.text_width": 64,
    "model.pseudo_width": 64,
    "model.patch_size": 8,
    "model.depth": 2,
    "model.heads": 4,
    "model.context_length": 77,
    "model.mlp_ratio": 4,
    "model.inverse_dropout": 0.1,
    "model.n_learnable": 2,
    "model.offset_scale": 5.0,
    "model.freeze_text": False,
    "model.mixer_bias": True,
    "model.fusion_heads": 4,
    "loss.smoothing_eps": 0.1,
    "loss.triplet_margin": 0.3,
    "loss.lr_init": 2e-3,
    "loss.lr_final": 2e-4,
    "loss.epochs": 15,
    "loss.weight_decay": 1e-4,
    "train.batch_p": 4,
    "train.batch_k": 4,
    "train.eval_every": 0,
    "train.metric": "cosine",
    "run.seed": 1,
    "run.variant": "idea",
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


class RunConfig:
    """Merged view: defaults, then config file, then explicit overrides."""

    def __init__(self, values: dict):
        self.values = dict(DEFAULTS)
        self.values.update(values)
        if self.values["model.n_learnable"] < 0:
            raise ConfigError("model.n_learnable must be >= 0")
        if self.values["model.offset_scale"] <= 0:
            raise ConfigError("model.offset_scale must be > 0")
        if self.values["run.variant"] not in VARIANTS:
            raise ConfigError(f"run.variant must be one of {VARIANTS}")

    @classmethod
    def load(cls, config_path=None, overrides=()) -> "RunConfig":
        values = {}
        if config_path:
            values.update(parse_config_file(config_path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, _, raw = item.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def variant(self) -> str:
        return self.values["run.variant"]

    def synth_config(self, seed=None) -> SynthConfig:
        v = self.values
        return SynthConfig(
            num_identities=v["synth.num_identities"],
            samples_per_identity=v["synth.samples_per_identity"],
            num_cameras=v["synth.num_cameras"],
            image_size=(v["synth.image_h"], v["synth.image_w"]),
            subject_kind=v["synth.subject_kind"],
            train_fraction=v["synth.train_fraction"],
            attribute_vocab_size=v["synth.attribute_vocab_size"],
            occlusion_rates={
                Modality.RGB: v["synth.occlusion_rgb"],
                Modality.NIR: v["synth.occlusion_nir"],
                Modality.TIR: v["synth.occlusion_tir"],
            },
            noise_rates={
                Modality.RGB: v["synth.noise_rgb"],
                Modality.NIR: v["synth.noise_nir"],
                Modality.TIR: v["synth.noise_tir"],
            },
            noise_sigma=v["synth.noise_sigma"],
            seed=self.seed if seed is None else seed,
        )

    def model_config(self) -> ModelConfig:
        v = self.values
        dims = ModelDims(
            embed_dim=v["model.embed_dim"],
            text_width=v["model.text_width"],
            pseudo_width=v["model.pseudo_width"],
            patch_size=v["model.patch_size"],
            image_size=(v["synth.image_h"], v["synth.image_w"]),
            depth=v["model.depth"],
            heads=v["model.heads"],
            context_length=v["model.context_length"],
            mlp_ratio=v["model.mlp_ratio"],
            inverse_dropout=v["model.inverse_dropout"],
        )
        prefix = PrefixConfig(n_learnable=v["model.n_learnable"])
        return ModelConfig(
            dims=dims,
            prefix=prefix,
            offset_scale=v["model.offset_scale"],
            freeze_text=v["model.freeze_text"],
            mixer_bias=v["model.mixer_bias"],
            fusion_heads=v["model.fusion_heads"],
        )

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(
            smoothing_eps=v["loss.smoothing_eps"],
            triplet_margin=v["loss.triplet_margin"],
            lr_init=v["loss.lr_init"],
            lr_final=v["loss.lr_final"],
            epochs=v["loss.epochs"],
            weight_decay=v["loss.weight_decay"],
        )

    def snapshot(self, extra=None) -> dict:
        snap = dict(sorted(self.values.items()))
        if extra:
            snap.update(extra)
        return snap

    def write_snapshot(self, path, extra=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot(extra), fh, indent=1, sort_keys=True)
            fh.write("\n")
