"""Run configuration with the two built-in presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ConfigError
from .transformer import TransformerConfig


@dataclass
class RunConfig:
    preset: str = "desk"
    # ViLM
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    memory_slots: int = 8
    mesh: bool = True
    dropout: float = 0.0
    # LM (plain encoder-decoder by default)
    lm_memory_slots: int = 0
    lm_mesh: bool = False
    # images
    image_size: int = 32
    patch_size: int = 8
    d_feature: int = 64
    # training
    batch_size: int = 16
    lr_visual: float = 5e-4
    lr: float = 1e-3
    epochs: int = 60
    patience: int = 20
    seed: int = 0
    min_freq: int = 3
    # decoding
    beam_size: int = 3
    concept_max_len: int = 60
    report_max_len: int = 100
    # paths
    annotations: str = None
    image_dir: str = None
    lexicon: str = None
    concepts: str = None
    out_dir: str = "run"
    single_stage: bool = False

    def __post_init__(self):
        for name in ("batch_size", "epochs", "patience", "beam_size", "concept_max_len",
                     "report_max_len", "min_freq", "image_size", "patch_size", "d_feature"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0 or self.lr_visual <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lm_memory_slots < 0:
            raise ConfigError("lm_memory_slots must be >= 0")
        # surfaces transformer-level errors (head divisibility etc.) before any work
        self.vilm_config()
        self.lm_config()

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    def _max_len(self):
        return max(self.concept_max_len, self.report_max_len, 2 * self.n_patches) + 2

    def vilm_config(self):
        return TransformerConfig(self.d_model, self.n_heads, self.n_enc_layers, self.n_dec_layers,
                                 self.d_ff, self.memory_slots, self.mesh, self.dropout, self._max_len())

    def lm_config(self):
        return TransformerConfig(self.d_model, self.n_heads, self.n_enc_layers, self.n_dec_layers,
                                 self.d_ff, self.lm_memory_slots, self.lm_mesh, self.dropout, self._max_len())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        preset = doc.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = dict(PRESETS[preset], preset=preset)
        merged.update(doc)
        return cls(**merged)

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


PRESETS = {
    # published hyperparameters; far too large to train on a desk CPU
    "paper": dict(d_model=512, n_heads=8, n_enc_layers=3, n_dec_layers=3, d_ff=2048, memory_slots=40,
                  d_feature=1024, dropout=0.1, lr_visual=5e-5, lr=1e-4, epochs=100, beam_size=3),
    # small model used by the synthetic experiments; rates are 10x the published pair, same ratio
    "desk": dict(d_model=64, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=128, memory_slots=8,
                 d_feature=64, dropout=0.0, lr_visual=5e-4, lr=1e-3, epochs=60, beam_size=3),
}
