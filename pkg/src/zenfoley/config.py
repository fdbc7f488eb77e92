"""Run configuration: a plain ``key = value`` text file with a fixed key set.

Defaults are the full-scale settings.  Blank lines and ``#`` comments are ignored;
unknown keys, duplicate keys and unparsable values are configuration errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from . import audio
from .errors import ConfigError
from .vqvae import DOWNSAMPLE, VqConfig
from .zensnail import SnailConfig

# keys that change how long a run lasts or what it emits, not the state it trains
RUN_LENGTH_KEYS = frozenset({
    "vq_epochs", "vq_steps", "snail_epochs", "snail_steps", "log_interval", "checkpoint_interval",
    "generate_per_class", "temperature", "griffin_lim_iters", "fad_backend", "manifest", "features_dir",
})


@dataclass
class RunConfig:
    # data
    manifest: str = ""             # source manifest; relative to the config file
    features_dir: str = ""         # CFE1 feature files named <clip stem>.cfe; empty -> stub features
    per_class_val: int = 35
    source_rate: int = audio.SOURCE_RATE
    model_rate: int = audio.MODEL_RATE
    clip_seconds: float = audio.CLIP_SECONDS
    n_mels: int = 129
    hop: int = 320
    fft_size: int = 1024
    feature_rows: int = 1023
    # augmentation
    mask_time_max_frames: int = 30
    mask_freq_max_rows: int = 13
    mask_count: int = 2
    # vq-vae
    vq_channels: int = 128
    embed_dim: int = 128
    codebook_size: int = 1024
    residual_blocks: int = 2
    parallel_block: bool = True
    beta: float = 0.25
    class_weight: float = 0.01
    class_conditioning: bool = True
    vq_batch_size: int = 16
    vq_lr: float = 3e-3
    vq_max_grad_norm: float = 0.0
    vq_epochs: int = 800
    vq_steps: int = 0              # > 0 overrides vq_epochs
    # prior
    snail_channels: int = 256
    snail_kernel: int = 3
    snail_blocks: int = 4
    snail_res_per_block: int = 1
    zen_downsample: int = 4
    zen_kernel: int = 4
    snail_heads: int = 1
    snail_batch_size: int = 8
    snail_base_lr: float = 1e-5
    snail_max_lr: float = 1e-4
    snail_cycle_steps: int = 2000
    snail_max_grad_norm: float = 1.0
    snail_epochs: int = 265
    snail_steps: int = 0
    # bookkeeping and generation
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 500
    generate_per_class: int = 32
    temperature: float = 1.0
    griffin_lim_iters: int = 32
    fad_backend: str = "spectral-stats"

    base_dir: Path = dataclasses.field(default=Path("."), compare=False, repr=False)

    # -- derived ----------------------------------------------------------------
    @property
    def n_samples(self):
        return int(round(self.clip_seconds * self.model_rate))

    @property
    def n_frames(self):
        return self.n_samples // self.hop

    @property
    def cembed_rows(self):
        return self.n_mels + self.feature_rows

    def mel_params(self):
        return audio.MelParams(fft_size=self.fft_size, hop=self.hop, n_mels=self.n_mels,
                               sample_rate=self.model_rate)

    def vq_config(self):
        return VqConfig(in_rows=self.cembed_rows, in_frames=self.n_frames, channels=self.vq_channels,
                        embed_dim=self.embed_dim, codebook_size=self.codebook_size,
                        residual_blocks=self.residual_blocks, parallel_block=self.parallel_block,
                        beta=self.beta, class_weight=self.class_weight,
                        class_conditioning=self.class_conditioning)

    def latent_shape(self):
        return self.cembed_rows // DOWNSAMPLE, self.n_frames // DOWNSAMPLE

    def snail_config(self):
        rows, cols = self.latent_shape()
        return SnailConfig(vocab_size=self.codebook_size, grid_rows=rows, grid_cols=cols,
                           channels=self.snail_channels, kernel=self.snail_kernel, n_blocks=self.snail_blocks,
                           res_per_block=self.snail_res_per_block, downsample=self.zen_downsample,
                           zen_kernel=self.zen_kernel, heads=self.snail_heads)

    def mask_spec(self, seed):
        return audio.MaskSpec(self.mask_time_max_frames, self.mask_freq_max_rows, self.mask_count, seed)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    # -- validation and hashing ------------------------------------------------------
    def validate(self):
        positive = ["source_rate", "model_rate", "n_mels", "hop", "fft_size", "feature_rows", "vq_channels",
                    "embed_dim", "codebook_size", "vq_batch_size", "snail_channels", "snail_kernel",
                    "snail_blocks", "zen_downsample", "zen_kernel", "snail_heads", "snail_batch_size",
                    "snail_cycle_steps", "log_interval", "checkpoint_interval"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.clip_seconds <= 0:
            raise ConfigError(f"clip_seconds must be positive, got {self.clip_seconds}")
        for name in ("per_class_val", "mask_time_max_frames", "mask_freq_max_rows", "mask_count",
                     "residual_blocks", "vq_epochs", "vq_steps", "snail_epochs", "snail_steps",
                     "snail_res_per_block", "generate_per_class", "griffin_lim_iters", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.hop > self.fft_size:
            raise ConfigError(f"hop {self.hop} exceeds fft_size {self.fft_size}")
        rows, cols = self.cembed_rows, self.n_frames
        if rows % DOWNSAMPLE or cols % DOWNSAMPLE:
            raise ConfigError(f"CEmbed ({rows}, {cols}) not divisible by the encoder downsampling {DOWNSAMPLE}")
        n = (rows // DOWNSAMPLE) * (cols // DOWNSAMPLE)
        if n % self.zen_downsample:
            raise ConfigError(f"latent sequence length {n} not divisible by zen_downsample {self.zen_downsample}")
        if self.snail_channels % self.snail_heads:
            raise ConfigError(f"snail_channels {self.snail_channels} not divisible by snail_heads")
        if not 0 < self.snail_base_lr <= self.snail_max_lr:
            raise ConfigError(f"need 0 < snail_base_lr <= snail_max_lr, got {self.snail_base_lr}, {self.snail_max_lr}")
        if self.vq_lr < 0 or self.beta < 0 or self.temperature <= 0:
            raise ConfigError("vq_lr and beta must be >= 0 and temperature > 0")
        if self.fad_backend not in ("precomputed", "spectral-stats"):
            raise ConfigError(f"unknown fad_backend {self.fad_backend!r}")
        self.vq_config().validate()
        return self

    def values(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values().items())

    def model_hash(self):
        """Digest of every key except run-length and path keys; checkpoints carry it."""
        text = "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.values().items())
                       if k not in RUN_LENGTH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(name, kind, raw):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


_KINDS = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text, base_dir=Path(".")):
    known = {f.name: _KINDS[f.type] for f in fields(RunConfig) if f.name != "base_dir"}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse(key, known[key], raw)
    return RunConfig(**values, base_dir=Path(base_dir)).validate()


def load_config(path=None, overrides=None):
    """Defaults when ``path`` is None; ``overrides`` are applied after parsing."""
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        cfg = parse_config(path.read_text(), path.parent)
    if overrides:
        unknown = set(overrides) - set(cfg.values())
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()
