"""Class-conditioned vector-quantized autoencoder over CEmbed matrices (MVQVAE)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .tensor import Tensor

CATEGORIES = ("DogBark", "Footstep", "GunShot", "Keyboard", "MovingMotorVehicle", "Rain", "Sneeze/Cough")
N_CLASSES = len(CATEGORIES)
DOWNSAMPLE = 4


@dataclass
class VqConfig:
    in_rows: int = 1152
    in_frames: int = 300
    channels: int = 128
    embed_dim: int = 128
    codebook_size: int = 1024
    residual_blocks: int = 2
    parallel_block: bool = True
    beta: float = 0.25
    class_weight: float = 0.01
    class_conditioning: bool = True
    n_classes: int = N_CLASSES

    def latent_shape(self):
        return self.in_rows // DOWNSAMPLE, self.in_frames // DOWNSAMPLE

    def validate(self):
        if self.in_rows % DOWNSAMPLE or self.in_frames % DOWNSAMPLE:
            raise ConfigError(f"input ({self.in_rows}, {self.in_frames}) not divisible by {DOWNSAMPLE}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.codebook_size < 1 or self.embed_dim < 1 or self.channels < 2:
            raise ConfigError("codebook_size, embed_dim must be >= 1 and channels >= 2")


@dataclass
class LatentGrid:
    pre_quant: Tensor       # z_e (B, D, rows, frames)
    quantized: Tensor       # z_q, straight-through into z_e
    indices: np.ndarray     # (B, rows, frames)
    codewords: Tensor       # codebook rows gathered by indices, gradient into the codebook


@dataclass
class VqLoss:
    recon_mse: Tensor
    codebook_term: Tensor
    commitment_term: Tensor   # already scaled by beta
    class_ce: Tensor | None
    total: Tensor

    def values(self):
        out = {"recon_mse": self.recon_mse.item(), "codebook": self.codebook_term.item(),
               "commitment": self.commitment_term.item(), "total": self.total.item()}
        out["class_ce"] = self.class_ce.item() if self.class_ce is not None else None
        return out


class GatedResidual(nn.Module):
    def __init__(self, channels, rng):
        self.conv = nn.Conv2d(channels, 2 * channels, 3, rng, padding=1)
        self.out = nn.Conv2d(channels, channels, 1, rng)
        self.channels = channels

    def forward(self, x):
        h = self.conv(T.elu(x))
        gate = h[:, :self.channels] * T.sigmoid(h[:, self.channels:])
        return x + self.out(gate)


class ResStack(nn.Module):
    def __init__(self, channels, n, rng):
        self.blocks = [GatedResidual(channels, rng) for _ in range(n)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Encoder(nn.Module):
    """Two stride-2 stages (x4 per axis), main residual stack plus an optional parallel one."""

    def __init__(self, cfg, rng):
        c = cfg.channels
        self.down1 = nn.Conv2d(1, c // 2, 4, rng, stride=2, padding=1)
        self.down2 = nn.Conv2d(c // 2, c, 4, rng, stride=2, padding=1)
        self.mix = nn.Conv2d(c, c, 3, rng, padding=1)
        self.main = ResStack(c, cfg.residual_blocks, rng)
        self.parallel = ResStack(c, cfg.residual_blocks, rng) if cfg.parallel_block else None
        self.proj = nn.Conv2d(c, cfg.embed_dim, 1, rng)

    def forward(self, x):
        h = T.elu(self.down1(x))
        h = T.elu(self.down2(h))
        h = self.mix(h)
        out = self.main(h)
        if self.parallel is not None:
            out = out + self.parallel(h)
        return self.proj(T.elu(out))


class Decoder(nn.Module):
    def __init__(self, cfg, rng):
        c = cfg.channels
        self.inp = nn.Conv2d(cfg.embed_dim, c, 3, rng, padding=1)
        self.main = ResStack(c, cfg.residual_blocks, rng)
        self.parallel = ResStack(c, cfg.residual_blocks, rng) if cfg.parallel_block else None
        self.up1 = nn.ConvTranspose2d(c, c // 2, 4, rng, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(c // 2, 1, 4, rng, stride=2, padding=1)

    def forward(self, z):
        h = self.inp(z)
        out = self.main(h)
        if self.parallel is not None:
            out = out + self.parallel(h)
        h = T.elu(self.up1(T.elu(out)))
        return self.up2(h)


def nearest_codewords(flat, codebook):
    """Index of the nearest codeword per row of ``flat`` (N, D); ties go to the lowest index."""
    if codebook.shape[0] == 0:
        raise ContractError("empty codebook")
    z = np.asarray(flat, dtype=np.float64)
    e = np.asarray(codebook, dtype=np.float64)
    if z.shape[1] != e.shape[1]:
        raise DimensionError(f"latent channels {z.shape[1]} != codeword dim {e.shape[1]}")
    d = (z * z).sum(axis=1, keepdims=True) - 2.0 * z @ e.T + (e * e).sum(axis=1)[None]
    return np.argmin(d, axis=1)


def quantize(z_e, codebook):
    """Nearest-codeword quantization of z_e (B, D, rows, frames) against ``codebook`` (K, D)."""
    if codebook.shape[0] == 0:
        raise ContractError("empty codebook")
    if z_e.ndim != 4 or z_e.shape[1] != codebook.shape[1]:
        raise DimensionError(f"latent {z_e.shape} vs codebook {codebook.shape}")
    b, d, h, w = z_e.shape
    flat = z_e.data.transpose(0, 2, 3, 1).reshape(-1, d)
    idx = nearest_codewords(flat, codebook.data).reshape(b, h, w)
    chosen = T.transpose(T.embed_lookup(idx, codebook), (0, 3, 1, 2))
    z_q = T.straight_through(z_e, T.stop_gradient(chosen))
    return LatentGrid(z_e, z_q, idx, chosen)


def vqvae_loss(x, recon, z_e, codewords, logits=None, labels=None, beta=0.25, class_weight=0.01):
    """Reconstruction MSE + ||sg[z_e] - e||^2 + beta ||z_e - sg[e]||^2 + class_weight * CE.

    The two squared distances are summed over channels and averaged over grid cells.
    """
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    recon_mse = T.mse(recon, x)
    d_book = T.stop_gradient(z_e) - codewords
    codebook_term = T.mean(T.tsum(d_book * d_book, axis=1))
    d_commit = z_e - T.stop_gradient(codewords)
    commitment = T.mean(T.tsum(d_commit * d_commit, axis=1)) * float(beta)
    total = recon_mse + codebook_term + commitment
    class_ce = None
    if logits is not None:
        class_ce = T.cross_entropy(logits, np.asarray(labels))
        total = total + class_ce * float(class_weight)
    return VqLoss(recon_mse, codebook_term, commitment, class_ce, total)


class MVQVAE(nn.Module):
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        k = cfg.codebook_size
        self.codebook = nn.param(rng.uniform(-1.0 / k, 1.0 / k, size=(k, cfg.embed_dim)))
        self.class_head = nn.Linear(cfg.embed_dim, cfg.n_classes, rng)
        self.usage = np.zeros(k, dtype=np.int64)

    def _check_input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.cfg.in_rows or x.shape[2] % DOWNSAMPLE:
            raise DimensionError(f"CEmbed batch {x.shape} does not match in_rows={self.cfg.in_rows} "
                                 f"with frames divisible by {DOWNSAMPLE}")
        return x

    def encode(self, x):
        """(B, rows, frames) or (rows, frames) -> z_e (B, D, rows/4, frames/4)."""
        x = self._check_input(x)
        return self.encoder(T.reshape(x, (x.shape[0], 1) + x.shape[1:]))

    def quantize(self, z_e):
        return quantize(z_e, self.codebook)

    def decode(self, z_q):
        if z_q.ndim != 4 or z_q.shape[1] != self.cfg.embed_dim or z_q.shape[2] * DOWNSAMPLE != self.cfg.in_rows:
            raise DimensionError(f"latent {z_q.shape} does not match embed_dim={self.cfg.embed_dim}, "
                                 f"rows={self.cfg.in_rows // DOWNSAMPLE}")
        out = self.decoder(z_q)
        return T.reshape(out, (out.shape[0],) + out.shape[2:])

    def classify_latent(self, z_e):
        """Average z_e over both grid axes, then one linear map to class logits."""
        pooled = T.mean(T.mean(z_e, axis=3), axis=2)
        return self.class_head(pooled)

    def decode_indices(self, indices):
        idx = np.asarray(indices)
        if idx.ndim == 2:
            idx = idx[None]
        z = T.transpose(T.embed_lookup(idx, self.codebook), (0, 3, 1, 2))
        return self.decode(z)

    def loss(self, x, labels, target=None):
        """Forward pass and loss terms; ``target`` defaults to ``x`` (unmasked input)."""
        x = self._check_input(x)
        target = x if target is None else self._check_input(target)
        z_e = self.encode(x)
        grid = self.quantize(z_e)
        recon = self.decode(grid.quantized)
        logits = self.classify_latent(z_e) if self.cfg.class_conditioning else None
        loss = vqvae_loss(target, recon, z_e, grid.codewords, logits, labels,
                          self.cfg.beta, self.cfg.class_weight)
        return loss, grid, recon


def latent_diff(grid):
    """Mean squared distance between pre- and post-quantization encodings."""
    d = grid.pre_quant.data.astype(np.float64) - grid.quantized.data.astype(np.float64)
    return float(np.mean(d * d))


def train_step_vqvae(model, optimizer, x, labels, lr, max_grad_norm=0.0, target=None, batch_ids=()):
    """One gradient step; returns a dict of loss terms plus latent_diff and grad norms."""
    model.zero_grad()
    loss, grid, _ = model.loss(x, labels, target)
    total = loss.total.item()
    if not np.isfinite(total):
        raise TrainingError(f"non-finite VQ-VAE loss {total}", batch_ids)
    T.backward(loss.total)
    params = model.parameters()
    raw, clipped = nn.clip_grad_norm(params, max_grad_norm)
    optimizer.step(lr)
    np.add.at(model.usage, grid.indices.reshape(-1), 1)
    out = loss.values()
    out["latent_diff"] = latent_diff(grid)
    out["grad_norm"] = clipped
    out["grad_norm_raw"] = raw
    return out


def reseed_dead_codes(model, z_e_batch, rng):
    """Replace codewords with zero usage by random encoder outputs; resets usage counters.

    Returns the number of codewords replaced.
    """
    dead = np.flatnonzero(model.usage == 0)
    if dead.size:
        d = model.cfg.embed_dim
        pool = z_e_batch.transpose(0, 2, 3, 1).reshape(-1, d)
        pick = rng.integers(0, pool.shape[0], size=dead.size)
        model.codebook.data[dead] = pool[pick].astype(model.codebook.dtype)
    model.usage[:] = 0
    return int(dead.size)


def extract_codes(model, cembeds, batch_size=16):
    """Index grids (N, rows/4, frames/4) for normalized CEmbed values (N, rows, frames)."""
    out = []
    with T.no_grad():
        for i in range(0, len(cembeds), batch_size):
            z_e = model.encode(np.asarray(cembeds[i:i + batch_size], dtype=np.float32))
            out.append(model.quantize(z_e).indices)
    return np.concatenate(out, axis=0)
