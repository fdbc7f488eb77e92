"""Class-conditional autoregressive prior over code grids with Zen-mode attention.

Grids are flattened in raster order (rows outer, time/cols inner).  Attention keys,
queries and values come from strided causal convolutions (factor S), so the
attention matrix is ceil(N/S)^2 per head; a causal transposed convolution maps
the attention output back to length N and a residual carries the full-resolution
stream past the block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError, TrainingError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class SnailConfig:
    vocab_size: int = 1024
    n_classes: int = 7
    grid_rows: int = 288
    grid_cols: int = 75
    channels: int = 256
    kernel: int = 3
    n_blocks: int = 4
    res_per_block: int = 1
    downsample: int = 4
    zen_kernel: int = 4
    heads: int = 1
    zero_head: bool = True

    @property
    def seq_len(self):
        return self.grid_rows * self.grid_cols


def raster_order(grid):
    """(rows, cols) -> row-major sequence, cols fastest.  Position of (r, c) is r*cols + c."""
    g = np.asarray(grid)
    return g.reshape(*g.shape[:-2], -1)


def unraster(seq, rows, cols):
    s = np.asarray(seq)
    return s.reshape(*s.shape[:-1], rows, cols)


class CausalResidual(nn.Module):
    def __init__(self, channels, kernel, rng):
        self.conv = nn.CausalConv1d(channels, 2 * channels, kernel, rng)
        self.out = nn.CausalConv1d(channels, channels, 1, rng)
        self.channels = channels

    def forward(self, x):
        h = self.conv(T.elu(x))
        gate = h[:, :, :self.channels] * T.sigmoid(h[:, :, self.channels:])
        return x + self.out(gate)


def causal_attention(q, k, v, heads):
    """Masked scaled dot-product attention; q, k, v (B, M, A).  Returns (B, M, A)."""
    b, m, a = q.shape
    dh = a // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, m, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask = np.triu(np.full((m, m), MASK_VALUE), k=1).astype(scores.dtype)
    weights = T.softmax(scores + Tensor(mask))
    out = T.matmul(weights, vh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, m, a)), weights


class ZenAttentionBlock(nn.Module):
    def __init__(self, channels, rng, downsample=4, kernel=4, heads=1, attn_dim=None):
        attn_dim = channels if attn_dim is None else attn_dim
        if attn_dim % heads:
            raise ContractError(f"attention width {attn_dim} not divisible by {heads} heads")
        self.query = nn.CausalConv1d(channels, attn_dim, kernel, rng, stride=downsample)
        self.key = nn.CausalConv1d(channels, attn_dim, kernel, rng, stride=downsample)
        self.value = nn.CausalConv1d(channels, attn_dim, kernel, rng, stride=downsample)
        self.up = nn.CausalConvTranspose1d(attn_dim, channels, downsample, rng, stride=downsample)
        self.downsample = downsample
        self.heads = heads
        self.attention_entries = 0   # entries in the most recent attention matrix, per sequence

    def attend(self, x):
        """Attention path only, upsampled back to the input length."""
        n = x.shape[1]
        if n < self.downsample:
            raise ContractError(f"sequence length {n} shorter than downsample factor {self.downsample}")
        out, weights = causal_attention(self.query(x), self.key(x), self.value(x), self.heads)
        self.attention_entries = int(np.prod(weights.shape[1:]))
        return self.up(out)[:, :n]

    def forward(self, x):
        return x + self.attend(x)


def zen_attention(x, block):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return block(x)


class SnailModel(nn.Module):
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.tok_emb = nn.Embedding(cfg.vocab_size + 1, c, rng, scale=0.5)   # last row: start token
        self.cls_emb = nn.Embedding(cfg.n_classes, c, rng, scale=0.5)
        self.pos_emb = nn.Embedding(cfg.seq_len, c, rng, scale=0.1)
        self.res = [[CausalResidual(c, cfg.kernel, rng) for _ in range(cfg.res_per_block)]
                    for _ in range(cfg.n_blocks)]
        self.res_flat = [r for group in self.res for r in group]
        self.attn = [ZenAttentionBlock(c, rng, cfg.downsample, cfg.zen_kernel, cfg.heads)
                     for _ in range(cfg.n_blocks)]
        self.head = nn.Linear(c, cfg.vocab_size, rng, zero=cfg.zero_head)

    def named_parameters(self, prefix=""):
        out = {}
        for name in ("tok_emb", "cls_emb", "pos_emb", "head"):
            out.update(getattr(self, name).named_parameters(f"{prefix}{name}."))
        for i, r in enumerate(self.res_flat):
            out.update(r.named_parameters(f"{prefix}res.{i}."))
        for i, a in enumerate(self.attn):
            out.update(a.named_parameters(f"{prefix}attn.{i}."))
        return out

    def embed(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ContractError(f"token values must lie in [0, {self.cfg.vocab_size})")
        return self.tok_emb(tokens)

    def logits_from_embeddings(self, emb, labels):
        """Logits (B, N, K) from token embeddings (B, N, C); position i only sees tokens < i."""
        b, n, _ = emb.shape
        if n != self.cfg.seq_len:
            raise ContractError(f"sequence length {n} != {self.cfg.seq_len}")
        start = self.tok_emb(np.full((b, 1), self.cfg.vocab_size))
        h = T.concat([start, emb[:, :n - 1]], axis=1)
        h = h + T.reshape(self.pos_emb.weight, (1, n, self.cfg.channels))
        cls = T.reshape(self.cls_emb(np.asarray(labels).reshape(b)), (b, 1, self.cfg.channels))
        for group, attn in zip(self.res, self.attn):
            for r in group:
                h = r(h + cls)
            h = attn(h + cls)
        return self.head(T.elu(h))

    def forward(self, tokens, labels):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        return self.logits_from_embeddings(self.embed(tokens), np.atleast_1d(labels))

    @property
    def attention_entries(self):
        return sum(a.attention_entries for a in self.attn)


def snail_logits(model, tokens, label):
    return model(tokens, label)


def snail_nll(model, tokens, labels):
    """Mean over positions (and batch) of -log p(token_i | tokens_<i, label)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    return T.cross_entropy(model(tokens, labels), tokens)


def sample(model, labels, temperature=1.0, seed=0, greedy=False):
    """Ancestral sampling in raster order; returns grids (B, rows, cols).

    Each sample draws from its own generator seeded by (seed, sample index).
    """
    labels = np.atleast_1d(np.asarray(labels))
    if not greedy and temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    cfg = model.cfg
    b, n = len(labels), cfg.seq_len
    rngs = [np.random.default_rng([seed, i]) for i in range(b)]
    tokens = np.zeros((b, n), dtype=np.int64)
    with T.no_grad():
        for i in range(n):
            logits = model(tokens, labels).data[:, i].astype(np.float64)
            if greedy:
                tokens[:, i] = np.argmax(logits, axis=-1)
                continue
            z = logits / temperature
            z = z - z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            for j in range(b):
                cdf = np.cumsum(p[j])
                tokens[j, i] = min(int(np.searchsorted(cdf, rngs[j].random() * cdf[-1], side="right")),
                                   cfg.vocab_size - 1)
    return unraster(tokens, cfg.grid_rows, cfg.grid_cols)


def train_step_snail(model, optimizer, grids, labels, lr, max_grad_norm=1.0, batch_ids=()):
    """One clipped gradient step on mean NLL; returns nll and grad norms."""
    model.zero_grad()
    tokens = raster_order(np.asarray(grids))
    loss = snail_nll(model, tokens, np.asarray(labels))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite NLL {value}", batch_ids)
    T.backward(loss)
    raw, clipped = nn.clip_grad_norm(model.parameters(), max_grad_norm)
    optimizer.step(lr)
    return {"nll": value, "grad_norm": clipped, "grad_norm_raw": raw}
