"""Fréchet Audio Distance between Gaussians fit to clip embeddings, with pluggable embedding backends."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import audio, formats
from .errors import ContractError, CoverageError, DimensionError, FormatError, MissingFilesError
from .vqvae import CATEGORIES

BACKENDS = ("precomputed", "spectral-stats")
EIG_TOLERANCE = 1e-6


@dataclass
class EmbeddingSet:
    matrix: np.ndarray          # (num_clips, E)
    backend: str
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-d, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ContractError("embedding matrix contains non-finite values")


@dataclass
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class FadReport:
    values: dict[int, float]
    backend: str
    n_generated: dict[int, int]
    n_reference: dict[int, int]

    def records(self):
        return [{"category_id": c, "category_name": CATEGORIES[c], "fad_value": self.values[c],
                 "n_generated": self.n_generated[c], "n_reference": self.n_reference[c]}
                for c in sorted(self.values)]

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records())

    def to_table(self):
        lines = [f"FAD ({self.backend})",
                 f"{'id':>2}  {'category':<20}{'fad':>14}{'n_gen':>8}{'n_ref':>8}"]
        for r in self.records():
            lines.append(f"{r['category_id']:>2}  {r['category_name']:<20}{r['fad_value']:>14.6f}"
                         f"{r['n_generated']:>8}{r['n_reference']:>8}")
        return "\n".join(lines) + "\n"


def spectral_stats_embedding(waveform, params=audio.MelParams()):
    """[per-band mean || per-band std] of the log-mel spectrogram: 2 * n_mels values."""
    w = audio.resample(waveform, params.sample_rate)
    mel = audio.melspectrogram(w, params).values.astype(np.float64)
    return np.concatenate([mel.mean(axis=1), mel.std(axis=1)])


def embed_clips(manifest, backend="spectral-stats", params=audio.MelParams()):
    """One embedding row per manifest record, in manifest order.

    ``precomputed`` reads each record's path as a CFE1 matrix (rows are frames, averaged);
    ``spectral-stats`` reads it as a WAV clip.
    """
    if backend not in BACKENDS:
        raise ContractError(f"unknown embedding backend {backend!r}; expected one of {BACKENDS}")
    paths = manifest.paths()
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise MissingFilesError(missing)
    rows = []
    for p in paths:
        if backend == "precomputed":
            rows.append(formats.read_matrix(p).astype(np.float64).mean(axis=0))
        else:
            rows.append(spectral_stats_embedding(audio.load_wav(p), params))
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise FormatError(f"embedding widths differ across clips: {sorted(dims)}")
    matrix = np.stack(rows) if rows else np.zeros((0, 0))
    return EmbeddingSet(matrix, backend, [str(p) for p in paths])


def gaussian_stats(e):
    """Sample mean and unbiased (n - 1) covariance, symmetrized."""
    m = e.matrix if isinstance(e, EmbeddingSet) else np.asarray(e, dtype=np.float64)
    if m.shape[0] < 2:
        raise ContractError(f"need at least 2 clips for a covariance, got {m.shape[0]}")
    mu = m.mean(axis=0)
    d = m - mu
    c = d.T @ d / (m.shape[0] - 1)
    return FrechetStats(mu, (c + c.T) / 2)


def _sym_eig(a):
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    if vals.size and vals.min() < -EIG_TOLERANCE:
        raise ContractError(f"matrix not positive semi-definite (min eigenvalue {vals.min():.3e})")
    return np.clip(vals, 0.0, None), vecs


def psd_sqrt(a):
    vals, vecs = _sym_eig(a)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sqrt_product(sigma_b, sigma_e):
    """Symmetric PSD root R of Σ_b^{1/2} Σ_e Σ_b^{1/2}; tr(R) = tr((Σ_b Σ_e)^{1/2})."""
    root_b = psd_sqrt(sigma_b)
    vals, vecs = _sym_eig(root_b @ sigma_e @ root_b)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(sigma_b, sigma_e):
    """tr((Σ_b Σ_e)^{1/2}) as the sum of singular values of Σ_e^{1/2} Σ_b^{1/2}.

    Same value as tr(sqrt_product(...)) since (Σ_e^{1/2}Σ_b^{1/2})^T (Σ_e^{1/2}Σ_b^{1/2}) is
    Σ_b^{1/2}Σ_eΣ_b^{1/2}, but singular values keep absolute error near machine epsilon where
    square roots of tiny eigenvalues would amplify it to sqrt(epsilon).
    """
    return float(np.linalg.svd(psd_sqrt(sigma_e) @ psd_sqrt(sigma_b), compute_uv=False).sum())


def frechet_distance(a, b):
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"stats dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    # the singular values of M and M^T coincide, so both orders give the same trace; averaging
    # them makes the result exactly symmetric in (a, b)
    cross = trace_sqrt_product(a.sigma, b.sigma) + trace_sqrt_product(b.sigma, a.sigma)
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - cross)
    if value < -EIG_TOLERANCE:
        raise ContractError(f"negative Fréchet distance {value:.3e}")
    return max(value, 0.0)


def evaluate_fad(generated, reference, backend="spectral-stats", params=audio.MelParams()):
    """Per-category FAD of ``generated`` against ``reference`` manifests."""
    gen, ref = generated.by_category(), reference.by_category()
    only = sorted(set(gen) ^ set(ref))
    if only:
        raise CoverageError(f"categories {only} present in only one manifest")
    values, n_gen, n_ref = {}, {}, {}
    for c in sorted(gen):
        sg = gaussian_stats(embed_clips(gen[c], backend, params))
        sr = gaussian_stats(embed_clips(ref[c], backend, params))
        values[c] = frechet_distance(sg, sr)
        n_gen[c], n_ref[c] = len(gen[c]), len(ref[c])
    return FadReport(values, backend, n_gen, n_ref)
