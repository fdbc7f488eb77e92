"""Waveforms, log-mel spectrograms, external feature rows, CEmbed assembly and masking."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from . import formats
from .errors import AlignmentError, ConfigError, ContractError, FormatError

SOURCE_RATE = 22050
MODEL_RATE = 24000
CLIP_SECONDS = 4.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelParams:
    fft_size: int = 1024
    hop: int = 320
    n_mels: int = 129
    sample_rate: int = MODEL_RATE
    floor: float = 1e-5
    fmin: float = 0.0
    fmax: float | None = None

    def n_frames(self, n_samples):
        return n_samples // self.hop


@dataclass
class MelSpec:
    values: np.ndarray
    params: MelParams


@dataclass
class ExternalFeatures:
    values: np.ndarray
    source: str = ""


@dataclass
class CEmbed:
    values: np.ndarray
    mel_rows: int
    feature_rows: int

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class MaskSpec:
    time_mask_max_frames: int = 0
    freq_mask_max_rows: int = 0
    num_masks_per_kind: int = 0
    seed: int = 0


# -- waveform I/O --------------------------------------------------------------
def fit_length(samples, n):
    """Zero-pad at the end or center-crop to exactly ``n`` samples."""
    if len(samples) >= n:
        start = (len(samples) - n) // 2
        return samples[start:start + n]
    return np.concatenate([samples, np.zeros(n - len(samples), dtype=samples.dtype)])


def load_wav(path, duration=CLIP_SECONDS):
    try:
        with wave.open(str(path), "rb") as w:
            channels, width = w.getnchannels(), w.getsampwidth()
            rate, n = w.getframerate(), w.getnframes()
            if channels != 1:
                raise FormatError(f"{path}: channels={channels}, expected mono")
            if width != 2:
                raise FormatError(f"{path}: sample width={8 * width} bits, expected 16")
            if w.getcomptype() != "NONE":
                raise FormatError(f"{path}: compression={w.getcomptype()}, expected PCM")
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    samples = (pcm.astype(np.float32) / np.float32(32768.0))
    samples = fit_length(samples, int(round(duration * rate)))
    return Waveform(samples, rate)


def write_wav(path, waveform):
    pcm = np.clip(np.round(np.asarray(waveform.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(waveform.sample_rate))
        w.writeframes(pcm.astype("<i2").tobytes())


def resample(w, target_rate):
    if target_rate <= 0:
        raise ContractError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(int(target_rate), int(w.sample_rate))
    up, down = int(target_rate) // g, int(w.sample_rate) // g
    out = resample_poly(np.asarray(w.samples, dtype=np.float64), up, down)
    n = int(round(len(w.samples) * target_rate / w.sample_rate))
    return Waveform(fit_length(out, n).astype(np.float32), int(target_rate))


# -- spectral ----------------------------------------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(params):
    fmax = params.sample_rate / 2 if params.fmax is None else params.fmax
    return mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(fmax), params.n_mels + 2))


def mel_centers(params):
    return mel_band_edges(params)[1:-1]


def mel_filterbank(params):
    """Triangular HTK-spaced filters, shape (n_mels, fft_size // 2 + 1), peak 1."""
    edges = mel_band_edges(params)
    freqs = np.fft.rfftfreq(params.fft_size, 1.0 / params.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def _window(n):
    return np.hanning(n + 1)[:-1]  # periodic Hann


def stft(samples, fft_size, hop, n_frames):
    """Frames centered at t*hop (reflect-padded); returns (fft_size//2+1, n_frames) complex."""
    x = np.asarray(samples, dtype=np.float64)
    half = fft_size // 2
    mode = "reflect" if len(x) > half else "constant"
    xp = np.pad(x, (half, half + hop), mode=mode)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(fft_size)[None]
    frames = xp[idx] * _window(fft_size)[None]
    return np.fft.rfft(frames, axis=1).T


def istft(spec, fft_size, hop, n_samples):
    """Weighted overlap-add inverse of ``stft``."""
    n_frames = spec.shape[1]
    half = fft_size // 2
    win = _window(fft_size)
    frames = np.fft.irfft(spec.T, n=fft_size, axis=1) * win[None]
    length = max(n_samples + fft_size + hop, (n_frames - 1) * hop + fft_size)
    buf = np.zeros(length)
    wsum = np.zeros(length)
    for t in range(n_frames):
        buf[t * hop:t * hop + fft_size] += frames[t]
        wsum[t * hop:t * hop + fft_size] += win * win
    out = np.where(wsum > 1e-8, buf / np.maximum(wsum, 1e-8), 0.0)
    return out[half:half + n_samples]


def melspectrogram(w, params=MelParams()):
    """STFT magnitude -> mel filterbank -> clamp at ``params.floor`` -> natural log."""
    if w.sample_rate != params.sample_rate:
        raise ConfigError(f"waveform at {w.sample_rate} Hz, mel params expect {params.sample_rate} Hz")
    if params.hop > params.fft_size:
        raise ConfigError(f"hop {params.hop} exceeds fft_size {params.fft_size}")
    n_frames = params.n_frames(len(w.samples))
    mag = np.abs(stft(w.samples, params.fft_size, params.hop, n_frames))
    mel = mel_filterbank(params) @ mag
    values = np.log(np.maximum(mel, params.floor)).astype(np.float32)
    return MelSpec(values, params)


def invert_mel(m, iterations=32, n_samples=None):
    """Griffin-Lim reconstruction from the pseudo-inverse mel projection.

    ``iterations=0`` returns the zero-phase reconstruction.  Output length is
    4 s at the mel sample rate unless ``n_samples`` is given.
    """
    if iterations < 0:
        raise ContractError(f"iterations must be >= 0, got {iterations}")
    p = m.params
    n_samples = int(CLIP_SECONDS * p.sample_rate) if n_samples is None else n_samples
    amp = np.exp(np.asarray(m.values, dtype=np.float64))
    mag = np.maximum(np.linalg.pinv(mel_filterbank(p)) @ amp, 0.0)
    n_frames = m.values.shape[1]
    x = istft(mag.astype(np.complex128), p.fft_size, p.hop, n_samples)
    for _ in range(iterations):
        phase = np.angle(stft(x, p.fft_size, p.hop, n_frames))
        x = istft(mag * np.exp(1j * phase), p.fft_size, p.hop, n_samples)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32), p.sample_rate)


# -- external features and CEmbed -------------------------------------------------
def load_external_features(path):
    return ExternalFeatures(formats.read_matrix(path, formats.FEATURE_MAGIC), str(path))


def save_external_features(path, f):
    formats.write_matrix(path, f.values, formats.FEATURE_MAGIC)


_MASK64 = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MUL1 = 0xBF58476D1CE4E5B9
SPLITMIX_MUL2 = 0x94D049BB133111EB


def stub_features(seed, rows, cols):
    """Deterministic stand-in for pretrained-encoder features.

    Cell i (row-major) is splitmix64 applied to state seed + (i + 1) * GAMMA; the
    top 53 bits u give 2 * u / 2**53 - 1 in [-1, 1), stored as float32.
    """
    if rows <= 0 or cols <= 0:
        raise ContractError(f"rows and cols must be positive, got {rows}x{cols}")
    i = np.arange(1, rows * cols + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + i * np.uint64(SPLITMIX_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MUL2)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)
    return ExternalFeatures((2.0 * u - 1.0).astype(np.float32).reshape(rows, cols), f"stub:{seed}")


def assemble_cembed(m, f):
    mel = m.values if isinstance(m, MelSpec) else np.asarray(m)
    feat = f.values if isinstance(f, ExternalFeatures) else np.asarray(f)
    if mel.shape[1] != feat.shape[1]:
        raise AlignmentError(f"frame counts differ: mel {mel.shape[1]} vs features {feat.shape[1]}")
    values = np.concatenate([mel, feat], axis=0).astype(np.float32)
    return CEmbed(values, mel.shape[0], feat.shape[0])


def split_cembed(c):
    return c.values[:c.mel_rows], c.values[c.mel_rows:]


def _mask_band(band, rng, spec):
    rows, cols = band.shape
    fill = band.mean(dtype=np.float64)
    mask = np.zeros(band.shape, dtype=bool)
    for _ in range(spec.num_masks_per_kind):
        if spec.freq_mask_max_rows > 0:
            h = int(rng.integers(1, spec.freq_mask_max_rows + 1))
            r0 = int(rng.integers(0, rows - h + 1))
            mask[r0:r0 + h, :] = True
        if spec.time_mask_max_frames > 0:
            wdt = int(rng.integers(1, spec.time_mask_max_frames + 1))
            c0 = int(rng.integers(0, cols - wdt + 1))
            mask[:, c0:c0 + wdt] = True
    out = band.copy()
    out[mask] = fill
    return out, mask


def mask_augment(c, spec, return_masks=False):
    """Time and frequency masks drawn independently for the mel and feature sub-bands.

    Masked cells take the sub-band mean of the unmasked input.
    """
    mel, feat = split_cembed(c)
    if spec.freq_mask_max_rows > min(mel.shape[0], feat.shape[0]) or spec.time_mask_max_frames > c.shape[1]:
        raise ContractError(f"mask extents ({spec.freq_mask_max_rows} rows, {spec.time_mask_max_frames} frames) "
                            f"exceed sub-band shapes {mel.shape} / {feat.shape}")
    rng_mel, rng_feat = np.random.default_rng(spec.seed).spawn(2)
    mel_out, mel_mask = _mask_band(mel, rng_mel, spec)
    feat_out, feat_mask = _mask_band(feat, rng_feat, spec)
    out = CEmbed(np.concatenate([mel_out, feat_out], axis=0).astype(np.float32), c.mel_rows, c.feature_rows)
    if return_masks:
        return out, mel_mask, feat_mask
    return out


# -- corpus normalization ----------------------------------------------------
@dataclass
class CorpusStats:
    """Per-family standardization constants (mel rows vs feature rows)."""

    mel_mean: float = 0.0
    mel_std: float = 1.0
    feat_mean: float = 0.0
    feat_std: float = 1.0
    n_clips: int = 0

    @classmethod
    def from_cembeds(cls, cembeds):
        mel = np.concatenate([split_cembed(c)[0].reshape(-1) for c in cembeds]).astype(np.float64)
        feat = np.concatenate([split_cembed(c)[1].reshape(-1) for c in cembeds]).astype(np.float64)
        return cls(float(mel.mean()), float(mel.std()) or 1.0,
                   float(feat.mean()), float(feat.std()) or 1.0, len(cembeds))

    def normalize(self, values, mel_rows):
        out = np.asarray(values, dtype=np.float64).copy()
        out[..., :mel_rows, :] = (out[..., :mel_rows, :] - self.mel_mean) / self.mel_std
        out[..., mel_rows:, :] = (out[..., mel_rows:, :] - self.feat_mean) / self.feat_std
        return out.astype(np.float32)

    def denormalize(self, values, mel_rows):
        out = np.asarray(values, dtype=np.float64).copy()
        out[..., :mel_rows, :] = out[..., :mel_rows, :] * self.mel_std + self.mel_mean
        out[..., mel_rows:, :] = out[..., mel_rows:, :] * self.feat_std + self.feat_mean
        return out.astype(np.float32)

    def to_dict(self):
        return {"mel_mean": self.mel_mean, "mel_std": self.mel_std, "feat_mean": self.feat_mean,
                "feat_std": self.feat_std, "n_clips": self.n_clips}
