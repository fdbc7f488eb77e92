"""Seeded synthetic foley corpus: seven tone/noise recipes, one per category.

Clips are 4 s mono 16-bit WAVs at the source rate.  Optional pseudo-features are a
fixed random projection of the clip's log-mel rows plus a class offset, so the
feature rows carry structure a model can learn (unlike stub features).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import audio, formats
from .manifest import Manifest, ManifestRecord, write_manifest
from .vqvae import N_CLASSES


def _envelope(n, rate, onsets, decay):
    t = np.arange(n) / rate
    env = np.zeros(n)
    for t0 in onsets:
        after = t >= t0
        env[after] += np.exp(-(t[after] - t0) / decay)
    return env


def make_clip(category, seed, rate=audio.SOURCE_RATE, seconds=audio.CLIP_SECONDS):
    rng = np.random.default_rng([seed, category])
    n = int(round(rate * seconds))
    t = np.arange(n) / rate
    noise = rng.normal(size=n)
    if category == 0:      # bark: harmonic bursts
        f0 = rng.uniform(350, 600)
        tone = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in (1, 2, 3))
        x = tone * _envelope(n, rate, rng.uniform(0, 3.5, size=3), 0.08)
    elif category == 1:    # footsteps: regular low thumps
        period = rng.uniform(0.4, 0.7)
        onsets = np.arange(rng.uniform(0, 0.3), seconds, period)
        x = np.convolve(noise, np.ones(40) / 40, mode="same") * 4 * _envelope(n, rate, onsets, 0.03)
    elif category == 2:    # gunshot: one loud broadband burst
        x = noise * _envelope(n, rate, [rng.uniform(0.2, 1.5)], 0.25)
    elif category == 3:    # keyboard: fast bright clicks
        onsets = np.sort(rng.uniform(0, 3.9, size=int(rng.integers(15, 30))))
        x = np.diff(noise, prepend=0.0) * 0.6 * _envelope(n, rate, onsets, 0.006)
    elif category == 4:    # vehicle: modulated low sawtooth
        f0 = rng.uniform(40, 90) * (1 + 0.2 * t / seconds)
        phase = np.cumsum(f0) / rate
        x = (2 * (phase % 1.0) - 1) * (0.7 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t))
    elif category == 5:    # rain: steady high-passed noise
        x = 0.5 * np.diff(noise, prepend=0.0)
    else:                  # sneeze/cough: band-limited noise bursts
        carrier = np.sin(2 * np.pi * rng.uniform(800, 1500) * t)
        x = noise * (0.5 + carrier) * _envelope(n, rate, rng.uniform(0.2, 3.0, size=2), 0.15)
    x = x / (np.max(np.abs(x)) + 1e-9) * rng.uniform(0.3, 0.8)
    return audio.Waveform(x.astype(np.float32), rate)


def pseudo_features(waveform, rows, mel_params, seed):
    """(rows, frames) features: seeded projection of the log-mel plus a small seeded jitter."""
    w = audio.resample(waveform, mel_params.sample_rate)
    mel = audio.melspectrogram(w, mel_params).values.astype(np.float64)
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=(rows, mel.shape[0])) / np.sqrt(mel.shape[0])
    return (np.tanh(0.3 * (proj @ mel)) + 0.01 * rng.normal(size=(rows, mel.shape[1]))).astype(np.float32)


def make_corpus(out_dir, n_clips=64, seed=0, feature_rows=None, mel_params=None):
    """Write ``n_clips`` WAVs (round-robin over categories) and a manifest; returns the manifest path.

    With ``feature_rows`` and ``mel_params`` also writes ``features/<stem>.cfe``.
    """
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    if feature_rows:
        (out / "features").mkdir(exist_ok=True)
    records = []
    for i in range(n_clips):
        c = i % N_CLASSES
        name = f"clips/{c}_{i:04d}.wav"
        w = make_clip(c, seed * 100003 + i)
        audio.write_wav(out / name, w)
        if feature_rows:
            f = pseudo_features(w, feature_rows, mel_params, seed)
            formats.write_matrix(out / "features" / f"{c}_{i:04d}.cfe", f)
        records.append(ManifestRecord(name, c, "train"))
    path = out / "manifest.tsv"
    write_manifest(path, Manifest(records, out))
    return path
