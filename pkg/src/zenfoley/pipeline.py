"""End-to-end stages: split, prepare, train-vqvae, extract-codes, train-snail, generate, evaluate.

Every stage reads and writes inside one run directory:

    manifest.tsv          split-tagged manifest
    cache/                CEM1 CEmbed caches (raw, unnormalized) + index.tsv
    corpus_stats.json     per-family mean/std over the train split
    vqvae/, snail/        step_XXXXXXXX.zfck checkpoints + log.jsonl
    codes/                CODE grids + index.tsv
    generated/            WAVs + manifest.tsv
    fad_report.txt/.jsonl
"""
from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, formats, nn
from . import tensor as T
from .errors import ContractError, DimensionError, FormatError, MissingFilesError, VersioningError
from .fad import evaluate_fad
from .manifest import Manifest, ManifestRecord, read_manifest, stratified_split, write_manifest
from .vqvae import MVQVAE, N_CLASSES, extract_codes, reseed_dead_codes, train_step_vqvae
from .zensnail import SnailModel, sample, train_step_snail


def _seed(*parts):
    """Deterministic 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _read_index(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        name, cid, split = line.split("\t")
        rows.append((name, int(cid), split))
    return rows


def _write_index(path, rows):
    Path(path).write_text("".join(f"{n}\t{c}\t{s}\n" for n, c, s in rows))


# -- learning-rate schedule ---------------------------------------------------------
@dataclass(frozen=True)
class CyclicLrSchedule:
    base_lr: float = 1e-5
    max_lr: float = 1e-4
    cycle_steps: int = 2000
    mode: str = "triangular"

    def __call__(self, step):
        pos = step % (2 * self.cycle_steps)
        frac = pos / self.cycle_steps if pos <= self.cycle_steps else (2 * self.cycle_steps - pos) / self.cycle_steps
        return self.base_lr + (self.max_lr - self.base_lr) * frac


def cyclic_lr(step, schedule):
    return schedule(step)


# -- split and prepare ------------------------------------------------------------------
def source_manifest(cfg):
    if not cfg.manifest:
        raise ContractError("config key 'manifest' is not set")
    return read_manifest(cfg.resolve(cfg.manifest))


def split(cfg, out, seed):
    """Write ``out/manifest.tsv`` with per-class validation tags; paths rewritten relative to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    src = source_manifest(cfg)
    tagged = stratified_split(src, cfg.per_class_val, seed)
    records = [ManifestRecord(os.path.relpath(tagged.resolve(r), out), r.category_id, r.split) for r in tagged]
    manifest = Manifest(records, out)
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


def run_manifest(cfg, out):
    path = Path(out) / "manifest.tsv"
    return read_manifest(path) if path.is_file() else source_manifest(cfg)


def clip_cembed(cfg, wav_path, features_path=None, stub_seed=0):
    """Raw CEmbed values (mel rows + feature rows, frames) for one clip."""
    w = audio.resample(audio.load_wav(wav_path, cfg.clip_seconds), cfg.model_rate)
    mel = audio.melspectrogram(w, cfg.mel_params())
    if features_path is None:
        feats = audio.stub_features(stub_seed, cfg.feature_rows, mel.values.shape[1])
    else:
        feats = audio.load_external_features(features_path)
    if feats.values.shape[0] != cfg.feature_rows:
        raise DimensionError(f"{features_path}: {feats.values.shape[0]} feature rows, config expects "
                             f"{cfg.feature_rows}")
    return audio.assemble_cembed(mel, feats).values


def prepare(cfg, out, seed):
    """Per clip: resample -> mel -> load or stub features -> CEM1 cache; then corpus statistics."""
    out = Path(out)
    manifest = run_manifest(cfg, out)
    cache = out / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    feat_dir = cfg.resolve(cfg.features_dir) if cfg.features_dir else None
    bad, rows, train, every = [], [], [], []
    for i, rec in enumerate(manifest):
        path = manifest.resolve(rec)
        fpath = feat_dir / (Path(rec.path).stem + ".cfe") if feat_dir else None
        try:
            values = clip_cembed(cfg, path, fpath, _seed(seed, zlib.crc32(rec.path.encode())))
        except (OSError, FormatError) as exc:
            bad.append(f"{path} ({exc})" if not isinstance(exc, FileNotFoundError) else str(path))
            continue
        name = f"{i:05d}.cem"
        formats.write_matrix(cache / name, values, formats.CEMBED_MAGIC)
        rows.append((name, rec.category_id, rec.split))
        every.append(values)
        if rec.split == "train":
            train.append(values)
    if bad:
        raise MissingFilesError(bad)
    _write_index(cache / "index.tsv", rows)
    stats = audio.CorpusStats.from_cembeds([audio.CEmbed(v, cfg.n_mels, cfg.feature_rows)
                                            for v in (train or every)])
    (out / "corpus_stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n")
    return rows, stats


def load_stats(out):
    d = json.loads((Path(out) / "corpus_stats.json").read_text())
    return audio.CorpusStats(**d)


def load_cembeds(cfg, out, splits=("train",)):
    """Normalized CEmbed values (N, rows, frames), labels, and cache names for the given splits."""
    out = Path(out)
    stats = load_stats(out)
    rows = [r for r in _read_index(out / "cache" / "index.tsv") if r[2] in splits]
    values = [stats.normalize(formats.read_matrix(out / "cache" / n, formats.CEMBED_MAGIC), cfg.n_mels)
              for n, _, _ in rows]
    values = np.stack(values) if values else np.zeros((0, cfg.cembed_rows, cfg.n_frames), np.float32)
    return values, np.array([c for _, c, _ in rows], dtype=np.int64), [n for n, _, _ in rows]


# -- training ---------------------------------------------------------------------
def latest_checkpoint(directory):
    found = sorted(Path(directory).glob("step_*.zfck"))
    if not found:
        raise MissingFilesError([Path(directory) / "step_*.zfck"])
    return found[-1]


class Trainer:
    """Shared loop: epoch permutations, periodic logs and checkpoints, bit-exact resume."""

    kind = ""

    def __init__(self, cfg, out, seed, data, labels, batch_size):
        self.cfg, self.seed = cfg, seed
        self.dir = Path(out) / self.kind
        self.dir.mkdir(parents=True, exist_ok=True)
        self.data, self.labels = data, labels
        if len(data) == 0:
            raise ContractError(f"{self.kind}: no training examples")
        self.batch_size = batch_size
        self.steps_per_epoch = math.ceil(len(data) / batch_size)
        self.step = 0
        self.history = []

    # subclass hooks
    def module(self):
        raise NotImplementedError

    def train_one(self, ids, lr):
        raise NotImplementedError

    def extra_state(self):
        return {}

    def load_extra(self, tensors):
        pass

    def lr(self, step):
        raise NotImplementedError

    def total_steps(self):
        raise NotImplementedError

    def batch_ids(self, step):
        epoch, i = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng(_seed(self.seed, 1, epoch)).permutation(len(self.data))
        return np.sort(perm[i * self.batch_size:(i + 1) * self.batch_size])

    def state(self):
        tensors = {f"model.{k}": v for k, v in self.module().state_dict().items()}
        tensors.update({f"opt.{k}": v for k, v in self.opt.state_dict().items()})
        tensors.update(self.extra_state())
        return tensors

    def save(self, path=None):
        path = path or self.dir / f"step_{self.step:08d}.zfck"
        meta = {"kind": self.kind, "seed": self.seed, "config": self.cfg.to_text()}
        formats.save_checkpoint(path, self.state(), meta, self.cfg.model_hash(), self.step)
        return path

    def load(self, path):
        ck = formats.load_checkpoint(path)
        if ck["meta"].get("kind") != self.kind:
            raise VersioningError(f"{path}: checkpoint kind {ck['meta'].get('kind')!r}, expected {self.kind!r}")
        if ck["config_hash"] != self.cfg.model_hash():
            raise VersioningError(f"{path}: config hash {ck['config_hash']} != {self.cfg.model_hash()}")
        t = ck["tensors"]
        self.module().load_state_dict({k[6:]: v for k, v in t.items() if k.startswith("model.")})
        self.opt.load_state_dict({k[4:]: v for k, v in t.items() if k.startswith("opt.")}, ck["step"])
        self.load_extra(t)
        self.step = ck["step"]
        log = self.dir / "log.jsonl"
        if log.is_file():   # drop records written after the checkpoint by an earlier run
            kept = [ln for ln in log.read_text().splitlines() if json.loads(ln)["step"] <= self.step]
            log.write_text("".join(ln + "\n" for ln in kept))
        return ck

    def run(self, until=None):
        """Train up to ``until`` (default: the configured total).  Returns per-step records."""
        until = self.total_steps() if until is None else until
        log_path = self.dir / "log.jsonl"
        if self.step == 0 and log_path.exists():
            log_path.unlink()
        records = []
        while self.step < until:
            ids = self.batch_ids(self.step)
            lr = self.lr(self.step)
            rec = self.train_one(ids, lr)
            self.step += 1
            rec = {"step": self.step, "lr": lr, **rec}
            records.append(rec)
            if self.step % self.cfg.log_interval == 0:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if self.step % self.cfg.checkpoint_interval == 0 or self.step == until:
                self.save()
        self.history.extend(records)
        return records


class VqTrainer(Trainer):
    kind = "vqvae"

    def __init__(self, cfg, out, seed):
        data, labels, _ = load_cembeds(cfg, out, ("train",))
        super().__init__(cfg, out, seed, data, labels, cfg.vq_batch_size)
        self.model = MVQVAE(cfg.vq_config(), seed)
        self.opt = nn.Adam(self.model.named_parameters(), lr=cfg.vq_lr)

    def module(self):
        return self.model

    def extra_state(self):
        return {"usage": self.model.usage.astype(np.float32)}

    def load_extra(self, tensors):
        self.model.usage[:] = tensors["usage"].astype(np.int64)

    def lr(self, step):
        return self.cfg.vq_lr

    def total_steps(self):
        return self.cfg.vq_steps or self.cfg.vq_epochs * self.steps_per_epoch

    def train_one(self, ids, lr):
        x = self.data[ids]
        epoch, i = divmod(self.step, self.steps_per_epoch)
        reseeded = 0
        if i == 0 and epoch > 0:
            with T.no_grad():
                z_e = self.model.encode(x).data
            reseeded = reseed_dead_codes(self.model, z_e, np.random.default_rng(_seed(self.seed, 2, epoch)))
        inp = x
        if self.cfg.mask_count:
            inp = np.stack([audio.mask_augment(audio.CEmbed(v, self.cfg.n_mels, self.cfg.feature_rows),
                                               self.cfg.mask_spec(_seed(self.seed, 3, self.step, j))).values
                            for j, v in enumerate(x)])
        out = train_step_vqvae(self.model, self.opt, inp, self.labels[ids], lr, self.cfg.vq_max_grad_norm,
                               target=x, batch_ids=ids.tolist())
        out["reseeded"] = reseeded
        return out


class SnailTrainer(Trainer):
    kind = "snail"

    def __init__(self, cfg, out, seed):
        grids, labels, _ = load_codes(out, ("train",))
        super().__init__(cfg, out, seed, grids, labels, cfg.snail_batch_size)
        self.model = SnailModel(cfg.snail_config(), seed)
        self.opt = nn.Adam(self.model.named_parameters(), lr=cfg.snail_base_lr)
        self.schedule = CyclicLrSchedule(cfg.snail_base_lr, cfg.snail_max_lr, cfg.snail_cycle_steps)

    def module(self):
        return self.model

    def lr(self, step):
        return self.schedule(step)

    def total_steps(self):
        return self.cfg.snail_steps or self.cfg.snail_epochs * self.steps_per_epoch

    def train_one(self, ids, lr):
        return train_step_snail(self.model, self.opt, self.data[ids], self.labels[ids], lr,
                                self.cfg.snail_max_grad_norm, batch_ids=ids.tolist())


def train_vqvae(cfg, out, seed, resume=None, until=None):
    trainer = VqTrainer(cfg, out, seed)
    if resume:
        trainer.load(resume)
    trainer.run(until)
    return trainer


def train_snail(cfg, out, seed, resume=None, until=None):
    trainer = SnailTrainer(cfg, out, seed)
    if resume:
        trainer.load(resume)
    trainer.run(until)
    return trainer


def load_vqvae(cfg, path):
    ck = formats.load_checkpoint(path)
    if ck["meta"].get("kind") != "vqvae" or ck["config_hash"] != cfg.model_hash():
        raise VersioningError(f"{path}: not a VQ-VAE checkpoint for config hash {cfg.model_hash()}")
    model = MVQVAE(cfg.vq_config(), 0)
    model.load_state_dict({k[6:]: v for k, v in ck["tensors"].items() if k.startswith("model.")})
    model.usage[:] = ck["tensors"]["usage"].astype(np.int64)
    return model


def load_snail(cfg, path):
    ck = formats.load_checkpoint(path)
    if ck["meta"].get("kind") != "snail" or ck["config_hash"] != cfg.model_hash():
        raise VersioningError(f"{path}: not a prior checkpoint for config hash {cfg.model_hash()}")
    model = SnailModel(cfg.snail_config(), 0)
    model.load_state_dict({k[6:]: v for k, v in ck["tensors"].items() if k.startswith("model.")})
    return model


# -- codes -----------------------------------------------------------------------------
def extract_code_files(cfg, out, checkpoint=None):
    out = Path(out)
    model = load_vqvae(cfg, checkpoint or latest_checkpoint(out / "vqvae"))
    values, labels, names = load_cembeds(cfg, out, ("train", "val"))
    splits = {n: s for n, _, s in _read_index(out / "cache" / "index.tsv")}
    grids = extract_codes(model, values, cfg.vq_batch_size)
    codes = out / "codes"
    codes.mkdir(exist_ok=True)
    rows = []
    for name, grid, label in zip(names, grids, labels):
        fname = Path(name).stem + ".code"
        formats.write_code_grid(codes / fname, grid, int(label))
        rows.append((fname, int(label), splits[name]))
    _write_index(codes / "index.tsv", rows)
    return grids, labels


def load_codes(out, splits=("train",)):
    codes = Path(out) / "codes"
    rows = [r for r in _read_index(codes / "index.tsv") if r[2] in splits]
    grids, labels = [], []
    for name, _, _ in rows:
        g, label = formats.read_code_grid(codes / name)
        grids.append(g)
        labels.append(label)
    return np.stack(grids), np.array(labels, dtype=np.int64), [n for n, _, _ in rows]


# -- generation and evaluation ------------------------------------------------------------
def decode_to_waveform(cfg, vq, stats, grid):
    with T.no_grad():
        values = vq.decode_indices(grid).data[0]
    mel_rows = stats.denormalize(values, cfg.n_mels)[:cfg.n_mels]
    return audio.invert_mel(audio.MelSpec(mel_rows, cfg.mel_params()), cfg.griffin_lim_iters, cfg.n_samples)


def generate(cfg, out, seed, per_class=None, vq_checkpoint=None, snail_checkpoint=None):
    """Sample ``per_class`` grids per category, decode, vocode; writes WAVs and a manifest."""
    out = Path(out)
    per_class = cfg.generate_per_class if per_class is None else per_class
    if per_class < 0:
        raise ContractError(f"per_class must be >= 0, got {per_class}")
    vq = load_vqvae(cfg, vq_checkpoint or latest_checkpoint(out / "vqvae"))
    prior = load_snail(cfg, snail_checkpoint or latest_checkpoint(out / "snail"))
    if prior.cfg.vocab_size != vq.cfg.codebook_size:
        raise VersioningError(f"prior vocabulary {prior.cfg.vocab_size} != codebook size {vq.cfg.codebook_size}")
    stats = load_stats(out)
    gen = out / "generated"
    gen.mkdir(parents=True, exist_ok=True)
    records = []
    for c in range(N_CLASSES if per_class else 0):
        grids = sample(prior, [c] * per_class, cfg.temperature, _seed(seed, 4, c))
        for i, grid in enumerate(grids):
            name = f"{c}_{i:03d}.wav"
            audio.write_wav(gen / name, decode_to_waveform(cfg, vq, stats, grid))
            records.append(ManifestRecord(name, c, "val"))
    manifest = Manifest(records, gen)
    write_manifest(gen / "manifest.tsv", manifest)
    return manifest


def evaluate(cfg, out, generated=None, reference=None):
    """FAD of generated clips against the validation split; writes text and JSONL reports."""
    out = Path(out)
    gen = read_manifest(generated or out / "generated" / "manifest.tsv")
    ref = read_manifest(reference) if reference else run_manifest(cfg, out).subset("val")
    report = evaluate_fad(gen, ref, cfg.fad_backend)
    (out / "fad_report.txt").write_text(report.to_table())
    (out / "fad_report.jsonl").write_text(report.to_jsonl())
    return report


def run_all(cfg, out, seed, per_class=None):
    """split -> prepare -> train-vqvae -> extract-codes -> train-snail -> generate -> evaluate."""
    split(cfg, out, seed)
    prepare(cfg, out, seed)
    vq = train_vqvae(cfg, out, seed)
    extract_code_files(cfg, out)
    prior = train_snail(cfg, out, seed)
    generate(cfg, out, seed, per_class)
    report = evaluate(cfg, out)
    return {"vqvae": vq.history[-1] if vq.history else None,
            "snail": prior.history[-1] if prior.history else None,
            "vqvae_history": vq.history, "snail_history": prior.history, "fad": report}


# -- shape dry run ---------------------------------------------------------------------
def shape_dry_run(cfg, seed=0):
    """One clip through every stage at the configured scale, untrained weights; returns shapes."""
    from .synth import make_clip
    w = audio.resample(make_clip(0, seed, cfg.source_rate, cfg.clip_seconds), cfg.model_rate)
    mel = audio.melspectrogram(w, cfg.mel_params()).values
    feats = audio.stub_features(seed, cfg.feature_rows, mel.shape[1]).values
    cembed = audio.assemble_cembed(mel, feats).values
    vq = MVQVAE(cfg.vq_config(), seed)
    with T.no_grad():
        grid = vq.quantize(vq.encode(cembed)).indices
        recon = vq.decode_indices(grid).data[0]
    wave = audio.invert_mel(audio.MelSpec(recon[:cfg.n_mels], cfg.mel_params()), 0, cfg.n_samples).samples
    return {"input": w.samples.shape, "mel": mel.shape, "features": feats.shape, "cembed": cembed.shape,
            "latent": grid.shape, "decoded": recon.shape, "audio": wave.shape}
