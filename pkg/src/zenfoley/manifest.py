"""Clip manifests: tab-separated ``path<TAB>category_id<TAB>split`` lines, plus the per-class split."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, CoverageError, FormatError, MissingFilesError
from .vqvae import N_CLASSES

SPLITS = ("train", "val")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    category_id: int
    split: str = "train"


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path | None = None   # relative paths resolve against this directory

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if not 0 <= r.category_id < N_CLASSES:
                raise ContractError(f"{r.path}: category id {r.category_id} outside 0..{N_CLASSES - 1}")
            if r.split not in SPLITS:
                raise ContractError(f"{r.path}: split {r.split!r} not in {SPLITS}")
            if r.path in seen:
                raise ContractError(f"duplicate path {r.path}")
            seen.add(r.path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record):
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def paths(self):
        return [self.resolve(r) for r in self.records]

    def subset(self, split):
        return Manifest([r for r in self.records if r.split == split], self.root)

    def by_category(self):
        groups: dict[int, list[ManifestRecord]] = {}
        for r in self.records:
            groups.setdefault(r.category_id, []).append(r)
        return {c: Manifest(groups[c], self.root) for c in sorted(groups)}

    def counts(self):
        return np.bincount([r.category_id for r in self.records], minlength=N_CLASSES)


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFilesError([path])
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            cid = int(parts[1])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad category id {parts[1]!r}") from exc
        records.append(ManifestRecord(parts[0], cid, parts[2]))
    return Manifest(records, path.parent)


def write_manifest(path, manifest):
    lines = [f"{r.path}\t{r.category_id}\t{r.split}" for r in manifest.records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def stratified_split(manifest, per_class_val=35, seed=0):
    """Mark exactly ``per_class_val`` random clips of every category as validation, the rest train."""
    if per_class_val < 0:
        raise ContractError(f"per_class_val must be >= 0, got {per_class_val}")
    counts = manifest.counts()
    short = [c for c in range(N_CLASSES) if counts[c] < per_class_val]
    if short:
        raise CoverageError(f"categories {short} have fewer than {per_class_val} clips "
                            f"(counts {counts.tolist()})")
    rng = np.random.default_rng(seed)
    val = set()
    for c in range(N_CLASSES):
        members = [i for i, r in enumerate(manifest.records) if r.category_id == c]
        if per_class_val:
            val.update(int(i) for i in rng.choice(members, size=per_class_val, replace=False))
    records = [ManifestRecord(r.path, r.category_id, "val" if i in val else "train")
               for i, r in enumerate(manifest.records)]
    return Manifest(records, manifest.root)
