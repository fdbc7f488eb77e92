import numpy as np
import pytest

from zenfoley.errors import ContractError, CoverageError, FormatError, MissingFilesError
from zenfoley.manifest import Manifest, ManifestRecord, read_manifest, stratified_split, write_manifest

DEV_COUNTS = (617, 703, 777, 800, 581, 741, 631)


def full_manifest(counts=DEV_COUNTS):
    return Manifest([ManifestRecord(f"c{c}/{i:04d}.wav", c) for c, n in enumerate(counts) for i in range(n)])


def test_development_split_counts():
    m = full_manifest()
    assert len(m) == 4850
    s = stratified_split(m, 35, seed=0)
    assert len(s.subset("val")) == 245
    assert len(s.subset("train")) == 4605
    assert s.subset("val").counts().tolist() == [35] * 7


def test_split_deterministic_and_seed_dependent():
    m = full_manifest((50,) * 7)
    a, b = stratified_split(m, 5, seed=9), stratified_split(m, 5, seed=9)
    assert [r.split for r in a] == [r.split for r in b]
    c = stratified_split(m, 5, seed=10)
    assert [r.split for r in a] != [r.split for r in c]


def test_zero_validation_and_coverage():
    m = full_manifest((3,) * 7)
    assert all(r.split == "train" for r in stratified_split(m, 0))
    with pytest.raises(CoverageError):
        stratified_split(m, 4)


def test_manifest_invariants():
    with pytest.raises(ContractError):
        Manifest([ManifestRecord("a.wav", 7)])
    with pytest.raises(ContractError):
        Manifest([ManifestRecord("a.wav", 0, "test")])
    with pytest.raises(ContractError):
        Manifest([ManifestRecord("a.wav", 0), ManifestRecord("a.wav", 1)])


def test_round_trip_and_parse_errors(tmp_path):
    m = stratified_split(full_manifest((4,) * 7), 1, seed=3)
    write_manifest(tmp_path / "m.tsv", m)
    back = read_manifest(tmp_path / "m.tsv")
    assert back.records == m.records
    assert back.paths()[0] == tmp_path / "c0/0000.wav"
    (tmp_path / "bad.tsv").write_text("a.wav\tx\ttrain\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.tsv")
    (tmp_path / "bad2.tsv").write_text("a.wav 0 train\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad2.tsv")


def test_by_category_groups():
    m = full_manifest((2, 0, 1, 0, 0, 0, 3))
    groups = m.by_category()
    assert sorted(groups) == [0, 2, 6]
    assert np.array_equal(m.counts(), [2, 0, 1, 0, 0, 0, 3])


def test_missing_manifest_is_missing_files_error(tmp_path):
    with pytest.raises(MissingFilesError):
        read_manifest(tmp_path / "absent.tsv")
