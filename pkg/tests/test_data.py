import numpy as np
import pytest

from meshfuse.data import (
    EmbeddingFileError,
    Manifest,
    ManifestError,
    MANIFEST_FIELDS,
    SubjectRecord,
    load_manifest,
    read_embedding,
    save_manifest,
    write_embedding,
)
from meshfuse.mesh import save_off
from meshfuse.structures import STRUCTURES
from meshfuse.synth import icosphere


def _record(sid, split="train", **kw):
    defaults = dict(
        age=40.0,
        diagnosis=None,
        embedding_path=f"emb/{sid}.mfe",
        mesh_paths={s: f"meshes/{sid}/{s}.off" for s in STRUCTURES},
    )
    defaults.update(kw)
    return SubjectRecord(subject_id=sid, split=split, **defaults)


def test_subject_record_validation():
    with pytest.raises(ManifestError, match="split"):
        _record("a", split="holdout")
    paths = {s: f"x/{s}.off" for s in STRUCTURES}
    del paths["brainstem"]
    with pytest.raises(ManifestError, match="missing mesh"):
        SubjectRecord("a", 40.0, None, "train", None, paths)


def test_manifest_rejects_duplicate_ids(tmp_path):
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest(tmp_path, [_record("a"), _record("a")])


def test_manifest_round_trip(tmp_path):
    mesh = icosphere(0)
    records = [_record("a"), _record("b", split="val", age=None, diagnosis=1)]
    for rec in records:
        d = tmp_path / "meshes" / rec.subject_id
        d.mkdir(parents=True)
        for s in STRUCTURES:
            save_off(mesh, d / f"{s}.off")
    manifest = Manifest(tmp_path, records)
    save_manifest(manifest, tmp_path / "manifest.csv")
    header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert header.split(",") == MANIFEST_FIELDS
    again = load_manifest(tmp_path / "manifest.csv", check_meshes=True)
    assert [r.subject_id for r in again.subjects] == ["a", "b"]
    assert again.subjects[0].age == 40.0
    assert again.subjects[1].age is None
    assert again.subjects[1].diagnosis == 1
    assert again.split_sizes() == {"train": 1, "val": 1, "test": 0}


def test_manifest_header_mismatch(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("subject_id,age\nx,1\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(path)


def test_manifest_checks_mesh_existence_and_vertex_counts(tmp_path):
    records = [_record("a"), _record("b")]
    manifest = Manifest(tmp_path, records)
    save_manifest(manifest, tmp_path / "manifest.csv")
    with pytest.raises(ManifestError, match="missing mesh file"):
        load_manifest(tmp_path / "manifest.csv")
    small, big = icosphere(0), icosphere(1)
    for rec, mesh in zip(records, (small, big)):
        d = tmp_path / "meshes" / rec.subject_id
        d.mkdir(parents=True)
        for s in STRUCTURES:
            save_off(mesh, d / f"{s}.off")
    with pytest.raises(ManifestError, match="vertices"):
        load_manifest(tmp_path / "manifest.csv")
    assert load_manifest(tmp_path / "manifest.csv", check_meshes=False)


def test_require_labels(tmp_path):
    manifest = Manifest(tmp_path, [_record("a", age=None)])
    with pytest.raises(ManifestError, match="age"):
        manifest.require_labels("regression")
    with pytest.raises(ManifestError, match="diagnosis"):
        manifest.require_labels("classification")
    Manifest(tmp_path, [_record("b", diagnosis=0)]).require_labels("classification")


def test_embedding_round_trip(tmp_path):
    v = np.arange(512, dtype=np.float32) / 7.0
    path = tmp_path / "e.mfe"
    write_embedding(path, v)
    got = read_embedding(path)
    assert got.dtype == np.float32
    np.testing.assert_array_equal(got, v)


def test_embedding_validation(tmp_path):
    path = tmp_path / "e.mfe"
    with pytest.raises(EmbeddingFileError, match="finite"):
        write_embedding(path, np.array([1.0, np.nan], dtype=np.float32))
    write_embedding(path, np.ones(8, dtype=np.float32))
    raw = path.read_bytes()
    (tmp_path / "t.mfe").write_bytes(raw[:-4])
    with pytest.raises(EmbeddingFileError, match="truncated"):
        read_embedding(tmp_path / "t.mfe")
    (tmp_path / "m.mfe").write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(EmbeddingFileError, match="magic"):
        read_embedding(tmp_path / "m.mfe")


def test_embedding_writes_are_byte_stable(tmp_path):
    v = np.random.default_rng(0).normal(size=64).astype(np.float32)
    write_embedding(tmp_path / "a.mfe", v)
    write_embedding(tmp_path / "b.mfe", v)
    assert (tmp_path / "a.mfe").read_bytes() == (tmp_path / "b.mfe").read_bytes()
