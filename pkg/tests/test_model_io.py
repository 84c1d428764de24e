"""Artifact persistence tests: exact byte layout, canonical manifests,
corruption detection, and the typed save/load wrappers.

The golden fixture under tests/fixtures was produced by an independent
struct.pack encoder, so these tests pin the on-disk format itself, not just
round-trip consistency.
"""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from lrf.calibration import ToyModel, WeightSite
from lrf.engines import LowRankFactors, truncate_plain
from lrf.exceptions import (
    CorruptBlob,
    ManifestInvalid,
    NonFiniteTensor,
    UnsupportedVersion,
)
from lrf.model_io import (
    blob_path,
    densify,
    load_artifact,
    load_compressed,
    load_grams,
    load_json,
    load_model,
    manifest_path,
    save_artifact,
    save_compressed,
    save_grams,
    save_json,
    save_model,
)

FIXTURES = Path(__file__).parent / "fixtures"


# ----------------------------------------------------- byte layout


def test_scalar_one_encodes_as_ieee754_le(tmp_path):
    save_artifact(tmp_path / "t", "grams", {"g": np.array([[1.0]])})
    blob = blob_path(tmp_path / "t").read_bytes()
    assert blob == bytes.fromhex("000000000000f03f")


def test_identity_blob_layout(tmp_path):
    save_artifact(tmp_path / "t", "grams", {"g": np.eye(2)})
    blob = blob_path(tmp_path / "t").read_bytes()
    assert len(blob) == 32
    one = struct.pack("<d", 1.0)
    zero = struct.pack("<d", 0.0)
    assert blob == one + zero + zero + one


def test_tensors_laid_out_in_name_order(tmp_path):
    save_artifact(
        tmp_path / "t",
        "grams",
        {"z": np.array([[2.0]]), "a": np.array([[1.0]])},
    )
    blob = blob_path(tmp_path / "t").read_bytes()
    assert struct.unpack("<2d", blob) == (1.0, 2.0)


def test_save_matches_independent_golden_encoder(tmp_path):
    tensors = {"a": np.array([[1.0], [2.0]]), "b": np.array([[3.0]])}
    save_artifact(tmp_path / "g", "grams", tensors, {"note": "golden"})
    assert blob_path(tmp_path / "g").read_bytes() == (FIXTURES / "golden.blob").read_bytes()
    assert manifest_path(tmp_path / "g").read_bytes() == (FIXTURES / "golden.json").read_bytes()


def test_load_reads_golden_fixture():
    manifest, tensors = load_artifact(FIXTURES / "golden")
    assert manifest.kind == "grams"
    assert manifest.metadata == {"note": "golden"}
    np.testing.assert_array_equal(tensors["a"], [[1.0], [2.0]])
    np.testing.assert_array_equal(tensors["b"], [[3.0]])


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {"w": rng.standard_normal((4, 3))}
    save_artifact(tmp_path / "one", "model", tensors, {"k": "v"})
    save_artifact(tmp_path / "two", "model", tensors, {"k": "v"})
    assert blob_path(tmp_path / "one").read_bytes() == blob_path(tmp_path / "two").read_bytes()
    assert (
        manifest_path(tmp_path / "one").read_bytes()
        == manifest_path(tmp_path / "two").read_bytes()
    )


def test_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(6)
    tensors = {"w0": rng.standard_normal((5, 7)), "w1": rng.standard_normal((3, 2))}
    save_artifact(tmp_path / "t", "model", tensors)
    _, loaded = load_artifact(tmp_path / "t")
    for name, arr in tensors.items():
        np.testing.assert_array_equal(loaded[name], arr)


def test_no_temp_files_left_behind(tmp_path):
    save_artifact(tmp_path / "t", "grams", {"g": np.eye(3)})
    assert not list(tmp_path.glob("*.tmp"))


# ----------------------------------------------- validation on save


def test_save_rejects_unknown_kind(tmp_path):
    with pytest.raises(ManifestInvalid):
        save_artifact(tmp_path / "t", "mystery", {"g": np.eye(2)})


def test_save_rejects_non_string_metadata(tmp_path):
    with pytest.raises(ManifestInvalid):
        save_artifact(tmp_path / "t", "grams", {"g": np.eye(2)}, {"n": 3})


def test_save_rejects_non_finite_tensor(tmp_path):
    bad = np.array([[1.0, np.nan]])
    with pytest.raises(ValueError):
        save_artifact(tmp_path / "t", "grams", {"g": bad})
    # Nothing may be committed after a failed save.
    assert not manifest_path(tmp_path / "t").exists()
    assert not blob_path(tmp_path / "t").exists()


def test_save_rejects_empty_tensor_name(tmp_path):
    with pytest.raises(ManifestInvalid):
        save_artifact(tmp_path / "t", "grams", {"": np.eye(2)})


# ----------------------------------------------- validation on load


def _write_artifact(base, doc, blob):
    manifest_path(base).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    blob_path(base).write_bytes(blob)


def _minimal_doc(**overrides):
    doc = {
        "format_version": "1",
        "kind": "model",
        "tensor_index": [
            {"name": "w", "rows": 1, "cols": 1, "byte_offset": 0, "byte_length": 8}
        ],
        "metadata": {},
    }
    doc.update(overrides)
    return doc


def test_load_rejects_unsupported_version(tmp_path):
    _write_artifact(tmp_path / "t", _minimal_doc(format_version="999"), struct.pack("<d", 1.0))
    with pytest.raises(UnsupportedVersion):
        load_artifact(tmp_path / "t")


def test_load_rejects_unknown_kind(tmp_path):
    _write_artifact(tmp_path / "t", _minimal_doc(kind="mystery"), struct.pack("<d", 1.0))
    with pytest.raises(ManifestInvalid):
        load_artifact(tmp_path / "t")


def test_load_rejects_truncated_blob(tmp_path):
    save_artifact(tmp_path / "t", "grams", {"g": np.eye(2)})
    blob = blob_path(tmp_path / "t").read_bytes()
    blob_path(tmp_path / "t").write_bytes(blob[:-1])
    with pytest.raises(CorruptBlob):
        load_artifact(tmp_path / "t")


def test_load_rejects_oversized_blob(tmp_path):
    save_artifact(tmp_path / "t", "grams", {"g": np.eye(2)})
    blob = blob_path(tmp_path / "t").read_bytes()
    blob_path(tmp_path / "t").write_bytes(blob + b"\x00")
    with pytest.raises(CorruptBlob):
        load_artifact(tmp_path / "t")


def test_load_rejects_overlapping_ranges(tmp_path):
    doc = _minimal_doc(
        tensor_index=[
            {"name": "w0", "rows": 1, "cols": 2, "byte_offset": 0, "byte_length": 16},
            {"name": "w1", "rows": 1, "cols": 1, "byte_offset": 8, "byte_length": 8},
        ]
    )
    _write_artifact(tmp_path / "t", doc, struct.pack("<2d", 1.0, 2.0))
    with pytest.raises(ManifestInvalid):
        load_artifact(tmp_path / "t")


def test_load_rejects_shape_length_mismatch(tmp_path):
    doc = _minimal_doc(
        tensor_index=[{"name": "w", "rows": 2, "cols": 2, "byte_offset": 0, "byte_length": 8}]
    )
    _write_artifact(tmp_path / "t", doc, struct.pack("<d", 1.0))
    with pytest.raises(ManifestInvalid):
        load_artifact(tmp_path / "t")


def test_load_rejects_duplicate_tensor_names(tmp_path):
    doc = _minimal_doc(
        tensor_index=[
            {"name": "w", "rows": 1, "cols": 1, "byte_offset": 0, "byte_length": 8},
            {"name": "w", "rows": 1, "cols": 1, "byte_offset": 8, "byte_length": 8},
        ]
    )
    _write_artifact(tmp_path / "t", doc, struct.pack("<2d", 1.0, 2.0))
    with pytest.raises(ManifestInvalid):
        load_artifact(tmp_path / "t")


def test_load_rejects_malformed_json(tmp_path):
    manifest_path(tmp_path / "t").write_text("{not json")
    blob_path(tmp_path / "t").write_bytes(b"")
    with pytest.raises(ManifestInvalid):
        load_artifact(tmp_path / "t")


def test_load_rejects_non_finite_model_tensor(tmp_path):
    _write_artifact(tmp_path / "t", _minimal_doc(), struct.pack("<d", float("nan")))
    with pytest.raises(NonFiniteTensor):
        load_artifact(tmp_path / "t")


# ----------------------------------------------------------- densify


def test_densify_outer_product():
    pair = LowRankFactors(a=np.array([[1.0], [0.0]]), b=np.array([[0.0, 2.0]]))
    np.testing.assert_array_equal(densify(pair), [[0.0, 2.0], [0.0, 0.0]])


def test_densify_full_rank_recovers_weight():
    w = np.random.default_rng(7).standard_normal((5, 5))
    pair = truncate_plain(w, 5)
    assert np.linalg.norm(densify(pair) - w) <= 1e-9 * np.linalg.norm(w)


def test_densify_matches_triple_loop():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((3, 2))
    b = rng.standard_normal((2, 4))
    expected = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            for k in range(2):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(densify(LowRankFactors(a=a, b=b)), expected, rtol=1e-14)


# ---------------------------------------------------- typed wrappers


def _model():
    rng = np.random.default_rng(9)
    return ToyModel(
        sites=[
            WeightSite("L0.Q", 0, "Q", rng.standard_normal((4, 4))),
            WeightSite("L1.V", 1, "V", rng.standard_normal((3, 4))),
        ],
        activation="gelu",
    )


def test_model_round_trip(tmp_path):
    model = _model()
    save_model(tmp_path / "m", model)
    loaded = load_model(tmp_path / "m")
    assert loaded.activation == "gelu"
    assert [s.site_id for s in loaded.sites] == ["L0.Q", "L1.V"]
    for orig, back in zip(model.sites, loaded.sites):
        assert back.layer_index == orig.layer_index
        assert back.matrix_type == orig.matrix_type
        np.testing.assert_array_equal(back.weight, orig.weight)


def test_load_model_rejects_wrong_kind(tmp_path):
    save_grams(tmp_path / "g", {"a": np.eye(2)}, {"a": 4})
    with pytest.raises(ManifestInvalid):
        load_model(tmp_path / "g")


def test_grams_round_trip_with_counts(tmp_path):
    grams = {"a": np.eye(3) * 2.0, "b": np.eye(3)}
    save_grams(tmp_path / "g", grams, {"a": 128, "b": 64})
    loaded, counts = load_grams(tmp_path / "g")
    assert counts == {"a": 128, "b": 64}
    for sid in grams:
        np.testing.assert_array_equal(loaded[sid], grams[sid])


def test_compressed_round_trip_records_failures(tmp_path):
    w = np.random.default_rng(10).standard_normal((4, 4))
    pair = truncate_plain(w, 2)
    save_compressed(
        tmp_path / "c",
        {"ok_site": pair},
        {
            "ok_site": {"status": "ok", "rank": "2"},
            "bad_site": {"status": "failed"},
        },
    )
    manifest, pairs = load_compressed(tmp_path / "c")
    assert set(pairs) == {"ok_site"}
    np.testing.assert_array_equal(pairs["ok_site"].a, pair.a)
    np.testing.assert_array_equal(pairs["ok_site"].b, pair.b)
    assert manifest.metadata["site.bad_site.status"] == "failed"
    assert manifest.metadata["site.ok_site.rank"] == "2"


def test_load_compressed_requires_both_factors(tmp_path):
    save_artifact(tmp_path / "c", "compressed_model", {"s.a": np.eye(2)})
    with pytest.raises(ManifestInvalid):
        load_compressed(tmp_path / "c")


def test_save_json_is_canonical(tmp_path):
    p1 = save_json(tmp_path / "a.json", {"b": 1, "a": 2})
    p2 = save_json(tmp_path / "b.json", {"a": 2, "b": 1})
    assert p1.read_bytes() == p2.read_bytes()
    assert load_json(p1) == {"a": 2, "b": 1}
    assert p1.read_text().endswith("\n")
