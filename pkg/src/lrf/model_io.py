"""Tensor-artifact persistence: a JSON manifest plus a raw float64 blob.

An artifact is a pair of sibling files sharing a base path: ``<base>.json``
(the manifest: format version, artifact kind, tensor index, flat string
metadata) and ``<base>.blob`` (the concatenated tensor payloads,
little-endian float64, row-major, at the byte ranges the index declares).
Manifests serialize with sorted keys and tensors are laid out in sorted
name order, so identical content yields identical bytes. Writes go through
a temporary file and an atomic rename, blob first, manifest last: the
manifest's presence is the commit point.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import MATRIX_TYPES, ToyModel, WeightSite
from .engines import LowRankFactors
from .exceptions import (
    CorruptBlob,
    ManifestInvalid,
    NonFiniteTensor,
    UnsupportedVersion,
)
from .validation import as_matrix

__all__ = [
    "FORMAT_VERSION",
    "ARTIFACT_KINDS",
    "TensorRecord",
    "ArtifactManifest",
    "manifest_path",
    "blob_path",
    "save_artifact",
    "load_artifact",
    "densify",
    "save_json",
    "load_json",
    "save_model",
    "load_model",
    "save_grams",
    "load_grams",
    "save_compressed",
    "load_compressed",
]

FORMAT_VERSION = "1"
ARTIFACT_KINDS = ("model", "grams", "plan", "compressed_model", "calibration")
_BYTES_PER_ENTRY = 8  # little-endian float64


@dataclass(frozen=True)
class TensorRecord:
    """Index entry locating one tensor inside the blob."""

    name: str
    rows: int
    cols: int
    byte_offset: int
    byte_length: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rows": self.rows,
            "cols": self.cols,
            "byte_offset": self.byte_offset,
            "byte_length": self.byte_length,
        }


@dataclass
class ArtifactManifest:
    """Everything needed to decode an artifact blob."""

    kind: str
    tensor_index: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "tensor_index": [r.to_dict() for r in self.tensor_index],
            "metadata": dict(self.metadata),
        }


def manifest_path(base) -> Path:
    return Path(str(base) + ".json")


def blob_path(base) -> Path:
    return Path(str(base) + ".blob")


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _canonical_json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def save_json(path, obj) -> Path:
    """Atomically write canonical (sorted-keys) JSON."""
    p = Path(path)
    _atomic_write_bytes(p, _canonical_json_bytes(obj))
    return p


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def save_artifact(base, kind: str, tensors: dict, metadata: dict | None = None) -> ArtifactManifest:
    """Write a manifest/blob pair; tensors are laid out in name order.

    ``tensors`` maps name to a 2-D array; every tensor is validated finite
    before anything touches disk. Returns the manifest that was written.
    """
    if kind not in ARTIFACT_KINDS:
        raise ManifestInvalid(f"kind must be one of {ARTIFACT_KINDS}, got {kind!r}")
    meta = {}
    for key, value in (metadata or {}).items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise ManifestInvalid("metadata must map strings to strings")
        meta[key] = value
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        if not isinstance(name, str) or not name:
            raise ManifestInvalid(f"tensor name must be a non-empty string, got {name!r}")
        arr = np.ascontiguousarray(as_matrix(tensors[name], f"tensor {name!r}"), dtype="<f8")
        raw = arr.tobytes()
        index.append(
            TensorRecord(
                name=name,
                rows=arr.shape[0],
                cols=arr.shape[1],
                byte_offset=len(payload),
                byte_length=len(raw),
            )
        )
        payload.extend(raw)
    manifest = ArtifactManifest(kind=kind, tensor_index=index, metadata=meta)
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(blob_path(base), bytes(payload))
    _atomic_write_bytes(manifest_path(base), _canonical_json_bytes(manifest.to_dict()))
    return manifest


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ManifestInvalid(message)


def _parse_manifest(doc) -> ArtifactManifest:
    _require(isinstance(doc, dict), "manifest must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported format_version {version!r}")
    kind = doc.get("kind")
    _require(kind in ARTIFACT_KINDS, f"unknown artifact kind {kind!r}")
    raw_index = doc.get("tensor_index")
    _require(isinstance(raw_index, list), "tensor_index must be a list")
    index = []
    names = set()
    cursor = 0
    for item in raw_index:
        _require(isinstance(item, dict), "tensor_index entries must be objects")
        try:
            rec = TensorRecord(
                name=item["name"],
                rows=int(item["rows"]),
                cols=int(item["cols"]),
                byte_offset=int(item["byte_offset"]),
                byte_length=int(item["byte_length"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestInvalid(f"malformed tensor record: {exc}") from exc
        _require(isinstance(rec.name, str) and rec.name != "", "tensor name must be non-empty")
        _require(rec.name not in names, f"duplicate tensor name {rec.name!r}")
        names.add(rec.name)
        _require(rec.rows >= 1 and rec.cols >= 1, f"{rec.name}: non-positive shape")
        _require(
            rec.byte_length == rec.rows * rec.cols * _BYTES_PER_ENTRY,
            f"{rec.name}: byte_length {rec.byte_length} does not match shape",
        )
        _require(rec.byte_offset >= cursor, f"{rec.name}: overlapping or unordered byte range")
        cursor = rec.byte_offset + rec.byte_length
        index.append(rec)
    metadata = doc.get("metadata")
    _require(isinstance(metadata, dict), "metadata must be an object")
    for key, value in metadata.items():
        _require(isinstance(key, str) and isinstance(value, str), "metadata must map strings to strings")
    return ArtifactManifest(kind=kind, tensor_index=index, metadata=dict(metadata))


def load_artifact(base):
    """Read a manifest/blob pair back into (manifest, {name: array}).

    Raises ManifestInvalid / UnsupportedVersion for manifest problems,
    CorruptBlob when the blob does not cover exactly the declared ranges,
    and NonFiniteTensor when a model-kind tensor contains NaN or inf.
    """
    base = Path(base)
    try:
        doc = load_json(manifest_path(base))
    except json.JSONDecodeError as exc:
        raise ManifestInvalid(f"manifest is not valid JSON: {exc}") from exc
    manifest = _parse_manifest(doc)
    blob = blob_path(base).read_bytes()
    expected = 0
    for rec in manifest.tensor_index:
        expected = max(expected, rec.byte_offset + rec.byte_length)
    if len(blob) != expected:
        raise CorruptBlob(f"blob holds {len(blob)} bytes, manifest declares {expected}")
    tensors = {}
    for rec in manifest.tensor_index:
        flat = np.frombuffer(blob, dtype="<f8", count=rec.rows * rec.cols, offset=rec.byte_offset)
        arr = flat.astype(np.float64).reshape(rec.rows, rec.cols)
        if manifest.kind == "model" and not np.all(np.isfinite(arr)):
            raise NonFiniteTensor(f"tensor {rec.name!r} contains non-finite entries")
        tensors[rec.name] = arr
    return manifest, tensors


def densify(factors: LowRankFactors) -> np.ndarray:
    """Dense matrix represented by a factor pair."""
    return factors.densify()


# Conventions for the artifact kinds the pipeline moves around.

def save_model(base, model: ToyModel, extra_metadata: dict | None = None) -> ArtifactManifest:
    """Persist a site chain as a model artifact (metadata keeps the wiring)."""
    tensors = {s.site_id: s.weight for s in model.sites}
    meta = {
        "activation": model.activation,
        "site_order": ",".join(s.site_id for s in model.sites),
    }
    for s in model.sites:
        meta[f"site.{s.site_id}.layer_index"] = str(s.layer_index)
        meta[f"site.{s.site_id}.matrix_type"] = s.matrix_type
    meta.update(extra_metadata or {})
    return save_artifact(base, "model", tensors, meta)


def load_model(base) -> ToyModel:
    manifest, tensors = load_artifact(base)
    if manifest.kind != "model":
        raise ManifestInvalid(f"expected a model artifact, got kind {manifest.kind!r}")
    order = manifest.metadata.get("site_order", "")
    site_ids = [s for s in order.split(",") if s]
    if set(site_ids) != set(tensors):
        raise ManifestInvalid("site_order metadata does not match the tensor index")
    sites = []
    for sid in site_ids:
        try:
            layer = int(manifest.metadata[f"site.{sid}.layer_index"])
            mtype = manifest.metadata[f"site.{sid}.matrix_type"]
        except KeyError as exc:
            raise ManifestInvalid(f"missing site metadata for {sid!r}") from exc
        if mtype not in MATRIX_TYPES:
            raise ManifestInvalid(f"unknown matrix_type {mtype!r} for site {sid!r}")
        sites.append(WeightSite(site_id=sid, layer_index=layer, matrix_type=mtype, weight=tensors[sid]))
    activation = manifest.metadata.get("activation", "relu")
    return ToyModel(sites=sites, activation=activation)


def save_grams(base, grams: dict, sample_counts: dict, extra_metadata: dict | None = None) -> ArtifactManifest:
    meta = {f"site.{sid}.samples": str(int(sample_counts.get(sid, 0))) for sid in grams}
    meta.update(extra_metadata or {})
    return save_artifact(base, "grams", grams, meta)


def load_grams(base):
    """Returns (grams, sample_counts), both keyed by site id."""
    manifest, tensors = load_artifact(base)
    if manifest.kind != "grams":
        raise ManifestInvalid(f"expected a grams artifact, got kind {manifest.kind!r}")
    counts = {}
    for sid in tensors:
        counts[sid] = int(manifest.metadata.get(f"site.{sid}.samples", "0"))
    return tensors, counts


def save_compressed(base, factors: dict, site_meta: dict, extra_metadata: dict | None = None) -> ArtifactManifest:
    """Persist factor pairs: tensors ``<site>.a`` / ``<site>.b`` per site.

    ``site_meta`` maps site_id to a flat dict of strings recorded under
    ``site.<site_id>.<key>`` (engine, status, rank and so on). Sites that
    failed appear in the metadata with no tensors.
    """
    tensors = {}
    for sid, pair in factors.items():
        tensors[f"{sid}.a"] = pair.a
        tensors[f"{sid}.b"] = pair.b
    meta = {}
    for sid, info in site_meta.items():
        for key, value in info.items():
            meta[f"site.{sid}.{key}"] = str(value)
    meta.update(extra_metadata or {})
    return save_artifact(base, "compressed_model", tensors, meta)


def load_compressed(base):
    """Returns (manifest, {site_id: LowRankFactors})."""
    manifest, tensors = load_artifact(base)
    if manifest.kind != "compressed_model":
        raise ManifestInvalid(
            f"expected a compressed_model artifact, got kind {manifest.kind!r}"
        )
    pairs = {}
    for name in tensors:
        if name.endswith(".a"):
            sid = name[:-2]
            other = f"{sid}.b"
            if other not in tensors:
                raise ManifestInvalid(f"factor {other!r} missing for site {sid!r}")
            pairs[sid] = LowRankFactors(a=tensors[name], b=tensors[other])
    return manifest, pairs
