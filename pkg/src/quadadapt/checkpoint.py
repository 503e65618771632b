"""On-disk format shared by base checkpoints, adapter checkpoints and benchmarks.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The blob is little-endian float64, row-major, tensors concatenated in
manifest order; the manifest records each tensor's name, shape, byte offset
and byte length plus a CRC-32 of the whole blob.
"""
from __future__ import annotations

import json
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import Adapter, AdaptedModel, AdapterConfig, attach
from .basemodel import BaseModel, _param_shapes
from .errors import ChecksumMismatch, CorruptBlob, ManifestMismatch
from .numerics import Tensor
from .quadratic import LowRankQuadraticTerm
from .shiftbench import SPLITS, BenchConfig, ShiftBenchmark

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"


@dataclass
class AdapterBundle:
    """Adapter tensors and config as loaded from disk, not yet attached."""

    config: AdapterConfig
    adapters: "OrderedDict[str, Adapter]"

    def attach(self, base: BaseModel) -> AdaptedModel:
        return attach(base, self.config, adapters=self.adapters)


def _pack(named: "OrderedDict[str, np.ndarray]") -> tuple[list, bytes]:
    records, chunks, offset = [], [], 0
    for name, arr in named.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return records, b"".join(chunks)


def _describe(obj) -> tuple[str, dict, "OrderedDict[str, np.ndarray]"]:
    if isinstance(obj, BaseModel):
        return ("base", {"kind": obj.kind, "config": obj.config},
                OrderedDict((k, p.data) for k, p in obj.params.items()))
    if isinstance(obj, (AdaptedModel, AdapterBundle)):
        adapters = obj.adapters
        meta = {"config": obj.config.to_dict(),
                "adapters": [{"point": k, "family": a.family, "kind": a.kind}
                             for k, a in adapters.items()]}
        tensors = OrderedDict()
        for point, ad in adapters.items():
            for name, t in ad.parameters().items():
                tensors[f"{point}/{name}"] = t.data
        return "adapter", meta, tensors
    if isinstance(obj, ShiftBenchmark):
        return "benchmark", {"config": obj.config.to_dict()}, OrderedDict(obj.tensors())
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def serialize(obj) -> tuple[bytes, bytes]:
    """``(manifest bytes, blob bytes)`` exactly as written to disk."""
    kind, meta, tensors = _describe(obj)
    records, blob = _pack(tensors)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta,
                "tensors": records, "blob_length": len(blob),
                "checksum": f"{zlib.crc32(blob):08x}"}
    return (json.dumps(manifest, indent=2) + "\n").encode(), blob


def save_checkpoint(obj, path) -> Path:
    path = Path(path)
    manifest, blob = serialize(obj)
    path.mkdir(parents=True, exist_ok=True)
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_bytes(manifest)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestMismatch(f"{path / MANIFEST} is not valid JSON: {exc}") from exc
    for key in ("format_version", "kind", "meta", "tensors", "checksum"):
        if key not in manifest:
            raise ManifestMismatch(f"manifest lacks {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ManifestMismatch(f"unsupported format_version {manifest['format_version']}")
    return manifest


def _unpack(manifest: dict, blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if f"{zlib.crc32(blob):08x}" != manifest["checksum"]:
        raise ChecksumMismatch("blob CRC-32 does not match manifest")
    out, expect = OrderedDict(), 0
    for rec in manifest["tensors"]:
        shape = tuple(int(s) for s in rec["shape"])
        if rec["offset"] != expect or rec["length"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptBlob(f"record {rec['name']!r} offset/length disagree with its shape")
        chunk = blob[rec["offset"]:rec["offset"] + rec["length"]]
        if len(chunk) != rec["length"]:
            raise CorruptBlob(f"blob too short for {rec['name']!r}")
        out[rec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        expect += rec["length"]
    if expect != len(blob) or manifest.get("blob_length", expect) != len(blob):
        raise CorruptBlob(f"records cover {expect} bytes, blob has {len(blob)}")
    return out


def _expect(tensors, names_shapes):
    names_shapes = list(names_shapes)
    if len(tensors) != len(names_shapes):
        raise ManifestMismatch(f"manifest declares {len(tensors)} tensors, "
                               f"expected {len(names_shapes)}")
    for (name, arr), (want, shape) in zip(tensors.items(), names_shapes):
        if name != want or (shape is not None and arr.shape != tuple(shape)):
            raise ManifestMismatch(f"tensor {name} {arr.shape} does not match {want} {shape}")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns BaseModel, AdapterBundle or ShiftBenchmark."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptBlob(f"missing {path / BLOB}") from exc
    tensors = _unpack(manifest, blob)
    kind, meta = manifest["kind"], manifest["meta"]

    if kind == "base":
        shapes = _param_shapes(meta["kind"], meta["config"])
        _expect(tensors, shapes.items())
        return BaseModel(meta["kind"], meta["config"],
                         OrderedDict((k, Tensor(v, True)) for k, v in tensors.items()))

    if kind == "adapter":
        cfg = AdapterConfig.from_dict(meta["config"])
        entries = meta["adapters"]
        keys = ("A", "Bup") if cfg.family == "linear" else ("A", "B", "C")
        _expect(tensors, [(f"{e['point']}/{k}", None) for e in entries for k in keys])
        adapters = OrderedDict()
        for e in entries:
            params = OrderedDict((k, Tensor(tensors[f"{e['point']}/{k}"], True)) for k in keys)
            adapters[e["point"]] = Adapter(e["family"], params, e["kind"], cfg.kernel, cfg.mask)
        return AdapterBundle(cfg, adapters)

    if kind == "benchmark":
        cfg = BenchConfig.from_dict(meta["config"])
        names = ["teacher.weight", "teacher.bias", "shift.A", "shift.B", "shift.C"]
        names += [f"{s}.{xy}" for s in SPLITS for xy in ("x", "y")]
        _expect(tensors, [(n, None) for n in names])
        term = LowRankQuadraticTerm(Tensor(tensors["shift.A"]), Tensor(tensors["shift.B"]),
                                    Tensor(tensors["shift.C"]))
        bench = ShiftBenchmark(cfg, tensors["teacher.weight"], tensors["teacher.bias"], term)
        for s in SPLITS:
            bench.splits[s] = (tensors[f"{s}.x"], tensors[f"{s}.y"])
        return bench

    raise ManifestMismatch(f"unknown checkpoint kind {kind!r}")


def clone_model(base: BaseModel) -> BaseModel:
    """Bit-exact, unfrozen copy of a base model."""
    return BaseModel(base.kind, base.config,
                     OrderedDict((k, Tensor(p.data, True)) for k, p in base.params.items()))
