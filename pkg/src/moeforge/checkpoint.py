"""Role-tagged checkpoints: a JSON manifest next to one raw float64 blob.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
Every tensor record carries its byte range in the blob, a CRC32 of those
bytes, and a role (non-expert, expert with layer/index, gate with layer), so
merge and prune tools can work on the files without building a model.
"""

from __future__ import annotations

import fcntl
import json
import os
import shutil
import tempfile
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import EXPERT, GATE, NON_EXPERT, ArchConfig, ModelParams, Role, layer_names
from .tensor import Tensor

FORMAT_VERSION = "moe-forge-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
ROLES = (NON_EXPERT, EXPERT, GATE)


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class Violation:
    kind: str
    tensor: str | None
    message: str


@contextmanager
def _locked(path: Path):
    lock_path = path.parent / f".{path.name}.lock"
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def layout(arch: ArchConfig) -> list[dict]:
    """Tensor records (without checksums) that a checkpoint of ``arch`` would hold.

    Needs no weights, so it works for architectures too large to materialize.
    """
    records, offset = [], 0
    for name, role, shape, _ in layer_names(arch):
        length = 8 * int(np.prod(shape))
        records.append({"name": name, "shape": list(shape), "dtype": "f64", "offset": offset,
                        "length": length, "role": role.kind, "layer": role.layer,
                        "expert": role.expert})
        offset += length
    return records


def save(model: ModelParams, path, meta: dict | None = None) -> dict:
    """Write ``model`` to the directory ``path`` atomically; returns the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    chunks = []
    offset = 0
    for name, t in model.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        role = model.roles[name]
        records.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "f64",
            "offset": offset,
            "length": len(raw),
            "role": role.kind,
            "layer": role.layer,
            "expert": role.expert,
            "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_VERSION,
        "arch": asdict(model.arch),
        "blob": BLOB,
        "blob_bytes": offset,
        "meta": meta or {},
        "tensors": records,
    }
    with _locked(path):
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
        try:
            with open(tmp / BLOB, "wb") as fh:
                for c in chunks:
                    fh.write(c)
            with open(tmp / MANIFEST, "w") as fh:
                json.dump(manifest, fh, indent=1)
                fh.write("\n")
            if path.exists():
                old = path.parent / f".{path.name}.old"
                os.replace(path, old)
                os.replace(tmp, path)
                shutil.rmtree(old)
            else:
                os.replace(tmp, path)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path / MANIFEST) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load(path) -> ModelParams:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / manifest.get("blob", BLOB)).read_bytes()
    if len(blob) < manifest["blob_bytes"]:
        raise TruncatedError(f"blob holds {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    tensors: dict[str, Tensor] = {}
    roles: dict[str, Role] = {}
    for rec in manifest["tensors"]:
        raw = blob[rec["offset"]: rec["offset"] + rec["length"]]
        if len(raw) != rec["length"]:
            raise TruncatedError(f"tensor {rec['name']} runs past the end of the blob")
        if zlib.crc32(raw) != rec["crc32"]:
            raise ChecksumError(f"checksum mismatch in tensor {rec['name']}")
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rec["shape"])
        tensors[rec["name"]] = Tensor(data, requires_grad=True)
        roles[rec["name"]] = Role(rec["role"], rec["layer"], rec["expert"])
    return ModelParams(ArchConfig(**manifest["arch"]), tensors, roles)


def load_meta(path) -> dict:
    return read_manifest(path).get("meta", {})


def validate(path) -> list[Violation]:
    """Check manifest invariants and blob integrity; returns all violations found."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / manifest.get("blob", BLOB)).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob in {path}: {exc}") from exc
    out: list[Violation] = []
    records = manifest.get("tensors", [])

    seen: set[str] = set()
    for rec in records:
        name = rec.get("name")
        if name in seen:
            out.append(Violation("duplicate_name", name, "tensor name appears more than once"))
        seen.add(name)
        role = rec.get("role")
        if role not in ROLES:
            out.append(Violation("tagging", name, f"unknown role {role!r}"))
        if role == EXPERT and (rec.get("layer") is None or rec.get("expert") is None):
            out.append(Violation("tagging", name, "expert record lacks layer or expert index"))
        if role == GATE and rec.get("layer") is None:
            out.append(Violation("tagging", name, "gate record lacks a layer index"))
        if role == NON_EXPERT and (rec.get("layer") is not None or rec.get("expert") is not None):
            out.append(Violation("tagging", name, "non-expert record carries expert indices"))
        if rec.get("dtype") != "f64":
            out.append(Violation("dtype", name, f"dtype {rec.get('dtype')!r} is not f64"))
        expected = 8 * int(np.prod(rec.get("shape", [])))
        if rec.get("length") != expected:
            out.append(Violation("length", name, f"length {rec.get('length')} != 8 * prod(shape) = {expected}"))
        end = rec.get("offset", 0) + rec.get("length", 0)
        if end > len(blob):
            out.append(Violation("truncated", name, "byte range runs past the end of the blob"))
        elif zlib.crc32(blob[rec["offset"]:end]) != rec.get("crc32"):
            out.append(Violation("checksum", name, "CRC32 of stored bytes does not match"))

    spans = sorted((r.get("offset", 0), r.get("offset", 0) + r.get("length", 0), r.get("name"))
                   for r in records)
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            out.append(Violation("overlap", n1, f"bytes [{s1}, ...) overlap tensor {n0} ending at {e0}"))

    total = sum(r.get("length", 0) for r in records)
    if total != manifest.get("blob_bytes") or total != len(blob):
        out.append(Violation("size", None,
                             f"record lengths sum to {total}, manifest says {manifest.get('blob_bytes')}, "
                             f"blob has {len(blob)} bytes"))

    arch = ArchConfig(**manifest["arch"])
    gates = [r for r in records if r.get("role") == GATE]
    if len(gates) != arch.num_moe_layers:
        out.append(Violation("gate_count", None,
                             f"{len(gates)} gate records for {arch.num_moe_layers} MoE layers"))
    for g in gates:
        if g.get("shape", [None, None])[-1] != arch.num_experts:
            out.append(Violation("gate_shape", g.get("name"), "gate width differs from num_experts"))
    return out
