"""Model weight files (MWS container), dataset manifests and architecture matching.

An MWS file is laid out as::

    b"MWS1" | u64 little-endian header length H | H bytes of UTF-8 JSON | data

The JSON header lists every tensor with its name, dtype (always ``"f32"``),
shape, and the ``offset``/``nbytes`` of its slice of the data region, which
starts right after the header. Tensor data is raw little-endian float32 in
row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"MWS1"
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


class WeightStoreError(Exception):
    """Base class for weight-file and manifest errors."""


class FormatError(WeightStoreError):
    """Bad magic bytes or an unparsable header."""


class LayoutError(WeightStoreError):
    """Tensor data regions overlap, leave gaps, or disagree with the shape."""


class NonFiniteError(WeightStoreError):
    """A tensor holds NaN or infinite values."""


class TruncatedError(WeightStoreError):
    """The file ends before the declared header or data."""


class ManifestError(WeightStoreError):
    """Malformed manifest contents."""


class ArchitectureError(WeightStoreError):
    """Models share no tensors, or a model does not match a signature."""


@dataclass(frozen=True)
class WeightTensor:
    """A named tensor; ``data`` is a flat, read-only float32 array."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"tensor {self.name!r}: dimensions must be positive, got {shape}")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32).reshape(-1))
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(
                f"tensor {self.name!r}: {data.size} values do not fill shape {shape}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    def array(self) -> np.ndarray:
        """The values reshaped to ``shape``."""
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class ModelWeights:
    """Ordered tensors of one model plus string metadata."""

    tensors: tuple[WeightTensor, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = tuple(self.tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate tensor names: {dup}")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], metadata=None) -> "ModelWeights":
        tensors = [WeightTensor(name, np.shape(a), np.asarray(a)) for name, a in arrays.items()]
        return cls(tuple(tensors), dict(metadata or {}))

    @property
    def architecture(self) -> str | None:
        return self.metadata.get("architecture")

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def get(self, name: str) -> WeightTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(t.name == name for t in self.tensors)

    def __eq__(self, other):
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.tensors == other.tensors and dict(self.metadata) == dict(other.metadata)

    __hash__ = None


def encode_model(model: ModelWeights) -> bytes:
    """Canonical MWS bytes: contiguous tensors in sequence order, no padding."""
    entries = []
    offset = 0
    for t in model.tensors:
        nbytes = 4 * t.size
        entries.append(
            {"name": t.name, "dtype": "f32", "shape": list(t.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes
    header = json.dumps(
        {"tensors": entries, "metadata": dict(model.metadata)}, separators=(",", ":")
    ).encode("utf-8")
    chunks = [MAGIC, _LEN.pack(len(header)), header]
    chunks.extend(t.data.astype(_F32, copy=False).tobytes() for t in model.tensors)
    return b"".join(chunks)


def decode_model(buf: bytes) -> ModelWeights:
    if len(buf) < 12:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError("bad magic bytes")
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the fixed preamble")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic bytes {buf[:4]!r}, expected {MAGIC!r}")
    (hlen,) = _LEN.unpack_from(buf, 4)
    start = 12 + hlen
    if start > len(buf):
        raise TruncatedError(f"header declares {hlen} bytes but file holds {len(buf) - 12}")
    try:
        header = json.loads(buf[12:start].decode("utf-8"))
        specs = header["tensors"]
        metadata = header.get("metadata", {})
        if not isinstance(specs, list) or not isinstance(metadata, dict):
            raise TypeError("tensors must be a list and metadata an object")
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unparsable header: {exc}") from exc

    data_len = len(buf) - start
    expected = 0
    tensors = []
    for spec in specs:
        try:
            name, dtype, shape = spec["name"], spec["dtype"], [int(s) for s in spec["shape"]]
            offset, nbytes = int(spec["offset"]), int(spec["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad tensor entry {spec!r}: {exc}") from exc
        if dtype != "f32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if any(s <= 0 for s in shape):
            raise FormatError(f"tensor {name!r}: non-positive dimension in {shape}")
        if offset < expected:
            raise LayoutError(f"tensor {name!r} overlaps the previous tensor (offset {offset})")
        if offset > expected:
            raise LayoutError(f"gap before tensor {name!r} (offset {offset}, expected {expected})")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise LayoutError(f"tensor {name!r}: nbytes {nbytes} does not match shape {shape}")
        if offset + nbytes > data_len:
            raise TruncatedError(f"tensor {name!r} runs past the end of the file")
        values = np.frombuffer(buf, dtype=_F32, count=nbytes // 4, offset=start + offset)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"tensor {name!r} contains NaN or Inf")
        tensors.append(WeightTensor(name, tuple(shape), values.astype(np.float32)))
        expected = offset + nbytes
    if expected != data_len:
        raise LayoutError(f"{data_len - expected} trailing bytes after the last tensor")
    try:
        return ModelWeights(tuple(tensors), metadata)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def read_model(path: str | os.PathLike) -> ModelWeights:
    with open(path, "rb") as f:
        return decode_model(f.read())


def write_model(path: str | os.PathLike, model: ModelWeights) -> None:
    with open(path, "wb") as f:
        f.write(encode_model(model))


@dataclass(frozen=True)
class ManifestEntry:
    model_id: str
    path: str
    architecture: str
    label: int | None = None


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for e in entries:
            if e.model_id in seen:
                raise ManifestError(f"duplicate model id {e.model_id!r}")
            seen.add(e.model_id)
            if e.label is not None and e.label not in (0, 1):
                raise ManifestError(f"model {e.model_id!r}: label must be 0 or 1, got {e.label!r}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.model_id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        """Labels as an int array; raises if any entry is unlabeled."""
        missing = [e.model_id for e in self.entries if e.label is None]
        if missing:
            raise ManifestError(f"{len(missing)} unlabeled models, e.g. {missing[0]!r}")
        return np.array([e.label for e in self.entries], dtype=int)

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest(tuple(self.entries[i] for i in indices))

    def resolve(self, entry: ManifestEntry, base_dir: str | os.PathLike | None) -> str:
        if base_dir is None or os.path.isabs(entry.path):
            return entry.path
        return os.path.join(base_dir, entry.path)


def parse_manifest(doc) -> Manifest:
    if not isinstance(doc, dict) or not isinstance(doc.get("models"), list):
        raise ManifestError('manifest must be an object with a "models" list')
    entries = []
    for raw in doc["models"]:
        try:
            label = raw.get("label")
            if label is not None and (isinstance(label, bool) or label not in (0, 1)):
                raise ManifestError(f"model {raw.get('id')!r}: label must be 0 or 1, got {label!r}")
            entries.append(
                ManifestEntry(str(raw["id"]), str(raw["path"]), str(raw["architecture"]), label)
            )
        except (KeyError, AttributeError, TypeError) as exc:
            raise ManifestError(f"bad manifest entry {raw!r}") from exc
    return Manifest(tuple(entries))


def manifest_to_doc(manifest: Manifest) -> dict:
    models = []
    for e in manifest:
        row = {"id": e.model_id, "path": e.path, "architecture": e.architecture}
        if e.label is not None:
            row["label"] = int(e.label)
        models.append(row)
    return {"models": models}


def read_manifest(path: str | os.PathLike) -> Manifest:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except ValueError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    return parse_manifest(doc)


def write_manifest(path: str | os.PathLike, manifest: Manifest) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_doc(manifest), f, indent=1)
        f.write("\n")


def load_models(manifest: Manifest, base_dir: str | os.PathLike | None = None) -> list[ModelWeights]:
    """Read every model in ``manifest``; relative paths resolve against ``base_dir``."""
    return [read_model(manifest.resolve(e, base_dir)) for e in manifest]


@dataclass(frozen=True)
class ArchitectureSignature:
    """(name, shape) pairs shared by a set of models, in first-model order."""

    tensor_specs: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.tensor_specs]

    def shape_of(self, name: str) -> tuple[int, ...]:
        for n, s in self.tensor_specs:
            if n == name:
                return s
        raise KeyError(name)

    def restrict(self, names: Iterable[str] | None) -> "ArchitectureSignature":
        """Keep only ``names`` (all tensors when None), preserving signature order."""
        if names is None:
            return self
        keep = set(names)
        return ArchitectureSignature(tuple((n, s) for n, s in self.tensor_specs if n in keep))

    def check(self, model: ModelWeights, names: Iterable[str] | None = None) -> None:
        for name, shape in self.restrict(names).tensor_specs:
            if name not in model:
                raise ArchitectureError(f"model lacks tensor {name!r}")
            got = model.get(name).shape
            if got != shape:
                raise ArchitectureError(f"tensor {name!r} has shape {got}, expected {shape}")

    def to_json(self) -> list:
        return [{"name": n, "shape": list(s)} for n, s in self.tensor_specs]

    @classmethod
    def from_json(cls, rows) -> "ArchitectureSignature":
        return cls(tuple((str(r["name"]), tuple(int(d) for d in r["shape"])) for r in rows))


def common_architecture(models: Sequence[ModelWeights]) -> ArchitectureSignature:
    """Tensors present with an identical shape in every model.

    Tensors that are missing from some model or whose shape differs anywhere
    (e.g. a classification head sized by the number of classes) are left out.
    """
    if not models:
        raise ArchitectureError("need at least one model")
    shared = {(t.name, t.shape) for t in models[0].tensors}
    for m in models[1:]:
        shared &= {(t.name, t.shape) for t in m.tensors}
    specs = tuple((t.name, t.shape) for t in models[0].tensors if (t.name, t.shape) in shared)
    if not specs:
        raise ArchitectureError("models have no tensors in common")
    return ArchitectureSignature(specs)


def frobenius_features(model: ModelWeights) -> np.ndarray:
    """Per-tensor Frobenius norms, in tensor order."""
    return np.array(
        [np.sqrt(np.sum(np.square(t.data.astype(np.float64)))) for t in model.tensors],
        dtype=np.float64,
    )
