"""Tensor container files, model/LoRA manifests and synthetic model generation.

Container layout (all header integers little-endian)::

    b"ZKLT" | version u16 | header_len u32 | header JSON | payload

The header maps tensor name -> {dtype, shape, offset, length, sha256} with
offsets relative to the start of the payload.  Keys are sorted and the JSON
is compact, so equal content always serializes to equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "TensorFormatError",
    "BadMagic",
    "VersionUnsupported",
    "CorruptHeader",
    "BoundsViolation",
    "ChecksumMismatch",
    "ManifestError",
    "encode_tensors",
    "decode_tensors",
    "write_tensors",
    "read_tensors",
    "canonical_json",
    "Slot",
    "ModelConfig",
    "LoraModule",
    "LoraManifest",
    "LoraWeights",
    "gen_synthetic",
    "synthetic_chain",
    "save_model",
    "load_model",
    "save_lora",
    "load_lora",
    "encode_wire_tensor",
    "decode_wire_tensor",
]

MAGIC = b"ZKLT"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


class TensorFormatError(ValueError):
    pass


class BadMagic(TensorFormatError):
    pass


class VersionUnsupported(TensorFormatError):
    pass


class CorruptHeader(TensorFormatError):
    pass


class BoundsViolation(TensorFormatError):
    pass


class ChecksumMismatch(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _dtype_name(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.int64:
        return "i64"
    raise TypeError(f"unsupported dtype {a.dtype}; use float32 or int64")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        dt = _dtype_name(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[dt]).tobytes()
        header[name] = {
            "dtype": dt,
            "shape": [int(s) for s in a.shape],
            "offset": offset,
            "length": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        chunks.append(raw)
        offset += len(raw)
    hdr = canonical_json(header)
    return _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + b"".join(chunks)


def _no_dupes(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise CorruptHeader(f"duplicate key {k!r}")
        d[k] = v
    return d


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < _PREFIX.size:
        raise BadMagic("file too short")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise BoundsViolation("header runs past end of file")
    try:
        header = json.loads(data[_PREFIX.size:start], object_pairs_hook=_no_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptHeader(str(e)) from None
    if not isinstance(header, dict):
        raise CorruptHeader("header is not a JSON object")
    payload = memoryview(data)[start:]
    spans = []
    out = {}
    for name, meta in header.items():
        try:
            dt = _DTYPES[meta["dtype"]]
            shape = tuple(int(s) for s in meta["shape"])
            offset, length = int(meta["offset"]), int(meta["length"])
            digest = meta["sha256"]
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptHeader(f"bad entry for {name!r}: {e}") from None
        if any(s < 0 for s in shape) or offset < 0:
            raise CorruptHeader(f"negative dims/offset for {name!r}")
        if length != math.prod(shape) * dt.itemsize:
            raise BoundsViolation(f"length of {name!r} disagrees with its shape")
        if offset + length > len(payload):
            raise BoundsViolation(f"{name!r} runs past end of payload")
        spans.append((offset, offset + length, name))
        raw = bytes(payload[offset:offset + length])
        if hashlib.sha256(raw).hexdigest() != digest:
            raise ChecksumMismatch(f"content hash mismatch for {name!r}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    spans.sort()
    for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
        if begin < end:
            raise BoundsViolation(f"{a!r} overlaps {b!r}")
    if (spans[-1][1] if spans else 0) != len(payload):
        raise BoundsViolation("trailing bytes after last tensor")
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    _atomic_write(Path(path), encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def write_json(path, obj) -> None:
    _atomic_write(Path(path), canonical_json(obj))


# -- model and LoRA descriptions ---------------------------------------------


@dataclass(frozen=True)
class Slot:
    name: str
    n: int  # in_dim
    d: int  # out_dim
    weight: str


@dataclass
class ModelConfig:
    model_id: str
    layers: list[list[Slot]]
    activation: str = "relu"

    def slots(self) -> Iterable[tuple[str, Slot]]:
        for i, layer in enumerate(self.layers):
            for s in layer:
                yield f"{i}.{s.name}", s

    def slot(self, target: str) -> Slot:
        for path, s in self.slots():
            if path == target:
                return s
        raise ManifestError(f"no slot {target!r} in model {self.model_id!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].n

    @property
    def out_dim(self) -> int:
        return self.layers[-1][-1].d

    def validate(self, tensors: Mapping[str, np.ndarray] | None = None) -> None:
        if self.activation not in ("relu", "none"):
            raise ManifestError(f"unknown activation {self.activation!r}")
        if not self.layers or not all(self.layers):
            raise ManifestError("model needs at least one slot per layer")
        prev = None
        seen = set()
        for path, s in self.slots():
            if path in seen:
                raise ManifestError(f"duplicate slot {path!r}")
            seen.add(path)
            if s.n < 1 or s.d < 1:
                raise ManifestError(f"slot {path!r} has non-positive dims")
            if prev is not None and prev != s.n:
                raise ManifestError(f"slot {path!r} expects {s.n} inputs, previous gives {prev}")
            prev = s.d
            if tensors is not None:
                if s.weight not in tensors:
                    raise ManifestError(f"weight {s.weight!r} missing")
                if tuple(tensors[s.weight].shape) != (s.d, s.n):
                    raise ManifestError(f"weight {s.weight!r} is not {s.d}x{s.n}")

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "activation": self.activation,
            "layers": [[{"name": s.name, "n": s.n, "d": s.d, "weight": s.weight} for s in layer]
                       for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            layers = [[Slot(str(s["name"]), int(s["n"]), int(s["d"]), str(s["weight"])) for s in layer]
                      for layer in d["layers"]]
            return cls(str(d["model_id"]), layers, str(d.get("activation", "relu")))
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed model config: {e}") from None


@dataclass(frozen=True)
class LoraModule:
    module_id: int
    target: str
    n: int
    r: int
    d: int
    scale_bits: int
    a_tensor: str
    b_tensor: str

    @property
    def size(self) -> int:
        return self.r * (self.n + self.d)

    def to_dict(self) -> dict:
        return {
            "module_id": self.module_id, "target": self.target, "n": self.n, "r": self.r,
            "d": self.d, "scale_bits": self.scale_bits, "a_tensor": self.a_tensor,
            "b_tensor": self.b_tensor,
        }

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())


@dataclass
class LoraManifest:
    model_id: str
    modules: list[LoraModule] = field(default_factory=list)

    def module(self, module_id: int) -> LoraModule:
        for m in self.modules:
            if m.module_id == module_id:
                return m
        raise KeyError(module_id)

    def by_target(self) -> dict[str, LoraModule]:
        return {m.target: m for m in self.modules}

    @property
    def max_dim(self) -> int:
        return max((max(m.n, m.r) for m in self.modules), default=1)

    def validate(self, config: ModelConfig | None = None) -> None:
        ids = sorted(m.module_id for m in self.modules)
        if ids != list(range(len(self.modules))):
            raise ManifestError("module ids must be unique and dense from 0")
        targets = [m.target for m in self.modules]
        if len(set(targets)) != len(targets):
            raise ManifestError("two modules share a target")
        for m in self.modules:
            if min(m.n, m.r, m.d) < 1:
                raise ManifestError(f"module {m.module_id} has non-positive dims")
            if config is not None:
                if config.model_id != self.model_id:
                    raise ManifestError("manifest is for a different model")
                s = config.slot(m.target)
                if (s.n, s.d) != (m.n, m.d):
                    raise ManifestError(
                        f"module {m.module_id} is {m.n}->{m.d} but slot {m.target!r} is {s.n}->{s.d}")

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "modules": [m.to_dict() for m in self.modules]}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraManifest":
        try:
            mods = [LoraModule(int(m["module_id"]), str(m["target"]), int(m["n"]), int(m["r"]),
                               int(m["d"]), int(m["scale_bits"]), str(m["a_tensor"]), str(m["b_tensor"]))
                    for m in d["modules"]]
            return cls(str(d["model_id"]), mods)
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed manifest: {e}") from None


@dataclass
class LoraWeights:
    A: np.ndarray  # r x n
    B: np.ndarray  # d x r

    def check(self, module: LoraModule) -> None:
        if self.A.shape != (module.r, module.n) or self.B.shape != (module.d, module.r):
            raise ManifestError(f"weights for module {module.module_id} have wrong shape")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.B))):
            raise ManifestError(f"weights for module {module.module_id} are not finite")


def gen_synthetic(seed: int, layers, loras, *, activation="relu", model_id=None,
                  scale_bits=12, share_base=False):
    """Random base model plus LoRA adapters, entries uniform in [-1, 1].

    ``layers`` is a list of layers, each a list of ``(slot_name, n, d)``;
    ``loras`` is a list of ``(target, r)`` with target ``"<layer>.<slot>"``.
    With ``share_base`` all slots of equal shape reuse one weight tensor,
    which keeps many-module benchmark models small in memory.

    Returns ``(config, base_tensors, manifest, weights)`` where ``weights``
    maps module_id -> LoraWeights.
    """
    rng = np.random.default_rng(seed)
    model_id = model_id or f"synthetic-{seed}"
    cfg_layers = []
    tensors: dict[str, np.ndarray] = {}
    for i, layer in enumerate(layers):
        slots = []
        for name, n, d in layer:
            wname = f"W.{n}x{d}" if share_base else f"W.{i}.{name}"
            if wname not in tensors:
                tensors[wname] = rng.uniform(-1, 1, size=(d, n)).astype(np.float32)
            slots.append(Slot(name, n, d, wname))
        cfg_layers.append(slots)
    config = ModelConfig(model_id, cfg_layers, activation)
    config.validate(tensors)

    modules = []
    weights = {}
    for mid, (target, r) in enumerate(loras):
        s = config.slot(target)
        mod = LoraModule(mid, target, s.n, int(r), s.d, scale_bits, f"A.{mid}", f"B.{mid}")
        A = rng.uniform(-1, 1, size=(mod.r, s.n)).astype(np.float32)
        B = rng.uniform(-1, 1, size=(s.d, mod.r)).astype(np.float32)
        modules.append(mod)
        weights[mid] = LoraWeights(A, B)
    manifest = LoraManifest(model_id, modules)
    manifest.validate(config)
    return config, tensors, manifest, weights


def synthetic_chain(seed: int, num_modules: int, n: int, d: int, r: int, *, scale_bits=12,
                    activation="none", share_base=True):
    """A model of ``num_modules`` layers each holding one LoRA-targeted n->d slot.

    When n != d every layer gets a second, un-adapted d->n slot so the chain
    composes.
    """
    layers = []
    loras = []
    for i in range(num_modules):
        layer = [("proj", n, d)]
        if n != d:
            layer.append(("back", d, n))
        layers.append(layer)
        loras.append((f"{i}.proj", r))
    return gen_synthetic(seed, layers, loras, activation=activation, scale_bits=scale_bits,
                         model_id=f"chain-{num_modules}x{n}x{d}r{r}", share_base=share_base)


def save_model(path, config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    config.validate(tensors)
    write_tensors(path / "base.zklt", tensors)
    write_json(path / "model.json", config.to_dict())


def load_model(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    config = ModelConfig.from_dict(json.loads((path / "model.json").read_text()))
    tensors = read_tensors(path / "base.zklt")
    config.validate(tensors)
    return config, tensors


def save_lora(path, manifest: LoraManifest, weights: Mapping[int, LoraWeights]) -> None:
    path = Path(path)
    manifest.validate()
    tensors = {}
    for m in manifest.modules:
        w = weights[m.module_id]
        w.check(m)
        tensors[m.a_tensor] = np.asarray(w.A, dtype=np.float32)
        tensors[m.b_tensor] = np.asarray(w.B, dtype=np.float32)
    write_tensors(path / "lora.zklt", tensors)
    write_json(path / "manifest.json", manifest.to_dict())


def load_lora(path, manifest_path=None) -> tuple[LoraManifest, dict[int, LoraWeights]]:
    path = Path(path)
    mpath = Path(manifest_path) if manifest_path else path / "manifest.json"
    manifest = LoraManifest.from_dict(json.loads(mpath.read_text()))
    manifest.validate()
    tensors = read_tensors(path / "lora.zklt")
    weights = {}
    for m in manifest.modules:
        try:
            w = LoraWeights(tensors[m.a_tensor], tensors[m.b_tensor])
        except KeyError as e:
            raise ManifestError(f"tensor {e} missing for module {m.module_id}") from None
        w.check(m)
        weights[m.module_id] = w
    return manifest, weights


# -- wire tensor encoding (also hashed into proof headers) --------------------

WIRE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


def encode_wire_tensor(a: np.ndarray) -> bytes:
    """dtype u8 | rank u8 | dims u32 BE ... | raw little-endian payload."""
    a = np.asarray(a)
    code = {"f32": 0, "i64": 1}[_dtype_name(a)]
    if a.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack(">BB", code, a.ndim) + b"".join(struct.pack(">I", s) for s in a.shape)
    return head + np.ascontiguousarray(a, dtype=WIRE_DTYPES[code]).tobytes()


def decode_wire_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one wire tensor at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 2:
        raise TensorFormatError("truncated tensor header")
    code, rank = struct.unpack_from(">BB", buf, offset)
    if code not in WIRE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset += 2
    if len(buf) < offset + 4 * rank:
        raise TensorFormatError("truncated tensor dims")
    shape = struct.unpack_from(f">{rank}I", buf, offset)
    offset += 4 * rank
    dt = WIRE_DTYPES[code]
    nbytes = math.prod(shape) * dt.itemsize
    if len(buf) < offset + nbytes:
        raise TensorFormatError("truncated tensor payload")
    a = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
    return a.astype(dt.newbyteorder("=")), offset + nbytes
