"""Three-layer attribute types: native tokens, portable core types, codecs.

Core values are stored inline in tuples in a canonical Python form. Codec
values are serialized to a payload plus a metadata map; the payload goes to
the object store and the tuple keeps an :class:`ObjectRef`. Reading a codec
attribute back yields a :class:`LazyRef` whose metadata is available without
touching the object store.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
import struct
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .errors import CorruptPayload, DuplicateCodec, TypeMismatch, UnknownCodec

CORE_TYPES = ("int64", "float64", "varchar", "datetime", "uuid", "json", "bool", "bytes")

# Backend-specific tokens accepted for legacy definitions; lint flags them.
NATIVE_TYPES = frozenset(
    """tinyint smallint mediumint int integer bigint float double real decimal numeric
    char text tinytext mediumtext longtext time date timestamp year enum set
    blob tinyblob mediumblob longblob binary varbinary boolean serial""".split()
)

INLINE, HASH, SCHEMA = "inline", "hash", "schema"

INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1
EPOCH = dt.datetime(1970, 1, 1, tzinfo=dt.timezone.utc)

_VARCHAR = re.compile(r"varchar\((\d+)\)$")
_CODEC = re.compile(r"<([a-z][a-z0-9_]*)(?:@(hash|schema))?>$")
_NATIVE = re.compile(r"([A-Za-z]+)(\(.*\))?$")


def canonical_json(obj: Any) -> str:
    """Sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class TypeSpec:
    layer: str  # "native" | "core" | "codec"
    name: str
    params: tuple = ()
    codec_id: str | None = None
    store: str = INLINE

    def __str__(self) -> str:
        if self.layer == "codec":
            return f"<{self.codec_id}>" if self.store == HASH else f"<{self.codec_id}@{self.store}>"
        if self.name == "varchar":
            return f"varchar({self.params[0]})"
        return self.name

    @property
    def is_codec(self) -> bool:
        return self.layer == "codec"

    @property
    def is_numeric(self) -> bool:
        return self.layer == "core" and self.name in ("int64", "float64")

    def family(self) -> str:
        """Comparison family; varchar lengths do not affect compatibility."""
        if self.layer == "codec":
            return "codec:" + str(self.codec_id)
        return self.name if self.layer == "core" else "native:" + self.name.lower()


def parse_type(token: str) -> TypeSpec:
    """Parse a type token such as ``int64``, ``varchar(16)`` or ``<f64_array@schema>``.

    Raises ValueError for anything unrecognized.
    """
    token = token.strip()
    if token in ("int64", "float64", "datetime", "uuid", "json", "bool", "bytes"):
        return TypeSpec("core", token)
    m = _VARCHAR.match(token)
    if m:
        n = int(m.group(1))
        if n < 1:
            raise ValueError("varchar length must be positive")
        return TypeSpec("core", "varchar", (n,))
    m = _CODEC.match(token)
    if m:
        return TypeSpec("codec", m.group(1), codec_id=m.group(1), store=m.group(2) or HASH)
    m = _NATIVE.match(token)
    if m and m.group(1).lower() in NATIVE_TYPES:
        return TypeSpec("native", token)
    raise ValueError(f"unknown type {token!r}")


INT64 = TypeSpec("core", "int64")
FLOAT64 = TypeSpec("core", "float64")
BOOL = TypeSpec("core", "bool")
DATETIME = TypeSpec("core", "datetime")
JSON = TypeSpec("core", "json")


def varchar(n: int) -> TypeSpec:
    return TypeSpec("core", "varchar", (n,))


# -- core values -------------------------------------------------------------------


def coerce(spec: TypeSpec, value: Any, *, check_bounds: bool = True) -> Any:
    """Validate ``value`` against a core/native type and return its canonical form."""
    if spec.layer == "codec":
        raise TypeMismatch(f"codec type {spec} has no inline form")
    if spec.layer == "native":
        try:
            return json.loads(canonical_json(value))
        except (TypeError, ValueError) as exc:
            raise TypeMismatch(f"{value!r} is not storable as {spec}") from exc
    name = spec.name
    if name == "int64":
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
            raise TypeMismatch(f"expected int64, got {value!r}")
        value = int(value)
        if not INT64_MIN <= value <= INT64_MAX:
            raise TypeMismatch(f"{value} out of int64 range")
        return value
    if name == "float64":
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise TypeMismatch(f"expected float64, got {value!r}")
        return float(value)
    if name == "varchar":
        if not isinstance(value, str):
            raise TypeMismatch(f"expected {spec}, got {value!r}")
        if check_bounds and len(value) > spec.params[0]:
            raise TypeMismatch(f"{value!r} has length {len(value)} > {spec.params[0]}")
        return value
    if name == "bool":
        if not isinstance(value, (bool, np.bool_)):
            raise TypeMismatch(f"expected bool, got {value!r}")
        return bool(value)
    if name == "datetime":
        if isinstance(value, str):
            try:
                value = dt.datetime.fromisoformat(value.replace("Z", "+00:00"))
            except ValueError as exc:
                raise TypeMismatch(f"bad datetime {value!r}") from exc
        if not isinstance(value, dt.datetime):
            raise TypeMismatch(f"expected datetime, got {value!r}")
        if value.tzinfo is None:
            return value.replace(tzinfo=dt.timezone.utc)
        return value.astimezone(dt.timezone.utc)
    if name == "uuid":
        if isinstance(value, uuid.UUID):
            return value
        if isinstance(value, str):
            try:
                return uuid.UUID(value)
            except ValueError as exc:
                raise TypeMismatch(f"bad uuid {value!r}") from exc
        raise TypeMismatch(f"expected uuid, got {value!r}")
    if name == "json":
        try:
            return json.loads(canonical_json(value))
        except (TypeError, ValueError) as exc:
            raise TypeMismatch(f"{value!r} is not json-serializable") from exc
    if name == "bytes":
        if isinstance(value, (bytes, bytearray, memoryview)):
            return bytes(value)
        raise TypeMismatch(f"expected bytes, got {value!r}")
    raise TypeMismatch(f"unsupported type {spec}")


def _micros(value: dt.datetime) -> int:
    delta = value - EPOCH
    return (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds


def canonical_bytes(spec: TypeSpec, value: Any) -> bytes:
    """Byte-deterministic encoding of a canonical core value."""
    if spec.layer == "native":
        return canonical_json(value).encode()
    name = spec.name
    if name == "int64":
        return struct.pack("<q", value)
    if name == "float64":
        return struct.pack("<d", value)
    if name == "varchar":
        return value.encode("utf-8")
    if name == "datetime":
        return struct.pack("<q", _micros(value))
    if name == "uuid":
        return value.bytes
    if name == "json":
        return canonical_json(value).encode("utf-8")
    if name == "bool":
        return b"\x01" if value else b"\x00"
    if name == "bytes":
        return value
    raise TypeMismatch(f"no canonical encoding for {spec}")


def key_hash(specs, values) -> str:
    """SHA-256 (hex) over length-prefixed canonical encodings, in order."""
    h = hashlib.sha256()
    for spec, value in zip(specs, values):
        b = canonical_bytes(spec, value)
        h.update(struct.pack("<I", len(b)))
        h.update(b)
    return h.hexdigest()


def sort_key(spec: TypeSpec, value: Any):
    if value is None:
        return (0, 0)
    if spec.layer == "native" or spec.name == "json":
        return (1, canonical_json(value))
    if isinstance(value, ObjectRef):
        return (1, value.address.path)
    return (1, value)


def format_datetime(value: dt.datetime) -> str:
    return value.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def to_json(spec: TypeSpec, value: Any) -> Any:
    """Stored form -> json-compatible value (used for snapshots and CLI output)."""
    if value is None:
        return None
    if isinstance(value, ObjectRef):
        return value.to_json()
    if spec.layer == "native" or spec.name in ("int64", "float64", "varchar", "bool", "json"):
        return value
    if spec.name == "datetime":
        return format_datetime(value)
    if spec.name == "uuid":
        return str(value)
    if spec.name == "bytes":
        return value.hex()
    raise TypeMismatch(f"cannot render {spec}")


def from_json(spec: TypeSpec, value: Any) -> Any:
    if value is None:
        return None
    if spec.is_codec:
        return ObjectRef.from_json(value)
    if spec.layer == "core" and spec.name == "bytes" and isinstance(value, str):
        return bytes.fromhex(value)
    return coerce(spec, value, check_bounds=False)


# -- object references ----------------------------------------------------------------


@dataclass(frozen=True)
class ObjectAddress:
    scheme: str  # "hash" | "schema"
    path: str
    content_hash: str  # lowercase hex SHA-256
    size: int


@dataclass(frozen=True)
class ObjectRef:
    """What a tuple stores for a codec attribute."""

    address: ObjectAddress
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        a = self.address
        return {
            "metadata": dict(self.metadata),
            "path": a.path,
            "scheme": a.scheme,
            "sha256": a.content_hash,
            "size": a.size,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ObjectRef:
        return cls(
            ObjectAddress(obj["scheme"], obj["path"], obj["sha256"], obj["size"]),
            dict(obj["metadata"]),
        )


@dataclass(frozen=True)
class EncodedPayload:
    payload: bytes
    metadata: dict

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()


# -- codecs ----------------------------------------------------------------------------


def _fingerprint_of(fn: Callable) -> str:
    code = getattr(fn, "__code__", None)
    body = hashlib.sha256(code.co_code).hexdigest()[:16] if code is not None else ""
    return f"{getattr(fn, '__module__', '')}.{getattr(fn, '__qualname__', repr(fn))}:{body}"


@dataclass(frozen=True)
class Codec:
    codec_id: str
    version: int
    encode: Callable[[Any], tuple[bytes, dict]]
    decode: Callable[[bytes, dict], Any]
    describe: Callable[[dict], dict] = dict
    extension: str = "bin"
    load_file: Callable[[Path], Any] | None = None

    @property
    def fingerprint(self) -> str:
        parts = [self.codec_id, str(self.version), self.extension]
        parts += [_fingerprint_of(f) for f in (self.encode, self.decode, self.describe)]
        return "|".join(parts)


class CodecRegistry:
    def __init__(self, codecs=()):
        self._codecs: dict[tuple[str, int], Codec] = {}
        self._lock = threading.Lock()
        for c in codecs:
            self.register(c)

    def register(self, codec: Codec) -> None:
        key = (codec.codec_id, codec.version)
        with self._lock:
            existing = self._codecs.get(key)
            if existing is not None:
                if existing.fingerprint != codec.fingerprint:
                    raise DuplicateCodec(f"codec {codec.codec_id} v{codec.version} is already registered")
                return
            self._codecs[key] = codec

    def resolve(self, codec_id: str, version: int | None = None) -> Codec:
        if version is not None:
            try:
                return self._codecs[(codec_id, version)]
            except KeyError:
                raise UnknownCodec(f"{codec_id} v{version}") from None
        versions = [v for (cid, v) in self._codecs if cid == codec_id]
        if not versions:
            raise UnknownCodec(codec_id)
        return self._codecs[(codec_id, max(versions))]

    def __contains__(self, codec_id: str) -> bool:
        return any(cid == codec_id for cid, _ in self._codecs)


def _f64_encode(value):
    try:
        arr = np.asarray(value, dtype="<f8")
    except (TypeError, ValueError) as exc:
        raise TypeMismatch(f"f64_array needs a numeric array, got {type(value).__name__}") from exc
    arr = np.ascontiguousarray(arr)
    return arr.tobytes(), {"dtype": "f64", "shape": list(arr.shape)}


def _f64_decode(payload: bytes, metadata: dict):
    return np.frombuffer(payload, dtype="<f8").reshape(metadata["shape"]).copy()


def _f64_describe(metadata: dict) -> dict:
    shape = tuple(metadata["shape"])
    return {"dtype": metadata["dtype"], "shape": shape, "size": int(np.prod(shape, dtype=np.int64))}


def _f64_load(path: Path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return np.frombuffer(path.read_bytes(), dtype="<f8")


def _blob_encode(value):
    if not isinstance(value, (bytes, bytearray, memoryview)):
        raise TypeMismatch(f"blob needs bytes, got {type(value).__name__}")
    return bytes(value), {}


def _blob_decode(payload: bytes, metadata: dict):
    return bytes(payload)


def _blob_describe(metadata: dict) -> dict:
    return {"size": metadata["size"]}


F64_ARRAY = Codec("f64_array", 1, _f64_encode, _f64_decode, _f64_describe, "f64", _f64_load)
BLOB = Codec("blob", 1, _blob_encode, _blob_decode, _blob_describe, "bin", lambda p: Path(p).read_bytes())


def default_codecs() -> CodecRegistry:
    return CodecRegistry([F64_ARRAY, BLOB])


def encode_value(spec: TypeSpec, value: Any, codecs: CodecRegistry | None = None):
    """Core types -> canonical inline value; codec types -> :class:`EncodedPayload`."""
    if not spec.is_codec:
        return coerce(spec, value)
    if codecs is None:
        raise UnknownCodec(spec.codec_id)
    codec = codecs.resolve(spec.codec_id)
    payload, meta = codec.encode(value)
    metadata = dict(meta)
    metadata.update(codec_id=codec.codec_id, version=codec.version, size=len(payload))
    return EncodedPayload(payload, metadata)


def decode_value(spec: TypeSpec, stored: Any, codecs: CodecRegistry | None = None, loader=None):
    """Inverse of :func:`encode_value`; object references come back lazy."""
    if stored is None or not spec.is_codec:
        return stored
    if codecs is None:
        raise UnknownCodec(spec.codec_id)
    if isinstance(stored, EncodedPayload):
        codec = codecs.resolve(stored.metadata["codec_id"], stored.metadata["version"])
        return codec.decode(stored.payload, stored.metadata)
    if isinstance(stored, ObjectRef):
        codec = codecs.resolve(stored.metadata["codec_id"], stored.metadata["version"])
        return LazyRef(stored, codec, loader)
    raise TypeMismatch(f"cannot decode {type(stored).__name__} as {spec}")


class LazyRef:
    """Handle to a stored object. Metadata reads never touch the object store."""

    def __init__(self, ref: ObjectRef, codec: Codec, loader: Callable[[str], bytes] | None):
        self.ref = ref
        self.codec = codec
        self._loader = loader
        self._value = None
        self._loaded = False

    @property
    def address(self) -> ObjectAddress:
        return self.ref.address

    @property
    def metadata(self) -> Mapping[str, Any]:
        return self.ref.metadata

    @property
    def shape(self):
        shape = self.metadata.get("shape")
        return tuple(shape) if shape is not None else None

    @property
    def dtype(self):
        return self.metadata.get("dtype")

    @property
    def size(self) -> int:
        return self.address.size

    @property
    def materialized(self) -> bool:
        return self._loaded

    def describe(self) -> dict:
        return self.codec.describe(dict(self.metadata))

    def materialize(self):
        if not self._loaded:
            if self._loader is None:
                raise CorruptPayload(f"no loader bound for {self.address.path}")
            payload = self._loader(self.address.path)
            if hashlib.sha256(payload).hexdigest() != self.address.content_hash:
                raise CorruptPayload(f"content hash mismatch for {self.address.path}")
            self._value = self.codec.decode(payload, dict(self.metadata))
            self._loaded = True
        return self._value

    def __eq__(self, other):
        return isinstance(other, LazyRef) and other.ref == self.ref

    def __hash__(self):
        return hash(self.ref.address)

    def __repr__(self):
        return f"LazyRef({self.metadata.get('codec_id')}, {self.address.path}, {self.describe()})"
