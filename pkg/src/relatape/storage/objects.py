"""Object storage with hash- and schema-addressed paths.

Layout under the store root::

    hash/<h[0:2]>/<h>                                   # h = sha256 hex of content
    schema/<schema>/<table>/<pk1=v1>/.../<attr>.<ext>
    <object>.meta.json                                  # metadata sidecar
"""

from __future__ import annotations

import abc
import datetime as dt
import hashlib
import os
import threading
import uuid
from pathlib import Path
from typing import Any, Sequence

from ..errors import StorageFailure
from ..types import HASH, SCHEMA, ObjectAddress, TypeSpec, canonical_json

SIDECAR = ".meta.json"
_SAFE = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_-")


class ObjectStore(abc.ABC):
    """put/get/exists/delete/list over slash-separated paths.

    ``put`` is atomic per path and a no-op when identical bytes are already
    there. ``reads`` counts :meth:`get` calls.
    """

    def __init__(self):
        self.reads = 0
        self._counter_lock = threading.Lock()

    def _count_read(self):
        with self._counter_lock:
            self.reads += 1

    @abc.abstractmethod
    def put(self, path: str, data: bytes) -> bool:
        """Store ``data``; return True if anything was written."""

    @abc.abstractmethod
    def get(self, path: str) -> bytes: ...

    @abc.abstractmethod
    def peek(self, path: str) -> bytes | None:
        """Uncounted read for internal bookkeeping (snapshots, dedup checks)."""

    @abc.abstractmethod
    def exists(self, path: str) -> bool: ...

    @abc.abstractmethod
    def delete(self, path: str) -> bool: ...

    @abc.abstractmethod
    def list(self, prefix: str = "") -> list[str]:
        """Sorted object paths under ``prefix``, sidecars included."""


class MemoryObjectStore(ObjectStore):
    def __init__(self):
        super().__init__()
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, path: str, data: bytes) -> bool:
        data = bytes(data)
        with self._lock:
            if self._objects.get(path) == data:
                return False
            self._objects[path] = data
            return True

    def get(self, path: str) -> bytes:
        self._count_read()
        with self._lock:
            try:
                return self._objects[path]
            except KeyError:
                raise StorageFailure(f"object {path!r} not found") from None

    def peek(self, path: str) -> bytes | None:
        with self._lock:
            return self._objects.get(path)

    def exists(self, path: str) -> bool:
        with self._lock:
            return path in self._objects

    def delete(self, path: str) -> bool:
        with self._lock:
            return self._objects.pop(path, None) is not None

    def list(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(p for p in self._objects if p.startswith(prefix))

    def corrupt(self, path: str, index: int = 0) -> None:
        """Flip one byte in place (for tests)."""
        with self._lock:
            b = bytearray(self._objects[path])
            b[index] ^= 0xFF
            self._objects[path] = bytes(b)


class LocalObjectStore(ObjectStore):
    """Directory tree on a local filesystem; writes go through rename."""

    def __init__(self, root: str | Path):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _full(self, path: str) -> Path:
        if path.startswith("/") or ".." in path.split("/"):
            raise StorageFailure(f"invalid object path {path!r}")
        return self.root / path

    def put(self, path: str, data: bytes) -> bool:
        full = self._full(path)
        try:
            if full.exists() and full.read_bytes() == data:
                return False
            full.parent.mkdir(parents=True, exist_ok=True)
            tmp = full.with_name(f".{full.name}.{uuid.uuid4().hex}.tmp")
            with open(tmp, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, full)
        except OSError as exc:
            raise StorageFailure(f"cannot write {path!r}: {exc}") from exc
        return True

    def get(self, path: str) -> bytes:
        self._count_read()
        try:
            return self._full(path).read_bytes()
        except OSError as exc:
            raise StorageFailure(f"cannot read {path!r}: {exc}") from exc

    def peek(self, path: str) -> bytes | None:
        try:
            return self._full(path).read_bytes()
        except FileNotFoundError:
            return None

    def exists(self, path: str) -> bool:
        return self._full(path).is_file()

    def delete(self, path: str) -> bool:
        full = self._full(path)
        try:
            full.unlink()
        except FileNotFoundError:
            return False
        except OSError as exc:
            raise StorageFailure(f"cannot delete {path!r}: {exc}") from exc
        parent = full.parent
        while parent != self.root:
            try:
                parent.rmdir()
            except OSError:
                break
            parent = parent.parent
        return True

    def list(self, prefix: str = "") -> list[str]:
        out = []
        for dirpath, _, files in os.walk(self.root):
            for name in files:
                if name.startswith(".") and name.endswith(".tmp"):
                    continue
                rel = os.path.relpath(os.path.join(dirpath, name), self.root).replace(os.sep, "/")
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)


# -- addressing ---------------------------------------------------------------------------


def hash_path(content_hash: str) -> str:
    return f"hash/{content_hash[:2]}/{content_hash}"


def _escape(text: str) -> str:
    return "".join(c if c in _SAFE else "".join(f"%{b:02X}" for b in c.encode("utf-8")) for c in text)


def render_key_value(spec: TypeSpec, value: Any) -> str:
    """Canonical rendering of a primary-key value inside a path segment."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, dt.datetime):
        value = value.astimezone(dt.timezone.utc)
        text = value.strftime("%Y%m%dT%H%M%S")
        if value.microsecond:
            text += f".{value.microsecond:06d}"
        return text + "Z"
    if isinstance(value, uuid.UUID):
        return str(value)
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, str):
        return _escape(value)
    if isinstance(value, float):
        return _escape(repr(value))
    return _escape(canonical_json(value))


def schema_path(schema: str, table: str, key: Sequence[tuple[str, TypeSpec, Any]], attribute: str, extension: str) -> str:
    segments = [f"{name}={render_key_value(spec, value)}" for name, spec, value in key]
    return "/".join(["schema", schema, table, *segments, f"{attribute}.{extension}"])


def put_object(
    objects: ObjectStore,
    scheme: str,
    content: bytes,
    key_context: dict | None = None,
    metadata: dict | None = None,
) -> ObjectAddress:
    """Store ``content`` and return its address.

    ``key_context`` (schema scheme only) has keys ``schema``, ``table``,
    ``key`` (a sequence of (name, TypeSpec, value)), ``attribute`` and
    ``extension``.
    """
    address, _ = write_object(objects, scheme, content, key_context, metadata)
    return address


def address_for(scheme: str, content: bytes, key_context: dict | None = None) -> ObjectAddress:
    h = hashlib.sha256(content).hexdigest()
    if scheme == HASH:
        path = hash_path(h)
    elif scheme == SCHEMA:
        if not key_context:
            raise StorageFailure("schema-addressed objects need a key context")
        kc = key_context
        path = schema_path(kc["schema"], kc["table"], kc["key"], kc["attribute"], kc["extension"])
    else:
        raise StorageFailure(f"unknown addressing scheme {scheme!r}")
    return ObjectAddress(scheme, path, h, len(content))


def write_object(objects: ObjectStore, scheme, content, key_context=None, metadata=None) -> tuple[ObjectAddress, bool]:
    """Like :func:`put_object` but also reports whether the object was new."""
    address = address_for(scheme, content, key_context)
    created = objects.put(address.path, content)
    # first writer's metadata wins for shared hash-addressed content
    if metadata is not None and (created or not objects.exists(address.path + SIDECAR)):
        objects.put(address.path + SIDECAR, canonical_json(metadata).encode("utf-8"))
    return address, created


def object_paths(objects: ObjectStore) -> list[str]:
    """Every stored object path, sidecars excluded."""
    return [p for p in objects.list("") if not p.endswith(SIDECAR) and (p.startswith("hash/") or p.startswith("schema/"))]
