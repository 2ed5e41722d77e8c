"""On-disk tensor container, episode manifests, and episode loading.

Tensor container layout (all little-endian):

    offset  size      field
    0       4         magic "FTNS"
    4       1         version, currently 0x01
    5       1         rank r, 1..4
    6       4*r       dims, uint32 each
    6+4r    4*prod    payload, float32 row-major

Manifests are JSON text records; see EpisodeManifest for the fields.
Target-query labels are parsed but quarantined at load time: they are
reachable only through Episode.scoring_labels(), never through the
accessors the pipeline consumes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    ShapeMismatchError,
    TensorFormatError,
    TensorIOError,
    TruncatedError,
    UnsupportedVersionError,
)

MAGIC = b"FTNS"
VERSION = 1
MAX_RANK = 4


def _checked_write(sink: BinaryIO, data: bytes, offset: int) -> int:
    try:
        sink.write(data)
    except OSError as exc:
        raise TensorIOError(offset, str(exc)) from exc
    return offset + len(data)


def write_tensor(tensor: np.ndarray, sink: BinaryIO) -> int:
    """Serialize a float tensor; returns the total bytes written."""
    rank = np.asarray(tensor).ndim
    if not 1 <= rank <= MAX_RANK:
        raise ValueError(f"rank must be in [1, {MAX_RANK}], got {rank}")
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"dims must be positive, got {arr.shape}")
    offset = _checked_write(sink, MAGIC, 0)
    offset = _checked_write(sink, struct.pack("<BB", VERSION, arr.ndim), offset)
    offset = _checked_write(sink, struct.pack(f"<{arr.ndim}I", *arr.shape), offset)
    offset = _checked_write(sink, arr.tobytes(), offset)
    return offset


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Inverse of write_tensor; round trips are bit-exact."""
    head = source.read(4)
    if len(head) < 4:
        raise TruncatedError(f"stream ended inside the magic ({len(head)} bytes)")
    if head != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, got {head!r}")
    vr = source.read(2)
    if len(vr) < 2:
        raise TruncatedError("stream ended inside the version/rank bytes")
    version, rank = struct.unpack("<BB", vr)
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"rank {rank} outside [1, {MAX_RANK}]")
    dim_bytes = source.read(4 * rank)
    if len(dim_bytes) < 4 * rank:
        raise TruncatedError("stream ended inside the dims")
    dims = struct.unpack(f"<{rank}I", dim_bytes)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero dimension in {dims}")
    count = int(np.prod(dims))
    payload = source.read(4 * count)
    if len(payload) < 4 * count:
        raise TruncatedError(
            f"payload declares {count} floats, stream held {len(payload) // 4}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(dims).copy()


def write_tensor_file(tensor: np.ndarray, path: str | Path) -> int:
    with open(path, "wb") as sink:
        return write_tensor(tensor, sink)


def read_tensor_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as source:
        return read_tensor(source)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_index: int
    domain: str


@dataclass(frozen=True)
class EpisodeManifest:
    """Declares one episode: support shots plus both query sets.

    Invariants checked by validate(): support holds exactly n_way*k_shot
    entries with k_shot per class, both query sets reference exactly the
    classes 0..n_way-1, and all tensors share the declared (h, w, d).
    """

    n_way: int
    k_shot: int
    n_query: int
    height: int
    width: int
    channels: int
    support: tuple[ManifestEntry, ...]
    query_source: tuple[ManifestEntry, ...]
    query_target: tuple[ManifestEntry, ...]

    def validate(self) -> None:
        if self.n_way < 1 or self.k_shot < 1 or self.n_query < 1:
            raise ManifestError("n_way, k_shot, n_query must all be >= 1")
        if len(self.support) != self.n_way * self.k_shot:
            raise ManifestError(
                f"support holds {len(self.support)} entries, "
                f"expected {self.n_way * self.k_shot}"
            )
        per_class = [0] * self.n_way
        for e in self.support:
            if not 0 <= e.class_index < self.n_way:
                raise ManifestError(f"support class {e.class_index} out of range")
            per_class[e.class_index] += 1
        if any(c != self.k_shot for c in per_class):
            raise ManifestError(f"support classes unbalanced: {per_class}")
        for name, entries in (("query_source", self.query_source),
                              ("query_target", self.query_target)):
            classes = {e.class_index for e in entries}
            if classes != set(range(self.n_way)):
                raise ManifestError(
                    f"{name} references classes {sorted(classes)}, "
                    f"expected 0..{self.n_way - 1}"
                )

    def to_dict(self) -> dict:
        def enc(entries):
            return [
                {"path": e.path, "class": e.class_index, "domain": e.domain}
                for e in entries
            ]

        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "n_query": self.n_query,
            "dims": {"h": self.height, "w": self.width, "d": self.channels},
            "support": enc(self.support),
            "query_source": enc(self.query_source),
            "query_target": enc(self.query_target),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EpisodeManifest":
        try:
            dims = raw["dims"]

            def dec(items):
                return tuple(
                    ManifestEntry(e["path"], int(e["class"]), e["domain"])
                    for e in items
                )

            manifest = cls(
                n_way=int(raw["n_way"]),
                k_shot=int(raw["k_shot"]),
                n_query=int(raw["n_query"]),
                height=int(dims["h"]),
                width=int(dims["w"]),
                channels=int(dims["d"]),
                support=dec(raw["support"]),
                query_source=dec(raw["query_source"]),
                query_target=dec(raw["query_target"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest record: {exc}") from exc
        manifest.validate()
        return manifest

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Episode:
    """One task: grouped support maps plus the two query sets.

    Target labels are deliberately not a public attribute; the pipeline
    must classify blind and only scoring code may call scoring_labels().
    """

    def __init__(
        self,
        support: list[list[np.ndarray]],
        query_source: list[np.ndarray],
        query_source_labels: list[int],
        query_target: list[np.ndarray],
        target_labels: list[int],
    ):
        self.support = support
        self.query_source = query_source
        self.query_source_labels = list(query_source_labels)
        self.query_target = query_target
        self._quarantined_labels = tuple(int(c) for c in target_labels)

    @property
    def n_way(self) -> int:
        return len(self.support)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.support[0][0].shape

    def scoring_labels(self) -> tuple[int, ...]:
        """Held-out target labels. Only accuracy scoring may call this."""
        return self._quarantined_labels

    def content_hash(self) -> str:
        """Digest of every tensor payload and label, for pairing checks."""
        h = hashlib.sha256()
        for group in self.support:
            for arr in group:
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for arr in self.query_source:
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        h.update(np.asarray(self.query_source_labels, dtype="<i4").tobytes())
        for arr in self.query_target:
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        h.update(np.asarray(self._quarantined_labels, dtype="<i4").tobytes())
        return h.hexdigest()


def load_episode(manifest: EpisodeManifest, base_dir: str | Path) -> Episode:
    """Materialize an Episode from a manifest and its tensor files."""
    manifest.validate()
    base = Path(base_dir)
    expected = (manifest.height, manifest.width, manifest.channels)

    def load_entry(entry: ManifestEntry) -> np.ndarray:
        arr = read_tensor_file(base / entry.path)
        if arr.shape != expected:
            raise ShapeMismatchError(
                f"{entry.path}: shape {arr.shape}, manifest declares {expected}"
            )
        return arr

    support: list[list[np.ndarray]] = [[] for _ in range(manifest.n_way)]
    for entry in manifest.support:
        support[entry.class_index].append(load_entry(entry))
    query_source = [load_entry(e) for e in manifest.query_source]
    qs_labels = [e.class_index for e in manifest.query_source]
    query_target = [load_entry(e) for e in manifest.query_target]
    qt_labels = [e.class_index for e in manifest.query_target]
    return Episode(support, query_source, qs_labels, query_target, qt_labels)
