"""Binary token-set persistence (CBTK) and relevance-manifest ingestion.

CBTK file layout (all integers little-endian):

    header (24 bytes): magic "CBTK" | version u32 = 1 | flags u16
                       | dim u32 | dtype u16 (0 = f32 LE) | image_count u64
    flags: bit0 = records carry an attention channel, bit1 = records carry
           a CLS vector. Uniform across one file.
    record: id_len u16 | id bytes (UTF-8) | n_tokens u16
            | [cls: dim f32]            (iff flag bit1)
            | tokens: n_tokens x dim f32, row-major
            | [attention: n_tokens f32] (iff flag bit0)

Writers emit token rows exactly as held, so writing a store and reading it
back is a byte-for-byte identity. Readers re-derive per-row L2 norms: when
any row deviates from unit norm by more than 1e-3 the producer is assumed
to have written raw (unnormalized) embeddings and the whole record is
renormalized, with the original norms reported as ``raw_norms``.
"""

from __future__ import annotations

import io
import json
import mmap
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from tokenrank.errors import (
    CapacityError,
    CorruptionError,
    FormatError,
    ValidationError,
)

MAGIC = b"CBTK"
VERSION = 1
DTYPE_F32 = 0
FLAG_ATTENTION = 1
FLAG_CLS = 2

_HEADER = struct.Struct("<4sIHIHQ")
HEADER_SIZE = _HEADER.size  # 24

_U16 = struct.Struct("<H")
MAX_TOKENS = 0xFFFF

# Row-norm deviation beyond which a record counts as written unnormalized.
RAW_NORM_THRESHOLD = 1e-3
UNIT_NORM_TOL = 1e-4
ATTENTION_SUM_TOL = 1e-5


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float32)


@dataclass(eq=False)
class TokenSet:
    """Per-image patch tokens with optional CLS vector and attention weights.

    ``tokens`` rows are unit L2 norm; ``raw_norms`` holds the pre-normalization
    norms. ``stored_tokens``/``stored_cls`` keep the exact matrices a file
    carried (or will carry) so persistence stays bit-exact; they default to
    the normalized arrays.
    """

    image_id: str
    tokens: np.ndarray
    raw_norms: np.ndarray
    attention: np.ndarray | None = None
    cls: np.ndarray | None = None
    stored_tokens: np.ndarray | None = field(default=None, repr=False)
    stored_cls: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])

    @classmethod
    def from_matrix(
        cls,
        image_id: str,
        matrix: np.ndarray,
        attention: np.ndarray | None = None,
        cls_vector: np.ndarray | None = None,
    ) -> "TokenSet":
        """Build a TokenSet from producer output, normalizing as needed.

        The input matrix is preserved for persistence; rows are normalized
        when they deviate from unit norm, and attention is renormalized to
        sum to one over the patch tokens.
        """
        stored = _as_f32(matrix)
        if stored.ndim != 2 or stored.shape[0] < 1:
            raise ValidationError(f"{image_id}: token matrix must be 2-D and non-empty")
        tokens, raw_norms = _normalize_rows(image_id, stored)
        attn = None
        if attention is not None:
            attn = _as_f32(attention).reshape(-1)
            if attn.shape[0] != stored.shape[0]:
                raise ValidationError(f"{image_id}: attention length != token count")
            if np.any(attn < 0):
                raise ValidationError(f"{image_id}: attention entries must be >= 0")
            total = float(attn.sum(dtype=np.float64))
            if total <= 0:
                raise ValidationError(f"{image_id}: attention sums to zero")
            attn = (attn.astype(np.float64) / total).astype(np.float32)
        stored_cls = None
        cls_vec = None
        if cls_vector is not None:
            stored_cls = _as_f32(cls_vector).reshape(-1)
            if stored_cls.shape[0] != stored.shape[1]:
                raise ValidationError(f"{image_id}: CLS dim != token dim")
            cls_vec = _normalize_cls(image_id, stored_cls)
        ts = cls(
            image_id=image_id,
            tokens=tokens,
            raw_norms=raw_norms,
            attention=attn,
            cls=cls_vec,
            stored_tokens=stored,
            stored_cls=stored_cls,
        )
        ts.validate()
        return ts

    def validate(self) -> None:
        """Check the declared invariants; raise ValidationError on violation."""
        if self.tokens.ndim != 2:
            raise ValidationError(f"{self.image_id}: tokens must be 2-D")
        n, d = self.tokens.shape
        if n < 1:
            raise ValidationError(f"{self.image_id}: empty token set")
        if n > MAX_TOKENS:
            raise CapacityError(f"{self.image_id}: {n} tokens exceeds the u16 limit")
        norms = np.linalg.norm(self.tokens.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValidationError(f"{self.image_id}: token rows are not unit norm")
        if self.raw_norms.shape != (n,):
            raise ValidationError(f"{self.image_id}: raw_norms length != token count")
        if self.attention is not None:
            if self.attention.shape != (n,):
                raise ValidationError(f"{self.image_id}: attention length != token count")
            if np.any(self.attention < 0):
                raise ValidationError(f"{self.image_id}: negative attention weight")
            total = float(self.attention.sum(dtype=np.float64))
            if abs(total - 1.0) > ATTENTION_SUM_TOL:
                raise ValidationError(
                    f"{self.image_id}: attention sums to {total:.6f}, expected 1"
                )
        if self.cls is not None:
            if self.cls.shape != (d,):
                raise ValidationError(f"{self.image_id}: CLS dim != token dim")
            cls_norm = float(np.linalg.norm(self.cls.astype(np.float64)))
            if abs(cls_norm - 1.0) > UNIT_NORM_TOL:
                raise ValidationError(f"{self.image_id}: CLS vector is not unit norm")

    def _persisted_tokens(self) -> np.ndarray:
        return self.stored_tokens if self.stored_tokens is not None else self.tokens

    def _persisted_cls(self) -> np.ndarray | None:
        if self.stored_cls is not None:
            return self.stored_cls
        return self.cls


def _normalize_rows(image_id: str, stored: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms64 = np.linalg.norm(stored.astype(np.float64), axis=1)
    if np.any(norms64 < 1e-12):
        bad = int(np.argmin(norms64))
        raise ValidationError(f"{image_id}: token row {bad} has zero norm")
    raw_norms = norms64.astype(np.float32)
    deviation = float(np.max(np.abs(norms64 - 1.0)))
    if deviation > RAW_NORM_THRESHOLD:
        tokens = (stored.astype(np.float64) / norms64[:, None]).astype(np.float32)
    elif deviation > UNIT_NORM_TOL:
        raise ValidationError(
            f"{image_id}: row norms deviate by {deviation:.2e}: neither normalized "
            f"nor flagged as raw (>{RAW_NORM_THRESHOLD:g})"
        )
    else:
        tokens = stored
    return tokens, raw_norms


def _normalize_cls(image_id: str, stored_cls: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(stored_cls.astype(np.float64)))
    if norm < 1e-12:
        raise ValidationError(f"{image_id}: CLS vector has zero norm")
    if abs(norm - 1.0) > RAW_NORM_THRESHOLD:
        return (stored_cls.astype(np.float64) / norm).astype(np.float32)
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValidationError(f"{image_id}: CLS norm deviates by {abs(norm - 1.0):.2e}")
    return stored_cls


def write_store(records: Iterable[TokenSet], path: str | Path) -> int:
    """Write token sets to a CBTK file; returns the byte count written.

    All records must share the embedding dim and the presence/absence of the
    optional channels. Output is deterministic byte-for-byte.
    """
    path = Path(path)
    dim: int | None = None
    flags: int | None = None
    count = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, 0, DTYPE_F32, 0))
        for record in records:
            record.validate()
            rec_flags = (FLAG_ATTENTION if record.attention is not None else 0) | (
                FLAG_CLS if record.cls is not None else 0
            )
            if dim is None:
                dim, flags = record.dim, rec_flags
            elif record.dim != dim:
                raise FormatError(
                    f"record {count} ({record.image_id}): dim {record.dim} != store dim {dim}"
                )
            elif rec_flags != flags:
                raise FormatError(
                    f"record {count} ({record.image_id}): optional channels differ from store"
                )
            id_bytes = record.image_id.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise CapacityError(f"record {count}: image_id longer than u16")
            if record.n > MAX_TOKENS:
                raise CapacityError(
                    f"record {count} ({record.image_id}): {record.n} tokens exceeds u16"
                )
            fh.write(_U16.pack(len(id_bytes)))
            fh.write(id_bytes)
            fh.write(_U16.pack(record.n))
            if flags & FLAG_CLS:
                fh.write(_as_f32(record._persisted_cls()).tobytes())
            fh.write(_as_f32(record._persisted_tokens()).tobytes())
            if flags & FLAG_ATTENTION:
                fh.write(_as_f32(record.attention).tobytes())
            count += 1
        total = fh.tell()
        fh.seek(0)
        fh.write(_HEADER.pack(MAGIC, VERSION, flags or 0, dim or 0, DTYPE_F32, count))
    return total


@dataclass(frozen=True)
class StoreHeader:
    flags: int
    dim: int
    image_count: int

    @property
    def has_attention(self) -> bool:
        return bool(self.flags & FLAG_ATTENTION)

    @property
    def has_cls(self) -> bool:
        return bool(self.flags & FLAG_CLS)


def read_header(path: str | Path) -> StoreHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, str(path))


def _parse_header(raw: bytes, name: str) -> StoreHeader:
    if len(raw) < HEADER_SIZE:
        raise CorruptionError(f"{name}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, flags, dim, dtype, count = _HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{name}: unsupported dtype code {dtype}")
    return StoreHeader(flags=flags, dim=dim, image_count=count)


def read_store(path: str | Path, *, use_mmap: bool = False) -> Iterator[TokenSet]:
    """Yield validated TokenSets in file order (streaming or memory-mapped).

    Memory-mapped records are zero-copy views; the map stays alive for as
    long as any yielded array references it.
    """
    path = Path(path)
    if use_mmap:
        with open(path, "rb") as fh:
            mapped = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        yield from _iter_records(mapped, str(path))
    else:
        with open(path, "rb") as fh:
            yield from _stream_records(fh, str(path))


def _stream_records(fh: io.BufferedReader, name: str) -> Iterator[TokenSet]:
    header = _parse_header(fh.read(HEADER_SIZE), name)
    itemsize = 4

    for index in range(header.image_count):
        def take(nbytes: int) -> bytes:
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CorruptionError(f"{name}: truncated record at index {index}")
            return raw

        id_len_raw = fh.read(2)
        if len(id_len_raw) != 2:
            raise CorruptionError(f"{name}: truncated record at index {index}")
        (id_len,) = _U16.unpack(id_len_raw)
        image_id = take(id_len).decode("utf-8")
        (n_tokens,) = _U16.unpack(take(2))
        if n_tokens < 1:
            raise CorruptionError(f"{name}: record {index} declares zero tokens")
        cls_stored = None
        if header.has_cls:
            cls_stored = np.frombuffer(take(header.dim * itemsize), dtype="<f4")
        stored = np.frombuffer(
            take(n_tokens * header.dim * itemsize), dtype="<f4"
        ).reshape(n_tokens, header.dim)
        attention = None
        if header.has_attention:
            attention = np.frombuffer(take(n_tokens * itemsize), dtype="<f4")
        yield _finish_record(name, index, image_id, stored, attention, cls_stored)
    if fh.read(1):
        raise CorruptionError(f"{name}: trailing bytes after the last record")


def load_store(path: str | Path, *, use_mmap: bool = False) -> list[TokenSet]:
    return list(read_store(path, use_mmap=use_mmap))


def _iter_records(buf, name: str) -> Iterator[TokenSet]:
    header = _parse_header(bytes(buf[:HEADER_SIZE]), name)
    pos = HEADER_SIZE
    end = len(buf)
    itemsize = 4
    for index in range(header.image_count):
        try:
            (id_len,) = _U16.unpack_from(buf, pos)
            pos += 2
            if pos + id_len + 2 > end:
                raise CorruptionError("")
            image_id = bytes(buf[pos:pos + id_len]).decode("utf-8")
            pos += id_len
            (n_tokens,) = _U16.unpack_from(buf, pos)
            pos += 2
            if n_tokens < 1:
                raise CorruptionError("")
            cls_stored = None
            if header.has_cls:
                nbytes = header.dim * itemsize
                if pos + nbytes > end:
                    raise CorruptionError("")
                cls_stored = np.frombuffer(buf, dtype="<f4", count=header.dim, offset=pos)
                pos += nbytes
            nbytes = n_tokens * header.dim * itemsize
            if pos + nbytes > end:
                raise CorruptionError("")
            stored = np.frombuffer(
                buf, dtype="<f4", count=n_tokens * header.dim, offset=pos
            ).reshape(n_tokens, header.dim)
            pos += nbytes
            attention = None
            if header.has_attention:
                nbytes = n_tokens * itemsize
                if pos + nbytes > end:
                    raise CorruptionError("")
                attention = np.frombuffer(buf, dtype="<f4", count=n_tokens, offset=pos)
                pos += nbytes
        except (CorruptionError, struct.error):
            raise CorruptionError(f"{name}: truncated record at index {index}") from None
        yield _finish_record(name, index, image_id, stored, attention, cls_stored)
    if pos != end:
        raise CorruptionError(f"{name}: {end - pos} trailing bytes after the last record")


def _finish_record(
    name: str,
    index: int,
    image_id: str,
    stored: np.ndarray,
    attention: np.ndarray | None,
    cls_stored: np.ndarray | None,
) -> TokenSet:
    stored = np.ascontiguousarray(stored, dtype=np.float32)
    tokens, raw_norms = _normalize_rows(image_id, stored)
    cls_vec = None
    if cls_stored is not None:
        cls_stored = np.ascontiguousarray(cls_stored, dtype=np.float32)
        cls_vec = _normalize_cls(image_id, cls_stored)
    if attention is not None:
        attention = np.ascontiguousarray(attention, dtype=np.float32)
    ts = TokenSet(
        image_id=image_id,
        tokens=tokens,
        raw_norms=raw_norms,
        attention=attention,
        cls=cls_vec,
        stored_tokens=stored,
        stored_cls=cls_stored,
    )
    try:
        ts.validate()
    except ValidationError as exc:
        raise ValidationError(f"{name}: record {index}: {exc}") from None
    return ts


# --- relevance manifest -------------------------------------------------

ROLE_QUERY = "query"
ROLE_GALLERY = "gallery"


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    role: str
    crater_ids: frozenset[str]
    view: str | None = None
    context: str | None = None


class RelevanceManifest:
    """Image roles plus the co-visible identity sets that define relevance.

    A gallery image g is relevant to query q iff crater_ids(g) intersects
    I(q). Gallery entries carry exactly one identity.
    """

    def __init__(self, entries: Sequence[ManifestEntry]):
        self.entries: dict[str, ManifestEntry] = {}
        for entry in entries:
            if entry.image_id in self.entries:
                raise ValidationError(f"duplicate image_id {entry.image_id!r}")
            self.entries[entry.image_id] = entry
        self.queries = {i: e for i, e in self.entries.items() if e.role == ROLE_QUERY}
        self.gallery = {i: e for i, e in self.entries.items() if e.role == ROLE_GALLERY}
        self._by_crater: dict[str, set[str]] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def _crater_index(self) -> dict[str, set[str]]:
        if self._by_crater is None:
            index: dict[str, set[str]] = {}
            for gid, entry in self.gallery.items():
                for cid in entry.crater_ids:
                    index.setdefault(cid, set()).add(gid)
            self._by_crater = index
        return self._by_crater

    def relevant(self, query_id: str, gallery_id: str) -> bool:
        q = self.queries.get(query_id)
        g = self.gallery.get(gallery_id)
        if q is None:
            raise ValidationError(f"unknown query {query_id!r}")
        if g is None:
            return False
        return bool(q.crater_ids & g.crater_ids)

    def relevant_set(self, query_id: str) -> frozenset[str]:
        """R(q): all gallery images sharing an identity with I(q)."""
        q = self.queries.get(query_id)
        if q is None:
            raise ValidationError(f"unknown query {query_id!r}")
        index = self._crater_index()
        out: set[str] = set()
        for cid in q.crater_ids:
            out |= index.get(cid, set())
        return frozenset(out)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for image_id in self.entries:
                entry = self.entries[image_id]
                obj: dict = {
                    "image_id": entry.image_id,
                    "role": entry.role,
                    "crater_ids": sorted(entry.crater_ids),
                }
                if entry.view is not None:
                    obj["view"] = entry.view
                if entry.context is not None:
                    obj["context"] = entry.context
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_manifest(path: str | Path) -> RelevanceManifest:
    """Parse and validate a JSON-Lines manifest."""
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            entries.append(_parse_manifest_entry(obj, f"{path}: line {lineno}"))
    return RelevanceManifest(entries)


def _parse_manifest_entry(obj: Mapping, where: str) -> ManifestEntry:
    try:
        image_id = obj["image_id"]
        role = obj["role"]
        crater_ids = obj["crater_ids"]
    except KeyError as exc:
        raise ValidationError(f"{where}: missing field {exc}") from None
    if role not in (ROLE_QUERY, ROLE_GALLERY):
        raise ValidationError(f"{where}: unknown role {role!r}")
    if not isinstance(crater_ids, list) or not all(isinstance(c, str) for c in crater_ids):
        raise ValidationError(f"{where}: crater_ids must be a list of strings")
    ids = frozenset(crater_ids)
    if not ids:
        raise ValidationError(f"{where}: {role} {image_id!r} has empty crater_ids")
    if role == ROLE_GALLERY and len(ids) != 1:
        raise ValidationError(
            f"{where}: gallery {image_id!r} must carry exactly one crater id, got {len(ids)}"
        )
    return ManifestEntry(
        image_id=image_id,
        role=role,
        crater_ids=ids,
        view=obj.get("view"),
        context=obj.get("context"),
    )
