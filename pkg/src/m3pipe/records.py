"""Domain records, sharded newline-delimited storage, manifests and checkpoints.

Every dataset on disk is a set of shard files (one JSON object per line,
UTF-8) plus a manifest ``<dataset>.<lang>.manifest`` listing the shards with
their record counts and SHA-256 checksums. Shard paths are stored relative to
the manifest so a dataset directory can be moved as a unit.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from m3pipe.errors import CheckpointMismatch, IntegrityError, RecordError, ValidationError

LANGUAGES = ("en", "zh", "hi", "es", "fr", "ar", "bn", "ru", "ur", "ja", "ko")
TARGET_LANGUAGES = LANGUAGES[1:]
# Manifest-level tag for corpora mixing several languages (MText, mixtures).
MULTILINGUAL = "mul"

ROLES = ("human", "assistant", "system")
TEXTPAIR_SOURCES = ("flores", "xstorycloze")

SCHEMA_VERSION = 1
DEFAULT_SHARD_SIZE = 10_000

_DATASET_NAME = re.compile(r"^[A-Za-z0-9_\-]+$")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def parse_language(code: str) -> str:
    if code not in LANGUAGES:
        raise ValidationError(f"invalid language tag {code!r}; expected one of {', '.join(LANGUAGES)}")
    return code


def parse_languages(spec: str | Iterable[str]) -> tuple[str, ...]:
    """Parse ``"zh,hi"`` / ``"all"`` / an iterable of tags into a de-duplicated tuple."""
    if isinstance(spec, str):
        if spec.strip() == "all":
            return TARGET_LANGUAGES
        items = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        items = list(spec)
    out: list[str] = []
    for code in items:
        parse_language(code)
        if code not in out:
            out.append(code)
    return tuple(out)


def check_dataset_name(name: str) -> str:
    if not _DATASET_NAME.match(name):
        raise ValidationError(f"invalid dataset name {name!r}: use letters, digits, '_' or '-'")
    return name


@dataclass(frozen=True)
class Turn:
    role: str
    text: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"invalid turn role {self.role!r}")
        if not isinstance(self.text, str):
            raise ValidationError("turn text must be a string")
        if not self.text and self.role != "system":
            raise ValidationError(f"empty text is only allowed for system turns (role={self.role})")


@dataclass(frozen=True)
class Sample:
    id: str
    language: str
    turns: tuple[Turn, ...]
    image_ref: str | None = None
    source_dataset: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("sample id must be a non-empty string")
        parse_language(self.language)
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValidationError(f"sample {self.id}: turns must be non-empty")
        for k, v in self.meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError(f"sample {self.id}: meta must map strings to strings")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "language": self.language,
            "image_ref": self.image_ref,
            "turns": [{"role": t.role, "text": t.text} for t in self.turns],
            "source_dataset": self.source_dataset,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Sample:
        return cls(
            id=d["id"],
            language=d["language"],
            image_ref=d.get("image_ref"),
            turns=tuple(Turn(t["role"], t["text"]) for t in d["turns"]),
            source_dataset=d.get("source_dataset", ""),
            meta=dict(d.get("meta") or {}),
        )


@dataclass(frozen=True)
class TextPair:
    id: str
    lang_a: str
    lang_b: str
    text_a: str
    text_b: str
    source: str

    def __post_init__(self) -> None:
        parse_language(self.lang_a)
        parse_language(self.lang_b)
        if self.lang_a == self.lang_b:
            raise ValidationError(f"text pair {self.id}: lang_a and lang_b must differ")
        if not self.text_a or not self.text_b:
            raise ValidationError(f"text pair {self.id}: both texts must be non-empty")
        if self.source not in TEXTPAIR_SOURCES:
            raise ValidationError(f"text pair {self.id}: unknown source {self.source!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "lang_a": self.lang_a,
            "lang_b": self.lang_b,
            "text_a": self.text_a,
            "text_b": self.text_b,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TextPair:
        return cls(d["id"], d["lang_a"], d["lang_b"], d["text_a"], d["text_b"], d["source"])


@dataclass(frozen=True)
class EvalItem:
    """One multiple-choice benchmark question."""

    id: str
    subject: str
    question: str
    options: tuple[str, ...]
    answer_index: int
    language: str
    image_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        parse_language(self.language)
        object.__setattr__(self, "options", tuple(self.options))
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if not 2 <= len(self.options) <= 26:
            raise ValidationError(f"item {self.id}: expected 2..26 options, got {len(self.options)}")
        if not 0 <= self.answer_index < len(self.options):
            raise ValidationError(f"item {self.id}: answer_index {self.answer_index} out of range")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "subject": self.subject,
            "question": self.question,
            "options": list(self.options),
            "answer_index": self.answer_index,
            "image_refs": list(self.image_refs),
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EvalItem:
        return cls(
            id=d["id"],
            subject=d.get("subject", ""),
            question=d["question"],
            options=tuple(d["options"]),
            answer_index=int(d["answer_index"]),
            language=d["language"],
            image_refs=tuple(d.get("image_refs") or ()),
        )


Record = Union[Sample, TextPair, EvalItem]

RECORD_TYPES: dict[str, type] = {"sample": Sample, "textpair": TextPair, "evalitem": EvalItem}


def record_type_of(record: Record) -> str:
    for name, cls in RECORD_TYPES.items():
        if isinstance(record, cls):
            return name
    raise ValidationError(f"not a record: {type(record).__name__}")


def encode_record(record: Record) -> bytes:
    return json.dumps(record.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_record(line: bytes | str, record_type: str = "sample") -> Record:
    cls = RECORD_TYPES[record_type]
    d = json.loads(line)
    if not isinstance(d, dict):
        raise ValueError("record is not an object")
    return cls.from_dict(d)


def sha256_file(path: str | os.PathLike, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while chunk := f.read(chunk_size):
            h.update(chunk)
    return h.hexdigest()


def read_shard(
    path: str | os.PathLike,
    record_type: str = "sample",
    expected_sha256: str | None = None,
) -> Iterator[Record]:
    """Stream records from one shard in file order.

    With ``expected_sha256`` the file is hashed in a first streaming pass and
    :class:`IntegrityError` is raised before any record is yielded.
    """
    path = Path(path)
    if expected_sha256 is not None:
        actual = sha256_file(path)
        if actual != expected_sha256:
            raise IntegrityError(f"{path}: checksum mismatch (expected {expected_sha256}, got {actual})")
    with open(path, "rb") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield decode_record(line, record_type)
            except (ValueError, KeyError, TypeError) as exc:
                raise RecordError(f"malformed record: {exc}", path=str(path), line=lineno) from exc
            except ValidationError as exc:
                raise RecordError(str(exc), path=str(path), line=lineno) from exc


@dataclass(frozen=True)
class ShardInfo:
    path: str
    count: int
    sha256: str


@dataclass
class Manifest:
    dataset_name: str
    language: str
    record_type: str = "sample"
    shards: list[ShardInfo] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    # Directory the shard paths are relative to; not serialized.
    root: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def total_count(self) -> int:
        return sum(s.count for s in self.shards)

    @property
    def name(self) -> str:
        return f"{self.dataset_name}.{self.language}"

    @property
    def filename(self) -> str:
        return manifest_filename(self.dataset_name, self.language)

    @property
    def path(self) -> Path:
        return self.root / self.filename

    def shard_path(self, index: int) -> Path:
        return self.root / self.shards[index].path

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset_name": self.dataset_name,
            "language": self.language,
            "record_type": self.record_type,
            "schema_version": self.schema_version,
            "shards": [{"path": s.path, "count": s.count, "sha256": s.sha256} for s in self.shards],
            "total_count": self.total_count,
        }

    def save(self, root: str | os.PathLike | None = None) -> Path:
        if root is not None:
            self.root = Path(root)
        data = json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        atomic_write_bytes(self.path, data.encode("utf-8"))
        return self.path

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: manifest is not valid JSON: {exc}") from exc
        try:
            shards = [ShardInfo(s["path"], int(s["count"]), s["sha256"]) for s in d["shards"]]
            m = cls(
                dataset_name=d["dataset_name"],
                language=d["language"],
                record_type=d.get("record_type", "sample"),
                shards=shards,
                schema_version=int(d["schema_version"]),
                root=path.parent,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: malformed manifest: {exc}") from exc
        if m.record_type not in RECORD_TYPES:
            raise ValidationError(f"{path}: unknown record_type {m.record_type!r}")
        if m.schema_version != SCHEMA_VERSION:
            raise ValidationError(f"{path}: unsupported schema_version {m.schema_version}")
        if int(d.get("total_count", m.total_count)) != m.total_count:
            raise IntegrityError(f"{path}: total_count {d['total_count']} != sum of shard counts {m.total_count}")
        for s in m.shards:
            if not _HEX64.match(s.sha256):
                raise ValidationError(f"{path}: shard {s.path} has a malformed checksum")
            if Path(s.path).is_absolute():
                raise ValidationError(f"{path}: shard path {s.path} must be relative")
        return m

    def iter_records(self, verify: bool = True) -> Iterator[Record]:
        for i, s in enumerate(self.shards):
            yield from read_shard(self.shard_path(i), self.record_type, s.sha256 if verify else None)

    def validate(self) -> None:
        """Check every shard's checksum and record count, streaming."""
        for i, s in enumerate(self.shards):
            p = self.shard_path(i)
            if not p.exists():
                raise IntegrityError(f"{self.path}: missing shard {s.path}")
            n = sum(1 for _ in read_shard(p, self.record_type, s.sha256))
            if n != s.count:
                raise IntegrityError(f"{s.path}: manifest says {s.count} records, shard holds {n}")


def manifest_filename(dataset_name: str, language: str) -> str:
    return f"{dataset_name}.{language}.manifest"


def shard_filename(dataset_name: str, language: str, index: int) -> str:
    return f"{dataset_name}.{language}-{index:05d}.jsonl"


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


class ShardWriter:
    """Write one shard atomically while hashing it; use as a context manager.

    The shard only appears under its final name if the block exits cleanly.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.count = 0
        self._hash = hashlib.sha256()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.", suffix=".tmp")
        self._f = os.fdopen(fd, "wb")

    def write(self, record: Record) -> None:
        data = encode_record(record)
        self._f.write(data)
        self._hash.update(data)
        self.count += 1

    def write_raw(self, data: bytes) -> None:
        """Append one pre-encoded, newline-terminated line (not counted as a record)."""
        self._f.write(data)
        self._hash.update(data)

    @property
    def sha256(self) -> str:
        return self._hash.hexdigest()

    def commit(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())
        self._f.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        with contextlib.suppress(OSError):
            self._f.close()
        with contextlib.suppress(OSError):
            os.unlink(self._tmp)

    def __enter__(self) -> ShardWriter:
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.commit()
        else:
            self.abort()


def write_shard(path: str | os.PathLike, records: Iterable[Record]) -> tuple[int, str]:
    with ShardWriter(path) as w:
        for r in records:
            w.write(r)
    return w.count, w.sha256


def write_manifest(
    records: Iterable[Record],
    out_dir: str | os.PathLike,
    dataset_name: str,
    language: str,
    shard_size: int = DEFAULT_SHARD_SIZE,
    record_type: str | None = None,
) -> Manifest:
    """Stream ``records`` into shards of ``shard_size`` and write the manifest.

    Only one shard is held open at a time. If anything fails, every shard
    written so far is removed and no manifest is left behind.
    """
    if shard_size < 1:
        raise ValidationError("shard_size must be >= 1")
    check_dataset_name(dataset_name)
    if language != MULTILINGUAL:
        parse_language(language)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(dataset_name, language, record_type or "sample", root=out_dir)
    written: list[Path] = []
    writer: ShardWriter | None = None
    try:
        for record in records:
            rtype = record_type_of(record)
            if record_type is None and not written and writer is None:
                manifest.record_type = record_type = rtype
            elif rtype != manifest.record_type:
                raise ValidationError(f"mixed record types in one manifest: {rtype} vs {manifest.record_type}")
            if writer is None:
                name = shard_filename(dataset_name, language, len(manifest.shards))
                writer = ShardWriter(out_dir / name)
            writer.write(record)
            if writer.count == shard_size:
                writer.commit()
                written.append(writer.path)
                manifest.shards.append(ShardInfo(writer.path.name, writer.count, writer.sha256))
                writer = None
        if writer is not None:
            writer.commit()
            written.append(writer.path)
            manifest.shards.append(ShardInfo(writer.path.name, writer.count, writer.sha256))
            writer = None
        manifest.save()
    except BaseException:
        if writer is not None:
            writer.abort()
        for p in written:
            with contextlib.suppress(OSError):
                p.unlink()
        raise
    return manifest


def load_records(path: str | os.PathLike) -> list[Record]:
    """Read every record of a manifest into memory (small datasets and tests)."""
    return list(Manifest.load(path).iter_records())


@dataclass
class CheckpointState:
    job_id: str
    config_hash: str
    completed_shards: set[int] = field(default_factory=set)
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        if not _HEX64.match(self.config_hash):
            raise ValidationError("config_hash must be a 64-hex-digit digest")

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "config_hash": self.config_hash,
            "completed_shards": sorted(self.completed_shards),
            "timestamp": self.timestamp,
        }

    def save(self, path: str | os.PathLike) -> None:
        self.timestamp = time.time()
        atomic_write_bytes(path, (json.dumps(self.to_dict(), indent=2) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> CheckpointState:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["job_id"], d["config_hash"], set(d["completed_shards"]), float(d.get("timestamp", 0.0)))

    @classmethod
    def open(cls, path: str | os.PathLike, job_id: str, config_hash: str) -> CheckpointState:
        """Load an existing checkpoint for this job or start a fresh one."""
        path = Path(path)
        if not path.exists():
            return cls(job_id, config_hash)
        state = cls.load(path)
        if state.config_hash != config_hash:
            raise CheckpointMismatch(
                f"{path}: checkpoint belongs to a different configuration "
                f"({state.config_hash[:12]} != {config_hash[:12]}); refusing to resume"
            )
        return state
