"""Corpus translation with placeholder protection and resumable shard jobs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from m3pipe.backends import BATCH_CAP, Translator
from m3pipe.errors import M3Error, TransportError, ValidationError
from m3pipe.records import (
    CheckpointState,
    EvalItem,
    Manifest,
    Record,
    Sample,
    ShardInfo,
    ShardWriter,
    Turn,
    parse_language,
    read_shard,
    sha256_file,
    shard_filename,
)

log = logging.getLogger(__name__)

SENTINEL_PREFIX = "⟦PH"
DEFAULT_PATTERNS = ("<image>", "<Img>", "</Img>", "<ImageHere>", "⟦*⟧")


def sentinel(i: int) -> str:
    return f"⟦PH{i}⟧"


def _pattern_regex(pattern: str) -> str:
    # '*' matches the shortest run of non-newline characters so that two
    # bracketed tokens on one line are masked separately.
    return "[^\n]*?".join(re.escape(part) for part in pattern.split("*"))


@dataclasses.dataclass(frozen=True)
class PlaceholderMap:
    entries: tuple[tuple[str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def originals(self) -> list[str]:
        return [orig for _, orig in self.entries]


def compile_patterns(patterns: Sequence[str]) -> re.Pattern[str] | None:
    pats = [p for p in patterns if p]
    if not pats:
        return None
    # Literals before wildcards, longer before shorter: the alternation then
    # prefers the longest literal at any position.
    pats = sorted(pats, key=lambda p: ("*" in p, -len(p)))
    return re.compile("|".join(f"(?:{_pattern_regex(p)})" for p in pats))


def protect(text: str, patterns: Sequence[str] | re.Pattern[str] | None) -> tuple[str, PlaceholderMap]:
    """Replace every pattern match with a numbered sentinel, left to right."""
    if SENTINEL_PREFIX in text:
        raise ValidationError(f"text already contains the reserved sentinel prefix {SENTINEL_PREFIX!r}")
    regex = patterns if isinstance(patterns, re.Pattern) or patterns is None else compile_patterns(patterns)
    if regex is None:
        return text, PlaceholderMap()
    entries: list[tuple[str, str]] = []

    def sub(m: re.Match[str]) -> str:
        s = sentinel(len(entries))
        entries.append((s, m.group()))
        return s

    masked = regex.sub(sub, text)
    return masked, PlaceholderMap(tuple(entries))


def restore(masked: str, pmap: PlaceholderMap) -> str:
    """Inverse of :func:`protect`; every sentinel must appear exactly once."""
    if not pmap.entries:
        if SENTINEL_PREFIX in masked:
            raise ValidationError("translation introduced a sentinel that was never issued")
        return masked
    pieces = re.split(r"(⟦PH\d+⟧)", masked)
    lookup = dict(pmap.entries)
    seen: set[str] = set()
    out = []
    for piece in pieces:
        if piece in lookup:
            if piece in seen:
                raise ValidationError(f"sentinel {piece} duplicated by the backend")
            seen.add(piece)
            out.append(lookup[piece])
        elif piece.startswith(SENTINEL_PREFIX):
            raise ValidationError(f"unknown sentinel {piece} in backend output")
        else:
            out.append(piece)
    missing = [s for s, _ in pmap.entries if s not in seen]
    if missing:
        raise ValidationError(f"backend dropped placeholder(s) {', '.join(missing)}")
    return "".join(out)


def translate_texts(
    texts: Sequence[str],
    src: str,
    tgt: str,
    backend: Translator,
    patterns: Sequence[str] | re.Pattern[str] | None = DEFAULT_PATTERNS,
) -> list[str]:
    """protect -> translate -> restore for a batch of independent strings."""
    regex = patterns if isinstance(patterns, re.Pattern) or patterns is None else compile_patterns(patterns)
    masked, maps = zip(*(protect(t, regex) for t in texts)) if texts else ((), ())
    out = backend.translate(list(masked), src, tgt)
    if len(out) != len(texts):
        raise TransportError(f"backend returned {len(out)} translations for {len(texts)} texts")
    return [restore(m, pm) for m, pm in zip(out, maps)]


def _texts_of(record: Record) -> list[str]:
    if isinstance(record, Sample):
        return [t.text for t in record.turns]
    if isinstance(record, EvalItem):
        return [record.question, *record.options]
    raise ValidationError(f"cannot translate {type(record).__name__} records")


def _rebuild(record: Record, texts: list[str], src: str, tgt: str) -> Record:
    if isinstance(record, Sample):
        turns = tuple(Turn(t.role, text) for t, text in zip(record.turns, texts))
        meta = dict(record.meta)
        if tgt == "en":
            meta.pop("translated_from", None)
        else:
            meta["translated_from"] = src
        return dataclasses.replace(record, language=tgt, turns=turns, meta=meta)
    assert isinstance(record, EvalItem)
    return dataclasses.replace(record, language=tgt, question=texts[0], options=tuple(texts[1:]))


def translate_record(
    record: Record,
    tgt: str,
    backend: Translator,
    patterns: Sequence[str] | re.Pattern[str] | None = DEFAULT_PATTERNS,
) -> Record:
    """Translate one Sample (turn by turn) or EvalItem (question and options).

    Only text and ``language`` change (plus ``meta["translated_from"]`` on
    samples); ids, image refs, roles and answer indices are carried over.
    Translating back into English drops the ``translated_from`` marker so a
    round trip reproduces the original record.
    """
    src = record.language
    parse_language(tgt)
    texts = translate_texts(_texts_of(record), src, tgt, backend, patterns)
    return _rebuild(record, texts, src, tgt)


def translate_sample(
    sample: Sample,
    tgt: str,
    backend: Translator,
    patterns: Sequence[str] | re.Pattern[str] | None = DEFAULT_PATTERNS,
) -> Sample:
    if sample.language != "en":
        raise ValidationError(f"sample {sample.id}: expected an English source, got {sample.language}")
    return translate_record(sample, tgt, backend, patterns)  # type: ignore[return-value]


@dataclass(frozen=True)
class DeadLetter:
    record: Record
    language: str
    error: str

    def encode(self) -> bytes:
        d = {"id": self.record.id, "language": self.language, "error": self.error, "record": self.record.to_dict()}
        return json.dumps(d, ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"


def translate_batch(
    records: Sequence[Record],
    tgt: str,
    backend: Translator,
    patterns: Sequence[str] | re.Pattern[str] | None = DEFAULT_PATTERNS,
    batch_size: int = BATCH_CAP,
) -> list[Record | DeadLetter]:
    """Translate records with as few backend calls as possible, order preserved.

    Texts of consecutive records are packed into requests of at most
    ``batch_size`` strings. When a packed request fails, its records are
    retried one by one so a single bad record becomes a dead letter instead
    of taking its neighbours down with it.
    """
    regex = patterns if isinstance(patterns, re.Pattern) or patterns is None else compile_patterns(patterns)
    results: list[Record | DeadLetter] = []
    group: list[Record] = []
    n_texts = 0

    def flush() -> None:
        nonlocal group, n_texts
        if not group:
            return
        try:
            src = group[0].language
            if any(r.language != src for r in group):
                raise ValidationError("mixed source languages in one batch")
            flat = [t for r in group for t in _texts_of(r)]
            out = translate_texts(flat, src, tgt, backend, regex)
            pos = 0
            for r in group:
                n = len(_texts_of(r))
                results.append(_rebuild(r, out[pos : pos + n], src, tgt))
                pos += n
        except M3Error:
            for r in group:
                results.append(_translate_one(r, tgt, backend, regex))
        group, n_texts = [], 0

    for r in records:
        try:
            n = len(_texts_of(r))
        except M3Error as exc:
            flush()
            results.append(DeadLetter(r, tgt, str(exc)))
            continue
        if group and n_texts + n > batch_size:
            flush()
        group.append(r)
        n_texts += n
    flush()
    return results


def _translate_one(record: Record, tgt: str, backend: Translator, regex: re.Pattern[str] | None) -> Record | DeadLetter:
    try:
        return translate_record(record, tgt, backend, regex)
    except M3Error as exc:
        log.warning("dead letter %s -> %s: %s", record.id, tgt, exc)
        return DeadLetter(record, tgt, f"{type(exc).__name__}: {exc}")


# --------------------------------------------------------------------------
# jobs


@dataclass(frozen=True)
class TranslationJobConfig:
    source_manifest: Path
    target_languages: tuple[str, ...]
    out_dir: Path
    checkpoint_dir: Path
    backend_url: str = "mock://"
    placeholder_patterns: tuple[str, ...] = DEFAULT_PATTERNS
    parallelism: int = 1
    batch_size: int = BATCH_CAP
    dataset_name: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "source_manifest", Path(self.source_manifest))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "checkpoint_dir", Path(self.checkpoint_dir))
        object.__setattr__(self, "target_languages", tuple(self.target_languages))
        object.__setattr__(self, "placeholder_patterns", tuple(self.placeholder_patterns))
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if not self.target_languages:
            raise ValidationError("no target languages given")
        for lang in self.target_languages:
            parse_language(lang)
        if "en" in self.target_languages:
            raise ValidationError("'en' is the source language and cannot be a target")
        if len(set(self.target_languages)) != len(self.target_languages):
            raise ValidationError("duplicate target languages")

    def config_hash(self, source_digest: str) -> str:
        """Digest of everything that determines output bytes.

        Parallelism and checkpoint location are deliberately excluded: they
        change how the job runs, never what it produces.
        """
        canon = {
            "source_manifest_sha256": source_digest,
            "targets": sorted(self.target_languages),
            "backend_url": self.backend_url,
            "placeholder_patterns": list(self.placeholder_patterns),
            "batch_size": self.batch_size,
            "dataset_name": self.dataset_name,
            "out_dir": str(self.out_dir.resolve()),
        }
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class JobResult:
    manifests: dict[str, Manifest]
    dead_letters: dict[str, int]
    input_count: int
    config_hash: str
    shards_processed: int
    resumed_shards: int = 0
    dead_letter_paths: dict[str, Path] = field(default_factory=dict)


def _part_name(dataset: str, lang: str, index: int) -> str:
    return shard_filename(dataset, lang, index)


def _dead_part_name(dataset: str, lang: str, index: int) -> str:
    return f".{dataset}.{lang}-{index:05d}.deadletter.part"


def _process_shard(
    manifest: Manifest,
    index: int,
    out_name: str,
    cfg: TranslationJobConfig,
    backend: Translator,
    regex: re.Pattern[str] | None,
) -> None:
    """Translate one input shard into every target language.

    All outputs of the shard are committed (renamed into place) only after
    every language succeeded, so a crash leaves either nothing or a complete
    set that the resumed run overwrites with identical bytes.
    """
    info = manifest.shards[index]
    writers: dict[str, ShardWriter] = {}
    dead: dict[str, ShardWriter] = {}
    try:
        for lang in cfg.target_languages:
            writers[lang] = ShardWriter(cfg.out_dir / _part_name(out_name, lang, index))
            dead[lang] = ShardWriter(cfg.out_dir / _dead_part_name(out_name, lang, index))
        chunk: list[Record] = []
        records = read_shard(manifest.shard_path(index), manifest.record_type, info.sha256)
        for record in records:
            if record.language != "en":
                raise ValidationError(f"record {record.id}: source language is {record.language}, expected en")
            chunk.append(record)
            if len(chunk) >= cfg.batch_size:
                _emit(chunk, cfg, backend, regex, writers, dead)
                chunk = []
        if chunk:
            _emit(chunk, cfg, backend, regex, writers, dead)
    except BaseException:
        for w in (*writers.values(), *dead.values()):
            w.abort()
        raise
    for w in (*writers.values(), *dead.values()):
        w.commit()


def _emit(chunk, cfg, backend, regex, writers, dead) -> None:
    for lang in cfg.target_languages:
        for res in translate_batch(chunk, lang, backend, regex, cfg.batch_size):
            if isinstance(res, DeadLetter):
                dead[lang].write_raw(res.encode())
            else:
                writers[lang].write(res)


def run_job(cfg: TranslationJobConfig, backend: Translator) -> JobResult:
    """Translate every shard of the source manifest into each target language.

    Output shard ``i`` of each language holds the translations of input shard
    ``i`` (minus dead letters), so outputs do not depend on worker count or
    on where a previous run was interrupted. The checkpoint is rewritten
    atomically by the coordinating thread after each completed shard.
    """
    source = Manifest.load(cfg.source_manifest)
    if source.record_type not in ("sample", "evalitem"):
        raise ValidationError(f"{cfg.source_manifest}: cannot translate {source.record_type} records")
    if source.language != "en":
        raise ValidationError(f"{cfg.source_manifest}: source language must be en, got {source.language}")
    out_name = cfg.dataset_name or source.dataset_name
    source_digest = sha256_file(cfg.source_manifest)
    config_hash = cfg.config_hash(source_digest)
    job_id = f"translate-{out_name}"
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = cfg.checkpoint_dir / f"{job_id}.checkpoint.json"
    state = CheckpointState.open(ckpt_path, job_id, config_hash)

    n_shards = len(source.shards)
    todo = [i for i in range(n_shards) if i not in state.completed_shards]
    resumed = n_shards - len(todo)
    if todo:
        probe = getattr(backend, "probe", None)
        if probe is not None:
            probe()
        source.validate()
        regex = compile_patterns(cfg.placeholder_patterns)
        log.info("translating %d/%d shards of %s into %s", len(todo), n_shards, source.name, ",".join(cfg.target_languages))
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            pending = {pool.submit(_process_shard, source, i, out_name, cfg, backend, regex): i for i in todo}
            try:
                while pending:
                    done, _ = wait(pending, return_when=FIRST_COMPLETED)
                    failed = None
                    # checkpoint every finished shard before surfacing a failure
                    for fut in sorted(done, key=pending.__getitem__):
                        i = pending.pop(fut)
                        if fut.exception() is not None:
                            failed = failed or fut
                            continue
                        state.completed_shards.add(i)
                        state.save(ckpt_path)
                        log.info("shard %d/%d done", len(state.completed_shards), n_shards)
                    if failed is not None:
                        failed.result()
            except BaseException:
                for fut in pending:
                    fut.cancel()
                raise

    manifests, dead_counts, dead_paths = _finalize(source, out_name, cfg)
    for lang, m in manifests.items():
        if m.total_count + dead_counts[lang] != source.total_count:
            raise ValidationError(f"{lang}: count conservation violated")
    return JobResult(manifests, dead_counts, source.total_count, config_hash, len(todo), resumed, dead_paths)


def _finalize(source: Manifest, out_name: str, cfg: TranslationJobConfig):
    manifests: dict[str, Manifest] = {}
    dead_counts: dict[str, int] = {}
    dead_paths: dict[str, Path] = {}
    for lang in cfg.target_languages:
        m = Manifest(out_name, lang, source.record_type, root=cfg.out_dir)
        for i in range(len(source.shards)):
            name = _part_name(out_name, lang, i)
            p = cfg.out_dir / name
            with p.open("rb") as f:
                count = sum(1 for line in f if line.strip())
            m.shards.append(ShardInfo(name, count, sha256_file(p)))
        m.save()
        manifests[lang] = m
        dead_path = cfg.out_dir / f"{out_name}.{lang}.deadletter"
        n_dead = 0
        with ShardWriter(dead_path) as w:
            for i in range(len(source.shards)):
                part = cfg.out_dir / _dead_part_name(out_name, lang, i)
                with part.open("rb") as f:
                    for line in f:
                        w.write_raw(line)
                        n_dead += 1
        dead_counts[lang] = n_dead
        dead_paths[lang] = dead_path
    return manifests, dead_counts, dead_paths


def translated_copies(records: Iterable[Record], targets: Sequence[str], backend: Translator) -> dict[str, list[Record]]:
    """In-memory convenience: translate a small record list into several languages."""
    records = list(records)
    out: dict[str, list[Record]] = {}
    for lang in targets:
        res = translate_batch(records, lang, backend)
        bad = [r for r in res if isinstance(r, DeadLetter)]
        if bad:
            raise TransportError(f"{len(bad)} record(s) failed to translate into {lang}: {bad[0].error}")
        out[lang] = res  # type: ignore[assignment]
    return out

