"""Image-caption similarity filtering, deduplication and corpus statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from m3pipe.backends import Embedder
from m3pipe.errors import M3Error, ValidationError
from m3pipe.records import (
    Manifest,
    Sample,
    ShardWriter,
    atomic_write_bytes,
    write_manifest,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.0
STUB_MIN_CHARS = 16


class ZeroNormError(ValidationError):
    pass


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v):
        raise ValidationError(f"dimension mismatch: {len(u)} vs {len(v)}")
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(x * x for x in v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine of a zero-norm vector is undefined")
    c = math.fsum(x * y for x, y in zip(u, v)) / (nu * nv)
    return max(-1.0, min(1.0, c))


def caption_text(sample: Sample) -> str:
    """Text scored against the image: all human turns, joined by one space."""
    return " ".join(t.text for t in sample.turns if t.role == "human")


@dataclass(frozen=True)
class SimilarityRecord:
    sample_id: str
    score: float

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "score": self.score}


@dataclass
class FilterStats:
    total: int = 0
    kept: int = 0
    rejected: int = 0
    errored: int = 0
    threshold: float = DEFAULT_THRESHOLD

    @property
    def kept_fraction(self) -> float:
        return self.kept / self.total if self.total else 0.0

    @property
    def filtered_fraction(self) -> float:
        return 1.0 - self.kept_fraction if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "rejected": self.rejected,
            "errored": self.errored,
            "threshold": self.threshold,
            "kept_fraction": self.kept_fraction,
            "filtered_fraction": self.filtered_fraction,
        }


@dataclass
class FilterResult:
    kept: Manifest
    scores: list[SimilarityRecord]
    stats: FilterStats
    errors: list[tuple[str, str]] = field(default_factory=list)
    rejected_ids: list[str] = field(default_factory=list)


def score_batch(samples: Sequence[Sample], embedder: Embedder, min_chars: int = 0) -> list[float | str]:
    """Similarity score per sample, or an error message for unscorable ones."""
    out: list[float | str] = [""] * len(samples)
    ok: list[int] = []
    for i, s in enumerate(samples):
        text = caption_text(s)
        if not s.image_ref:
            out[i] = "sample has no image_ref"
        elif not text:
            out[i] = "sample has no human text turn"
        elif len(text) < min_chars:
            out[i] = f"caption shorter than {min_chars} characters"
        else:
            ok.append(i)
    if not ok:
        return out
    try:
        images = embedder.embed([samples[i].image_ref for i in ok], "image")
        texts = embedder.embed([caption_text(samples[i]) for i in ok], "text")
    except M3Error as exc:
        for i in ok:
            out[i] = f"embedding failed: {exc}"
        return out
    for i, u, v in zip(ok, images, texts):
        try:
            out[i] = cosine(u, v)
        except ValidationError as exc:
            out[i] = str(exc)
    return out


def _batched(it, n: int) -> Iterator[list]:
    batch = []
    for x in it:
        batch.append(x)
        if len(batch) == n:
            yield batch
            batch = []
    if batch:
        yield batch


def filter_dataset(
    manifest: Manifest | str | Path,
    embedder: Embedder,
    threshold: float = DEFAULT_THRESHOLD,
    out_dir: str | Path | None = None,
    *,
    out_name: str | None = None,
    batch_size: int = 64,
    min_chars: int = 0,
    shard_size: int | None = None,
) -> FilterResult:
    """Keep samples whose image-caption cosine is at least ``threshold``.

    Every input sample lands in exactly one of kept / rejected (score below
    the threshold) / errored (unscorable: no image, no caption, zero-norm
    vector, or embedding failure after the backend's own retries). Scores
    and rejects are written next to the kept manifest as
    ``<name>.scores`` and ``<name>.rejects``.

    ``min_chars`` enables an optional stub-caption heuristic (captions shorter
    than this are routed to errored); it is off by default.
    """
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    if manifest.record_type != "sample":
        raise ValidationError(f"{manifest.path}: filtering needs sample records")
    if not -1.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [-1, 1]")
    out_dir = Path(out_dir) if out_dir is not None else manifest.root
    name = out_name or f"{manifest.dataset_name}-filtered"
    stats = FilterStats(threshold=threshold)
    scores: list[SimilarityRecord] = []
    errors: list[tuple[str, str]] = []
    rejected: list[str] = []
    tag = f"{name}.{manifest.language}"

    scores_w = ShardWriter(out_dir / f"{tag}.scores")
    rejects_w = ShardWriter(out_dir / f"{tag}.rejects")

    def kept_stream() -> Iterator[Sample]:
        for batch in _batched(manifest.iter_records(), batch_size):
            for s, sc in zip(batch, score_batch(batch, embedder, min_chars)):
                stats.total += 1
                if isinstance(sc, str):
                    stats.errored += 1
                    errors.append((s.id, sc))
                    rejects_w.write_raw(_line({"id": s.id, "reason": "error", "error": sc}))
                    continue
                rec = SimilarityRecord(s.id, sc)
                scores.append(rec)
                scores_w.write_raw(_line(rec.to_dict()))
                if sc >= threshold:
                    stats.kept += 1
                    yield s
                else:
                    stats.rejected += 1
                    rejected.append(s.id)
                    rejects_w.write_raw(_line({"id": s.id, "reason": "below_threshold", "score": sc}))

    try:
        kept = write_manifest(
            kept_stream(), out_dir, name, manifest.language,
            shard_size=shard_size or max((s.count for s in manifest.shards), default=1) or 1,
            record_type="sample",
        )
    except BaseException:
        scores_w.abort()
        rejects_w.abort()
        raise
    scores_w.commit()
    rejects_w.commit()
    atomic_write_bytes(out_dir / f"{tag}.filter-stats.json", (json.dumps(stats.to_dict(), indent=2) + "\n").encode())
    log.info("kept %d/%d (%.1f%% filtered)", stats.kept, stats.total, 100 * stats.filtered_fraction)
    return FilterResult(kept, scores, stats, errors, rejected)


def _line(d: dict) -> bytes:
    return json.dumps(d, ensure_ascii=False, separators=(",", ":")).encode("utf-8") + b"\n"


def content_key(sample: Sample) -> bytes:
    payload = json.dumps([sample.image_ref, [t.text for t in sample.turns]], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).digest()


def dedup(
    manifest: Manifest | str | Path,
    out_dir: str | Path | None = None,
    out_name: str | None = None,
) -> Manifest:
    """Drop samples whose (image_ref, turn texts) repeat an earlier sample."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    if manifest.record_type != "sample":
        raise ValidationError(f"{manifest.path}: dedup needs sample records")
    seen: set[bytes] = set()

    def unique() -> Iterator[Sample]:
        for s in manifest.iter_records():
            k = content_key(s)
            if k not in seen:
                seen.add(k)
                yield s

    return write_manifest(
        unique(),
        Path(out_dir) if out_dir is not None else manifest.root,
        out_name or f"{manifest.dataset_name}-dedup",
        manifest.language,
        shard_size=max((s.count for s in manifest.shards), default=1) or 1,
        record_type="sample",
    )


def corpus_stats(manifest: Manifest | str | Path) -> dict:
    """Counts useful for eyeballing a corpus before and after curation."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    n = with_image = turns = chars = 0
    for s in manifest.iter_records():
        n += 1
        with_image += bool(getattr(s, "image_ref", None))
        ts = getattr(s, "turns", ())
        turns += len(ts)
        chars += sum(len(t.text) for t in ts)
    return {
        "records": n,
        "with_image": with_image,
        "mean_turns": turns / n if n else 0.0,
        "mean_chars": chars / n if n else 0.0,
    }
