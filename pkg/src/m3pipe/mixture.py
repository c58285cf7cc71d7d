"""Seeded, reproducible training mixtures and the seven stage presets.

Selection algorithm (fixed so other implementations can reproduce it):

1. Each component's records are indexed and sorted by
   ``(dataset_name, language, id)``.
2. One splitmix64 stream is seeded with the mixture seed. Components are
   visited in spec order; ``count``/``ratio`` components draw ``k`` indices
   with a partial forward Fisher-Yates (``for i in 0..k-1: j = i +
   below(n - i); swap(a[i], a[j])``, keep ``a[:k]``). ``all`` components
   take every index in sorted order and draw nothing.
3. The concatenated selection is shuffled once with a full backward
   Fisher-Yates (``for i in n-1..1: j = below(i + 1); swap``) from the same
   stream.

``below(m)`` is unbiased: draw 64-bit outputs until one is below
``2**64 - (2**64 % m)``, then reduce modulo ``m``.
"""

from __future__ import annotations

import json
import logging
import mmap
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterator, Sequence

from m3pipe.backends import MASK64, splitmix64_next
from m3pipe.errors import ValidationError
from m3pipe.records import (
    LANGUAGES,
    MULTILINGUAL,
    Manifest,
    Sample,
    TextPair,
    Turn,
    atomic_write_bytes,
    check_dataset_name,
    decode_record,
    read_shard,
    write_manifest,
)

log = logging.getLogger(__name__)


class SplitMix64:
    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        self.state = seed

    def next(self) -> int:
        self.state, z = splitmix64_next(self.state)
        return z

    def below(self, m: int) -> int:
        if m < 1:
            raise ValueError("m must be >= 1")
        limit = (1 << 64) - ((1 << 64) % m)
        while True:
            r = self.next()
            if r < limit:
                return r % m


def partial_fisher_yates(n: int, k: int, rng: SplitMix64) -> list[int]:
    """``k`` distinct indices from ``range(n)`` in draw order."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    a = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        a[i], a[j] = a[j], a[i]
    return a[:k]


def shuffle(items: list, rng: SplitMix64) -> None:
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Component:
    """One mixture ingredient.

    ``ref`` is a dataset name (every ``<ref>.<lang>.manifest`` in the data
    directory, languages in canonical order) or a single ``<dataset>.<lang>``.
    """

    ref: str
    mode: str = "all"
    n: int | None = None
    p: float | None = None

    def __post_init__(self) -> None:
        if self.mode == "all":
            if self.n is not None or self.p is not None:
                raise ValidationError(f"{self.ref}: mode=all takes no n or p")
        elif self.mode == "count":
            if self.n is None or self.n < 0:
                raise ValidationError(f"{self.ref}: mode=count needs n >= 0")
        elif self.mode == "ratio":
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise ValidationError(f"{self.ref}: mode=ratio needs p in (0, 1]")
        else:
            raise ValidationError(f"{self.ref}: unknown mode {self.mode!r}")

    def selection_size(self, available: int) -> int:
        if self.mode == "all":
            return available
        if self.mode == "count":
            assert self.n is not None
            if self.n > available:
                raise ValidationError(f"component {self.ref}: count({self.n}) exceeds its {available} records")
            return self.n
        # floor(p * n) computed on the decimal literal so 0.29 * 100 == 29
        return int(Decimal(repr(self.p)) * available)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"ref": self.ref, "mode": self.mode}
        if self.n is not None:
            d["n"] = self.n
        if self.p is not None:
            d["p"] = self.p
        return d


@dataclass(frozen=True)
class MixtureSpec:
    name: str
    components: tuple[Component, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        check_dataset_name(self.name)
        object.__setattr__(self, "components", tuple(self.components))
        if not 0 <= self.seed <= MASK64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        refs = [c.ref for c in self.components]
        if len(set(refs)) != len(refs):
            raise ValidationError(f"mixture {self.name}: duplicate component refs")

    def with_seed(self, seed: int) -> MixtureSpec:
        return MixtureSpec(self.name, self.components, seed)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "seed": self.seed, "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MixtureSpec:
        unknown = set(d) - {"name", "seed", "components"}
        if unknown:
            raise ValidationError(f"unknown mixture spec keys: {sorted(unknown)}")
        comps = tuple(Component(c["ref"], c.get("mode", "all"), c.get("n"), c.get("p")) for c in d["components"])
        return cls(d["name"], comps, int(d.get("seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> MixtureSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class StagePreset:
    name: str
    stage2: MixtureSpec
    stage3: MixtureSpec | None = None


BASE_DATASETS = ("ccSBU", "LAION", "LAVAM", "PALO")

# (stage-2 additions, stage-3 components) per ablation row, in row order
_ABLATION_ROWS: tuple[tuple[tuple[str, ...], tuple[str, ...] | None], ...] = (
    ((), None),
    (("CI",), None),
    (("CI-M",), None),
    (("CI",), ("CI-M", "CT-M", "MText")),
    (("CI-M",), ("CI-M", "CT-M", "MText")),
    (("CI",), ("CI", "CT")),
    (("CI",), ("CI", "CT", "MText")),
)


def stage_presets(seed: int = 0) -> list[StagePreset]:
    """The seven stage-2 / stage-3 data combinations, every component mode=all.

    Dataset refs: ``CI``/``CT`` are the English Cambrian image/text sets,
    ``CI-M``/``CT-M`` their translations, ``MText`` the combined parallel
    text corpus.
    """
    presets = []
    for row, (extra2, s3) in enumerate(_ABLATION_ROWS, start=1):
        name = f"table2-row{row}"
        stage2 = MixtureSpec(f"{name}-stage2", tuple(Component(r) for r in (*BASE_DATASETS, *extra2)), seed)
        stage3 = MixtureSpec(f"{name}-stage3", tuple(Component(r) for r in s3), seed) if s3 else None
        presets.append(StagePreset(name, stage2, stage3))
    return presets


def get_preset(name: str, seed: int = 0) -> StagePreset:
    for p in stage_presets(seed):
        if p.name == name:
            return p
    raise ValidationError(f"unknown preset {name!r}; choose table2-row1 .. table2-row7")


# --------------------------------------------------------------------------
# resolution and materialization


def resolve(ref: str, data_dir: str | Path) -> list[Manifest]:
    data_dir = Path(data_dir)
    direct = data_dir / f"{ref}.manifest"
    if "." in ref:
        if not direct.exists():
            raise ValidationError(f"component {ref}: no manifest {direct}")
        return [Manifest.load(direct)]
    found = {p.name[len(ref) + 1 : -len(".manifest")]: p for p in data_dir.glob(f"{ref}.*.manifest")}
    order = [*LANGUAGES, MULTILINGUAL]
    langs = sorted((lang for lang in found if lang in order), key=order.index)
    if not langs:
        raise ValidationError(f"component {ref}: no manifests named {ref}.<lang>.manifest in {data_dir}")
    return [Manifest.load(found[lang]) for lang in langs]


@dataclass(frozen=True)
class _Loc:
    key: tuple[str, str, str]
    manifest: int
    shard: int
    offset: int


def _index(manifests: Sequence[Manifest], base: int) -> list[_Loc]:
    """Byte-offset index of every record, sorted by (dataset, language, id)."""
    locs: list[_Loc] = []
    for mi, m in enumerate(manifests):
        for si, info in enumerate(m.shards):
            offset = 0
            # reading through read_shard first validates the checksum
            records = read_shard(m.shard_path(si), m.record_type, info.sha256)
            with open(m.shard_path(si), "rb") as f:
                for line in f:
                    if line.strip():
                        rec = next(records)
                        locs.append(_Loc((m.dataset_name, m.language, rec.id), base + mi, si, offset))
                    offset += len(line)
    locs.sort(key=lambda loc: loc.key)
    for a, b in zip(locs, locs[1:]):
        if a.key == b.key:
            raise ValidationError(f"duplicate record id {a.key[2]!r} in {a.key[0]}.{a.key[1]}")
    return locs


def textpair_to_sample(pair: TextPair) -> Sample:
    """Parallel text as a two-turn, image-free conversation in ``lang_b``."""
    return Sample(
        id=pair.id,
        language=pair.lang_b,
        turns=(Turn("human", pair.text_a), Turn("assistant", pair.text_b)),
        image_ref=None,
        source_dataset=pair.source,
        meta={"lang_a": pair.lang_a},
    )


@dataclass
class CompositionReport:
    name: str
    seed: int
    components: list[dict[str, Any]] = field(default_factory=list)
    total: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "seed": self.seed, "components": self.components, "total": self.total}


class _Reader:
    """Random access into shards through cached memory maps."""

    def __init__(self, manifests: Sequence[Manifest]):
        self.manifests = manifests
        self._maps: dict[tuple[int, int], mmap.mmap] = {}
        self._files: list = []

    def get(self, loc: _Loc) -> Sample:
        key = (loc.manifest, loc.shard)
        mm = self._maps.get(key)
        if mm is None:
            m = self.manifests[loc.manifest]
            f = open(m.shard_path(loc.shard), "rb")
            self._files.append(f)
            mm = self._maps[key] = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
        end = mm.find(b"\n", loc.offset)
        line = mm[loc.offset : end if end >= 0 else len(mm)]
        rec = decode_record(line, self.manifests[loc.manifest].record_type)
        if isinstance(rec, TextPair):
            rec = textpair_to_sample(rec)
        if not isinstance(rec, Sample):
            raise ValidationError(f"{self.manifests[loc.manifest].name}: {type(rec).__name__} cannot join a mixture")
        return rec

    def close(self) -> None:
        for mm in self._maps.values():
            mm.close()
        for f in self._files:
            f.close()


def select(spec: MixtureSpec, data_dir: str | Path) -> tuple[list[Manifest], list[_Loc], CompositionReport]:
    """Resolve components and compute the final, shuffled record order."""
    manifests: list[Manifest] = []
    chosen: list[_Loc] = []
    report = CompositionReport(spec.name, spec.seed)
    rng = SplitMix64(spec.seed)
    for comp in spec.components:
        ms = resolve(comp.ref, data_dir)
        for m in ms:
            if m.record_type not in ("sample", "textpair"):
                raise ValidationError(f"component {comp.ref}: {m.record_type} records cannot join a mixture")
        locs = _index(ms, len(manifests))
        manifests.extend(ms)
        k = comp.selection_size(len(locs))
        if comp.mode == "all":
            picked = locs
        else:
            picked = [locs[i] for i in partial_fisher_yates(len(locs), k, rng)]
        chosen.extend(picked)
        report.components.append(
            {**comp.to_dict(), "manifests": [m.name for m in ms], "available": len(locs), "selected": k}
        )
    shuffle(chosen, rng)
    report.total = len(chosen)
    return manifests, chosen, report


def build_mixture(
    spec: MixtureSpec,
    data_dir: str | Path,
    out_dir: str | Path,
    *,
    shard_size: int = 10_000,
    virtual: bool = False,
) -> tuple[Manifest | None, CompositionReport]:
    """Materialize ``spec`` into ``<name>.mul.manifest`` under ``out_dir``.

    Output records get ids ``<dataset>.<lang>/<original id>`` so translated
    copies sharing an id stay distinct; ``meta`` records the source manifest
    and original id. With ``virtual=True`` only an index list
    ``<name>.index.jsonl`` is written and no manifest is returned.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests, chosen, report = select(spec, data_dir)
    atomic_write_bytes(
        out_dir / f"{spec.name}.composition.json",
        (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8"),
    )
    if virtual:
        lines = [
            json.dumps({"manifest": manifests[loc.manifest].filename, "id": loc.key[2]}) + "\n" for loc in chosen
        ]
        atomic_write_bytes(out_dir / f"{spec.name}.index.jsonl", "".join(lines).encode("utf-8"))
        return None, report

    reader = _Reader(manifests)

    def stream() -> Iterator[Sample]:
        for loc in chosen:
            s = reader.get(loc)
            src = manifests[loc.manifest].name
            meta = {**s.meta, "source_manifest": src, "source_id": s.id}
            yield Sample(f"{src}/{s.id}", s.language, s.turns, s.image_ref, s.source_dataset, meta)

    try:
        manifest = write_manifest(stream(), out_dir, spec.name, MULTILINGUAL, shard_size, record_type="sample")
    finally:
        reader.close()
    log.info("mixture %s: %d records", spec.name, report.total)
    return manifest, report


def build_mtext(
    flores: Manifest | str | Path,
    xstorycloze: Manifest | str | Path,
    out_dir: str | Path,
    shard_size: int = 10_000,
) -> Manifest:
    """Concatenate the two parallel-text corpora into ``MText.mul``, first id wins."""
    ms = [m if isinstance(m, Manifest) else Manifest.load(m) for m in (flores, xstorycloze)]
    for m in ms:
        if m.record_type != "textpair":
            raise ValidationError(f"{m.path}: expected textpair records, got {m.record_type}")
    seen: set[str] = set()

    def stream() -> Iterator[TextPair]:
        for m in ms:
            for rec in m.iter_records():
                if rec.id not in seen:
                    seen.add(rec.id)
                    yield rec  # type: ignore[misc]

    return write_manifest(stream(), out_dir, "MText", MULTILINGUAL, shard_size, record_type="textpair")
