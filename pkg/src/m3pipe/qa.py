"""Back-translation quality checks and chrF.

The round-trip protocol evaluates a model on the original English benchmark
and on a copy translated into a target language and back. If translation
lost information, accuracy on the back-translated copy drops; a per-language
drop larger than ``flag_threshold`` percentage points flags that language.
chrF between original and round-tripped text is reported alongside as a
model-free signal.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from m3pipe.backends import Translator
from m3pipe.errors import TransportError, ValidationError
from m3pipe.evaluation import EvalResult
from m3pipe.records import Record
from m3pipe.translate import DEFAULT_PATTERNS, DeadLetter, translate_batch

DEFAULT_FLAG_THRESHOLD = 2.0
CHRF_ORDER = 6
CHRF_BETA = 2.0

_WS = re.compile(r"\s+")


def round_trip(
    records: Iterable[Record],
    tgt: str,
    backend: Translator,
    patterns: Sequence[str] = DEFAULT_PATTERNS,
) -> list[Record]:
    """Translate English records into ``tgt`` and back into English."""
    records = list(records)
    for r in records:
        if r.language != "en":
            raise ValidationError(f"record {r.id}: round trip starts from en, got {r.language}")
    forward = _strict(translate_batch(records, tgt, backend, patterns), tgt)
    return _strict(translate_batch(forward, "en", backend, patterns), "en")


def _strict(results: list[Record | DeadLetter], lang: str) -> list[Record]:
    bad = [r for r in results if isinstance(r, DeadLetter)]
    if bad:
        first = bad[0]
        raise TransportError(f"{len(bad)} record(s) failed translation into {lang}; first {first.record.id}: {first.error}")
    return results  # type: ignore[return-value]


def _char_ngrams(chars: str, n: int) -> Counter[str]:
    return Counter(chars[i : i + n] for i in range(len(chars) - n + 1))


def chrf(reference: str, hypothesis: str, order: int = CHRF_ORDER, beta: float = CHRF_BETA) -> float:
    """Sentence-level chrF in [0, 1].

    Whitespace is removed before n-gram extraction. Precision and recall are
    averaged over the orders ``1..order`` for which both strings have at
    least one n-gram, then combined as F-beta. Two empty strings score 1.0;
    one empty string scores 0.0.
    """
    ref = _WS.sub("", reference)
    hyp = _WS.sub("", hypothesis)
    if not ref or not hyp:
        return 1.0 if ref == hyp else 0.0
    precisions, recalls = [], []
    for n in range(1, order + 1):
        r, h = _char_ngrams(ref, n), _char_ngrams(hyp, n)
        n_ref, n_hyp = sum(r.values()), sum(h.values())
        if n_ref == 0 or n_hyp == 0:
            break
        match = sum((r & h).values())
        precisions.append(match / n_hyp)
        recalls.append(match / n_ref)
    p = sum(precisions) / len(precisions)
    rec = sum(recalls) / len(recalls)
    if p == 0.0 and rec == 0.0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * rec / (b2 * p + rec)


def record_text(record: Record) -> str:
    d = record.to_dict()
    if "turns" in d:
        return "\n".join(t["text"] for t in d["turns"])
    if "options" in d:
        return "\n".join([d["question"], *d["options"]])
    return f"{d['text_a']}\n{d['text_b']}"


def corpus_chrf(originals: Sequence[Record], round_tripped: Sequence[Record]) -> float:
    """Mean sentence-level chrF between paired records (matched by id)."""
    if not originals:
        return 1.0
    by_id = {r.id: r for r in round_tripped}
    missing = [r.id for r in originals if r.id not in by_id]
    if missing:
        raise ValidationError(f"round-tripped set is missing ids: {', '.join(missing[:10])}")
    return sum(chrf(record_text(r), record_text(by_id[r.id])) for r in originals) / len(originals)


def _quantize(x: float) -> float:
    # Percent values arrive with two decimals; rounding the difference keeps
    # 34.61 - 34.45 equal to the literal 0.16 instead of 0.16000000000000369.
    return round(x, 9)


@dataclass(frozen=True)
class QaRow:
    label: str
    accuracy_original: float
    accuracy_backtranslated: float
    chrf_roundtrip: float | None = None

    @property
    def delta(self) -> float:
        return _quantize(self.accuracy_original - self.accuracy_backtranslated)

    def verdict(self, flag_threshold: float) -> str:
        return "flagged" if abs(self.delta) > flag_threshold else "consistent"


@dataclass
class QaReport:
    rows: list[QaRow]
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD
    notes: list[str] = field(default_factory=list)

    @property
    def verdicts(self) -> dict[str, str]:
        return {r.label: r.verdict(self.flag_threshold) for r in self.rows}

    @property
    def average(self) -> QaRow:
        """Unweighted mean over rows, mirroring a single averaged table line."""
        n = len(self.rows)
        chrfs = [r.chrf_roundtrip for r in self.rows if r.chrf_roundtrip is not None]
        return QaRow(
            "average",
            sum(r.accuracy_original for r in self.rows) / n,
            sum(r.accuracy_backtranslated for r in self.rows) / n,
            sum(chrfs) / len(chrfs) if chrfs else None,
        )

    def render(self) -> str:
        lines = [
            f"Back-translation validation (flag threshold {self.flag_threshold:.2f} pp)",
            "",
            "| Language | E-MMMU | BT-MMMU | Delta (pp) | chrF round-trip* | Verdict |",
            "|---|---:|---:|---:|---:|---|",
        ]
        rows = list(self.rows)
        if len(rows) > 1:
            rows.append(self.average)
        for r in rows:
            c = "n/a" if r.chrf_roundtrip is None else f"{r.chrf_roundtrip:.4f}"
            lines.append(
                f"| {r.label} | {r.accuracy_original:.2f} | {r.accuracy_backtranslated:.2f} | "
                f"{r.delta:+.2f} | {c} | {r.verdict(self.flag_threshold)} |"
            )
        lines += ["", "*chrF is a supplementary, model-free signal; verdicts use accuracy deltas only."]
        lines += self.notes
        return "\n".join(lines) + "\n"


def build_report(
    original: EvalResult,
    backtranslated: Mapping[str, EvalResult],
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
    chrf_scores: Mapping[str, float] | None = None,
) -> QaReport:
    """Compare English accuracy against accuracy after each language's round trip.

    ``backtranslated`` maps the pivot language to the result of evaluating
    the back-translated copy. Accuracies are recomputed from the per-item
    logs; every result must cover exactly the original item set.
    """
    if flag_threshold < 0:
        raise ValidationError("flag_threshold must be >= 0")
    base_ids = original.item_ids
    rows = []
    for lang, res in backtranslated.items():
        ids = res.item_ids
        if ids != base_ids:
            missing = sorted(base_ids - ids)
            extra = sorted(ids - base_ids)
            raise ValidationError(
                f"{lang}: item sets differ; missing {missing[:10]}{'...' if len(missing) > 10 else ''}"
                f" extra {extra[:10]}{'...' if len(extra) > 10 else ''}"
            )
        rows.append(
            QaRow(
                lang,
                original.overall_accuracy(),
                res.overall_accuracy(),
                None if chrf_scores is None else chrf_scores.get(lang),
            )
        )
    return QaReport(rows, flag_threshold)


def report_from_accuracies(
    rows: Mapping[str, tuple[float, float]] | Iterable[tuple[str, float, float]],
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
) -> QaReport:
    """Build a report straight from (original, back-translated) percentages."""
    items = rows.items() if isinstance(rows, Mapping) else ((a, (b, c)) for a, b, c in rows)
    return QaReport([QaRow(label, orig, bt) for label, (orig, bt) in items], flag_threshold)
