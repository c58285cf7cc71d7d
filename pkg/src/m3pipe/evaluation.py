"""Multiple-choice evaluation: prompting, answer extraction, scoring, reports.

Scores are always recomputed from per-item outcomes (or from raw
correct/total counts); stored accuracies and macro averages are display
values only.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from m3pipe.backends import Generator
from m3pipe.errors import M3Error, ValidationError
from m3pipe.records import LANGUAGES, EvalItem, parse_language

log = logging.getLogger(__name__)

LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
IMAGE_TOKEN = "<image>"
DEFAULT_TEMPLATE = (
    "Question: {question}\n"
    "Options:\n"
    "{options}\n"
    "Answer with the option's letter from the given choices directly."
)
DEFAULT_MAX_TOKENS = 64

RULE_LETTER = "letter"
RULE_EXACT = "exact_text"
RULE_SUBSTRING = "substring"
RULE_ABSTAIN = "abstain"

_STANDALONE_LETTER = re.compile(r"\b([A-Z])\b")


def format_prompt(item: EvalItem, template: str = DEFAULT_TEMPLATE) -> str:
    if "{question}" not in template or "{options}" not in template:
        raise ValidationError("prompt template needs both {question} and {options} slots")
    if len(item.options) > len(LETTERS):
        raise ValidationError(f"item {item.id}: {len(item.options)} options exceed the 26 available letters")
    options = "\n".join(f"{LETTERS[i]}. {text}" for i, text in enumerate(item.options))
    # Plain replacement: questions routinely contain braces.
    body = template.replace("{question}", item.question).replace("{options}", options)
    return f"{IMAGE_TOKEN}\n" * len(item.image_refs) + body


def _normalize(text: str) -> str:
    text = text.casefold().strip()
    while text and unicodedata.category(text[-1]).startswith("P"):
        text = text[:-1].rstrip()
    return text


@dataclass(frozen=True)
class Extraction:
    index: int | None
    rule: str

    @property
    def abstained(self) -> bool:
        return self.index is None


def extract_answer(raw_generation: str, options: Sequence[str]) -> Extraction:
    """Map a free-form generation onto an option index.

    Rules, first hit wins:

    1. the first standalone capital letter (word-boundary delimited) that
       names an existing option;
    2. the whole generation equals an option text after casefolding,
       trimming and stripping trailing punctuation;
    3. the longest option text contained in the generation (casefolded),
       ties broken by the lowest index;
    4. otherwise abstain.
    """
    for m in _STANDALONE_LETTER.finditer(raw_generation):
        idx = LETTERS.index(m.group(1))
        if idx < len(options):
            return Extraction(idx, RULE_LETTER)
    gen = _normalize(raw_generation)
    norm_opts = [_normalize(o) for o in options]
    for i, o in enumerate(norm_opts):
        if o and gen == o:
            return Extraction(i, RULE_EXACT)
    best, best_len = None, 0
    for i, o in enumerate(norm_opts):
        if len(o) > best_len and o in gen:
            best, best_len = i, len(o)
    if best is not None:
        return Extraction(best, RULE_SUBSTRING)
    return Extraction(None, RULE_ABSTAIN)


@dataclass(frozen=True)
class ItemOutcome:
    item_id: str
    language: str
    raw_generation: str
    extracted: int | None
    rule: str
    correct: bool
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "language": self.language,
            "raw_generation": self.raw_generation,
            "extracted": self.extracted,
            "extraction_rule_used": self.rule,
            "correct": self.correct,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ItemOutcome:
        return cls(
            d["item_id"],
            d["language"],
            d["raw_generation"],
            d["extracted"],
            d.get("extraction_rule_used", RULE_ABSTAIN),
            bool(d["correct"]),
            d.get("error"),
        )


@dataclass(frozen=True)
class LanguageScore:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else 0.0


@dataclass
class EvalResult:
    """Per-language correct/total counts plus, when available, the item log."""

    counts: dict[str, tuple[int, int]]
    outcomes: list[ItemOutcome] = field(default_factory=list)

    def __post_init__(self) -> None:
        for lang, (c, t) in self.counts.items():
            parse_language(lang)
            if not 0 <= c <= t:
                raise ValidationError(f"{lang}: impossible score {c}/{t}")

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[ItemOutcome]) -> EvalResult:
        outcomes = list(outcomes)
        counts: dict[str, list[int]] = {}
        for o in outcomes:
            c = counts.setdefault(o.language, [0, 0])
            c[0] += int(o.correct)
            c[1] += 1
        ordered = {lang: (counts[lang][0], counts[lang][1]) for lang in LANGUAGES if lang in counts}
        return cls(ordered, outcomes)

    @property
    def per_language(self) -> dict[str, LanguageScore]:
        return {lang: LanguageScore(c, t) for lang, (c, t) in self.counts.items()}

    @property
    def mmmu_en(self) -> float | None:
        s = self.per_language.get("en")
        return s.accuracy if s else None

    @property
    def mmmu_multi(self) -> float | None:
        """Unweighted mean accuracy over the non-English languages present."""
        accs = [s.accuracy for lang, s in self.per_language.items() if lang != "en"]
        return sum(accs) / len(accs) if accs else None

    def overall_accuracy(self) -> float:
        c = sum(c for c, _ in self.counts.values())
        t = sum(t for _, t in self.counts.values())
        return 100.0 * c / t if t else 0.0

    @property
    def item_ids(self) -> frozenset[str]:
        if not self.outcomes:
            raise ValidationError("result carries no per-item log")
        return frozenset(o.item_id for o in self.outcomes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_language": {
                lang: {"correct": s.correct, "total": s.total, "accuracy": s.accuracy}
                for lang, s in self.per_language.items()
            },
            "mmmu_en": self.mmmu_en,
            "mmmu_multi": self.mmmu_multi,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> EvalResult:
        """Load counts from a results file; derived numbers in it are ignored."""
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        counts = {lang: (int(v["correct"]), int(v["total"])) for lang, v in d["per_language"].items()}
        log_path = Path(path).with_name("items.jsonl")
        outcomes = read_item_log(log_path) if log_path.exists() else []
        return cls(counts, outcomes)


def read_item_log(path: str | Path) -> list[ItemOutcome]:
    with open(path, encoding="utf-8") as f:
        return [ItemOutcome.from_dict(json.loads(line)) for line in f if line.strip()]


def score_item(item: EvalItem, raw_generation: str) -> ItemOutcome:
    ex = extract_answer(raw_generation, item.options)
    return ItemOutcome(item.id, item.language, raw_generation, ex.index, ex.rule, ex.index == item.answer_index)


def run_eval(
    items: Iterable[EvalItem],
    backend: Generator,
    template: str = DEFAULT_TEMPLATE,
    *,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    parallelism: int = 4,
    log_path: str | Path | None = None,
) -> EvalResult:
    """Generate one answer per item and score it.

    Generations run with at most ``parallelism`` requests in flight; the
    outcome list keeps item order, so scores never depend on completion
    order. A backend failure scores the item incorrect and records the error.
    """
    items = list(items)
    if parallelism < 1:
        raise ValidationError("parallelism must be >= 1")
    for item in items:
        format_prompt(item, template)

    def run_one(item: EvalItem) -> ItemOutcome:
        prompt = format_prompt(item, template)
        try:
            raw = backend.generate(prompt, item.image_refs, max_tokens)
        except M3Error as exc:
            log.warning("item %s (%s): generation failed: %s", item.id, item.language, exc)
            return ItemOutcome(item.id, item.language, "", None, RULE_ABSTAIN, False, f"{type(exc).__name__}: {exc}")
        return score_item(item, raw)

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        outcomes = list(pool.map(run_one, items))
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as f:
            for o in outcomes:
                f.write(json.dumps(o.to_dict(), ensure_ascii=False) + "\n")
    return EvalResult.from_outcomes(outcomes)


# --------------------------------------------------------------------------
# comparison tables


@dataclass(frozen=True)
class ComparisonRow:
    labels: tuple[str, ...]
    result: EvalResult


_STYLES = {
    "markdown": (lambda s: f"**{s}**", lambda s: f"<u>{s}</u>"),
    "latex": (lambda s: f"\\textbf{{{s}}}", lambda s: f"\\underline{{{s}}}"),
    "plain": (lambda s: f"*{s}*", lambda s: f"_{s}_"),
}


def rank_marks(values: Sequence[float | None], decimals: int = 2) -> list[str]:
    """'best' / 'second' / '' per value, comparing at display precision.

    Ties share a mark; the second-best mark goes to the next distinct value.
    """
    shown = [None if v is None else round(v, decimals) for v in values]
    distinct = sorted({v for v in shown if v is not None}, reverse=True)
    best = distinct[0] if distinct else None
    second = distinct[1] if len(distinct) > 1 else None
    return ["best" if v is not None and v == best else "second" if v is not None and v == second else "" for v in shown]


def render_comparison(
    rows: Sequence[ComparisonRow],
    label_headers: Sequence[str] = ("Model",),
    style: str = "markdown",
) -> str:
    """Render MMMU / MMMU Multi columns with best bold, second-best underlined."""
    if not rows:
        raise ValidationError("need at least one result row")
    if style not in _STYLES:
        raise ValidationError(f"unknown table style {style!r}")
    for r in rows:
        if len(r.labels) != len(label_headers):
            raise ValidationError(f"row {r.labels} has {len(r.labels)} label cells, expected {len(label_headers)}")
        if "en" not in r.result.counts or r.result.mmmu_multi is None:
            raise ValidationError(f"row {r.labels}: results must cover en and at least one other language")
    bold, under = _STYLES[style]
    columns = {
        "MMMU": [r.result.mmmu_en for r in rows],
        "MMMU Multi": [r.result.mmmu_multi for r in rows],
    }
    marks = {name: rank_marks(vals) for name, vals in columns.items()}

    def cell(name: str, i: int) -> str:
        s = f"{columns[name][i]:.2f}"
        m = marks[name][i]
        return bold(s) if m == "best" else under(s) if m == "second" else s

    headers = [*label_headers, *columns]
    if style == "latex":
        lines = [" & ".join(headers) + r" \\", r"\hline"]
        for i, r in enumerate(rows):
            lines.append(" & ".join([*r.labels, *(cell(n, i) for n in columns)]) + r" \\")
        return "\n".join(lines) + "\n"
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(label_headers) + "---:|" * len(columns)]
    for i, r in enumerate(rows):
        lines.append("| " + " | ".join([*r.labels, *(cell(n, i) for n in columns)]) + " |")
    return "\n".join(lines) + "\n"
