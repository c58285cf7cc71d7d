"""Run the whole data pipeline end to end on small synthetic corpora.

Uses only the in-process mock backends, so it needs no network and finishes
in seconds:

1. synthesize English image-text corpora, an MMMU-style item set and two
   parallel-text corpora;
2. filter the captioning corpus by image-caption similarity;
3. translate every corpus into the ten target languages;
4. validate the translated items by back-translation;
5. build MText and the Stage-2/Stage-3 mixtures of one stage preset;
6. evaluate two toy "models" and render a comparison table.

    python scripts/run_desk_pipeline.py --work /tmp/desk --preset table2-row5
"""

from __future__ import annotations

import argparse
import hashlib
import random
import tempfile
from pathlib import Path
from typing import Sequence

from m3pipe.backends import MockEmbedder, MockTranslator, ScriptedGenerator
from m3pipe.curation import filter_dataset
from m3pipe.evaluation import ComparisonRow, format_prompt, render_comparison, run_eval
from m3pipe.mixture import build_mixture, build_mtext, get_preset
from m3pipe.qa import build_report, corpus_chrf, round_trip
from m3pipe.records import TARGET_LANGUAGES, EvalItem, Manifest, Sample, TextPair, Turn, write_manifest
from m3pipe.translate import TranslationJobConfig, run_job, translate_record

WORDS = "cat dog red blue small large river mountain city street table window bird tree car boat".split()


def sentence(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n)).capitalize() + "."


def image_corpus(name: str, n: int, rng: random.Random, with_images: bool = True) -> list[Sample]:
    out = []
    for i in range(n):
        human = ("<image>\n" if with_images else "") + "Describe: " + sentence(rng, rng.randint(3, 8))
        out.append(Sample(f"{name}-{i:05d}", "en", (Turn("human", human), Turn("assistant", sentence(rng, 10))),
                          f"{name}/{i}.jpg" if with_images else None, name))
    return out


def mmmu_items(n: int, rng: random.Random) -> list[EvalItem]:
    return [EvalItem(f"mmmu-{i:04d}", "Art", f"What does <image 1> show? {sentence(rng, 5)}",
                     tuple(sentence(rng, 3) for _ in range(4)), rng.randrange(4), "en", (f"mmmu/{i}.png",))
            for i in range(n)]


def toy_model(items: Sequence[EvalItem], salt: str, skill: float) -> ScriptedGenerator:
    """Knows each item's answer; answers correctly on a ``skill`` share of prompts.

    Which prompts it gets right is decided by a hash, so the run is deterministic.
    """
    truth = {format_prompt(it): "ABCD"[it.answer_index] for it in items}

    def script(prompt: str, refs) -> str:
        h = hashlib.sha256((salt + prompt).encode()).digest()
        return truth[prompt] if h[0] < 256 * skill else "ABCD"[h[1] % 4]

    return ScriptedGenerator(script)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", help="working directory (default: a new temporary directory)")
    ap.add_argument("--preset", default="table2-row5")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--size", type=int, default=200, help="records per synthetic corpus")
    args = ap.parse_args()

    work = Path(args.work or tempfile.mkdtemp(prefix="m3pipe-desk-"))
    raw, data = work / "raw", work / "data"
    rng = random.Random(args.seed)
    translator = MockTranslator()

    # 1-2. synthesize, then curate the captioning corpus
    for name in ("ccSBU", "LAION", "LAVAM", "PALO", "CI"):
        write_manifest(image_corpus(name, args.size, rng), raw, name, "en")
    write_manifest(image_corpus("CT", args.size, rng, with_images=False), raw, "CT", "en")
    filtered = filter_dataset(raw / "ccSBU.en.manifest", MockEmbedder(), 0.0, data, out_name="ccSBU")
    print(f"filter ccSBU: kept {filtered.stats.kept}/{filtered.stats.total}")
    for name in ("LAION", "LAVAM", "PALO", "CI", "CT"):
        write_manifest(Manifest.load(raw / f"{name}.en.manifest").iter_records(), data, name, "en")

    # 3. translate; the Cambrian sets keep their English name and get "-M" copies
    for name in ("ccSBU", "LAION", "LAVAM", "PALO", "CI", "CT"):
        out_name = f"{name}-M" if name in ("CI", "CT") else name
        job = TranslationJobConfig(data / f"{name}.en.manifest", TARGET_LANGUAGES, data, work / "ckpt",
                                   dataset_name=out_name)
        res = run_job(job, translator)
        print(f"translate {name} -> {out_name}: {sum(m.total_count for m in res.manifests.values())} records")

    # 4. back-translation validation of the eval set
    items = mmmu_items(120, rng)
    write_manifest(items, data, "mmmu", "en", record_type="evalitem")
    trips = {lang: round_trip(items, lang, translator) for lang in TARGET_LANGUAGES}
    model = toy_model(items, "qa", skill=0.4)
    report = build_report(
        run_eval(items, model),
        {lang: run_eval(rt, model) for lang, rt in trips.items()},
        2.0,
        {lang: corpus_chrf(items, rt) for lang, rt in trips.items()},
    )
    (work / "qa.md").write_text(report.render(), encoding="utf-8")
    print(f"qa: verdicts {sorted(set(report.verdicts.values()))}, report in {work / 'qa.md'}")

    # 5. parallel text and mixtures
    def pairs(prefix: str, repeat: int, source: str) -> list[TextPair]:
        langs = TARGET_LANGUAGES * repeat
        return [TextPair(f"{prefix}-{i}", "en", lang, sentence(rng, 6), sentence(rng, 6), source)
                for i, lang in enumerate(langs)]

    flores = write_manifest(pairs("fl", 5, "flores"), raw, "flores", "mul", record_type="textpair")
    xsc = write_manifest(pairs("xsc", 2, "xstorycloze"), raw, "xsc", "mul", record_type="textpair")
    build_mtext(flores, xsc, data)
    preset = get_preset(args.preset, args.seed)
    for spec in (preset.stage2, preset.stage3):
        if spec is not None:
            m, comp = build_mixture(spec, data, work / "mix")
            print(f"mix {spec.name}: {comp.total} records, first shard {m.shards[0].sha256[:16]}")

    # 6. evaluation over English plus translated items, and a comparison table
    everything = items + [translate_record(it, lang, translator) for lang in TARGET_LANGUAGES for it in items]
    rows = [ComparisonRow((label,), run_eval(everything, toy_model(everything, label, skill)))
            for label, skill in (("weak model", 0.2), ("strong model", 0.6))]
    table = render_comparison(rows)
    (work / "comparison.md").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"outputs in {work}")


if __name__ == "__main__":
    main()
