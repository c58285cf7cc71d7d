"""Shared fixtures-by-function and hypothesis strategies for the test suite."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from m3pipe.records import TARGET_LANGUAGES, EvalItem, Sample, Turn

# no lone surrogates (not encodable as UTF-8) and no sentinel brackets
safe_chars = st.characters(blacklist_categories=("Cs",), blacklist_characters="⟦⟧")
texts = st.text(alphabet=safe_chars, max_size=40)
nonempty_texts = st.text(alphabet=safe_chars, min_size=1, max_size=40)


@st.composite
def turns(draw):
    role = draw(st.sampled_from(["human", "assistant", "system"]))
    text = draw(texts if role == "system" else nonempty_texts)
    return Turn(role, text)


@st.composite
def samples(draw, language="en"):
    return Sample(
        id=draw(st.text(alphabet="abcdefghij0123456789", min_size=1, max_size=8)),
        language=language,
        turns=tuple(draw(st.lists(turns(), min_size=1, max_size=4))),
        image_ref=draw(st.none() | st.text(alphabet=safe_chars, max_size=20)),
        source_dataset=draw(st.sampled_from(["LLaVA-Instruct", "CI", "toy"])),
        meta=draw(st.dictionaries(st.text(alphabet="abc", min_size=1, max_size=3), texts, max_size=2)),
    )


WORDS = ["cat", "dog", "What", "is", "shown", "image", "Describe", "the", "scene", "red", "Zebra",
         "42", "été", "中文", "!", "?", "<b>", "naïve", "ok"]


def random_sample(rng: random.Random, i: int, n_images: int | None = None) -> Sample:
    """A plausible conversation sample; '<image>' appears in the first turn."""
    k = rng.randint(1, 2) if n_images is None else n_images
    first = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 8)))
    first = "<image>\n" * k + first
    ts = [Turn("human", first)]
    for _ in range(rng.randint(0, 3)):
        role = "assistant" if ts[-1].role == "human" else "human"
        text = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 10)))
        if rng.random() < 0.2:
            text += " <image>"
        ts.append(Turn(role, text))
    return Sample(f"s{i:06d}", "en", tuple(ts), f"images/{i:06d}.jpg", "toy", {"k": str(i % 3)})


def random_samples(n: int, seed: int = 0) -> list[Sample]:
    rng = random.Random(seed)
    return [random_sample(rng, i) for i in range(n)]


def eval_items(n: int, language: str = "en", n_options: int = 4, seed: int = 0) -> list[EvalItem]:
    rng = random.Random(seed)
    out = []
    for i in range(n):
        opts = tuple(f"option {j} for question {i} {rng.choice(WORDS)}" for j in range(n_options))
        out.append(EvalItem(f"q{i:04d}", "Physics", f"Question {i}: which is right?", opts, i % n_options, language,
                            (f"mmmu/{i}.png",)))
    return out


LANGS10 = TARGET_LANGUAGES
