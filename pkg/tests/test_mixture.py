import json

import pytest

from m3pipe.errors import ValidationError
from m3pipe.mixture import (
    BASE_DATASETS,
    Component,
    MixtureSpec,
    SplitMix64,
    build_mixture,
    build_mtext,
    get_preset,
    partial_fisher_yates,
    select,
    shuffle,
    stage_presets,
)
from m3pipe.records import Manifest, Sample, TextPair, Turn, write_manifest

# Reference outputs of splitmix64 published with the generator.
SPLITMIX_SEED_1234567 = [
    6457827717110365317,
    3203168211198807973,
    9817491932198370423,
    4593380528125082431,
    16408922859458223821,
]


def test_splitmix64_vectors():
    r = SplitMix64(1234567)
    assert [r.next() for _ in range(5)] == SPLITMIX_SEED_1234567
    assert SplitMix64(0).next() == 0xE220A8397B1DCDAF


# ---- independent oracle, written from the documented algorithm ----
class Oracle:
    def __init__(self, seed):
        self.s = seed

    def u64(self):
        self.s = (self.s + 0x9E3779B97F4A7C15) % 2**64
        z = self.s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        return z ^ (z >> 31)

    def below(self, m):
        while True:
            r = self.u64()
            if r < 2**64 - 2**64 % m:
                return r % m


def oracle_pick(n, k, rng):
    idx = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]


def oracle_shuffle(xs, rng):
    xs = list(xs)
    i = len(xs) - 1
    while i > 0:
        j = rng.below(i + 1)
        xs[i], xs[j] = xs[j], xs[i]
        i -= 1
    return xs


def test_partial_fisher_yates_matches_oracle():
    for seed in (0, 42, 2**64 - 1):
        got = partial_fisher_yates(100, 50, SplitMix64(seed))
        want = oracle_pick(100, 50, Oracle(seed))
        assert got == want
        assert len(set(got)) == 50


def test_shuffle_matches_oracle():
    xs = list(range(37))
    shuffle(xs, SplitMix64(9))
    assert xs == oracle_shuffle(range(37), Oracle(9))
    assert sorted(xs) == list(range(37))


def toy(data, name, n, lang="en", prefix=None, with_image=True):
    prefix = prefix or name.lower()
    recs = [Sample(f"{prefix}{i:04d}", lang, (Turn("human", f"{name} text {i}"),),
                   f"{name}/{i}.jpg" if with_image else None, name) for i in range(n)]
    return write_manifest(recs, data, name, lang, shard_size=7)


def pairs(data, name, ids, source):
    recs = [TextPair(i, "en", "fr", f"hello {i}", f"bonjour {i}", source) for i in ids]
    return write_manifest(recs, data, name, "mul", shard_size=50, record_type="textpair")


def test_all_mode_counts(tmp_path):
    toy(tmp_path, "A", 3)
    toy(tmp_path, "B", 2)
    m, rep = build_mixture(MixtureSpec("ab", (Component("A"), Component("B")), 1), tmp_path, tmp_path / "out")
    ids = [s.meta["source_id"] for s in m.iter_records()]
    assert len(ids) == 5 == rep.total
    assert sorted(ids) == ["a0000", "a0001", "a0002", "b0000", "b0001"]


def test_count_selection_matches_oracle(tmp_path):
    toy(tmp_path, "C", 100)
    spec = MixtureSpec("c50", (Component("C", "count", n=50),), 42)
    manifests, chosen, _ = select(spec, tmp_path)
    rng = Oracle(42)
    picked = oracle_pick(100, 50, rng)
    sorted_ids = sorted(f"c{i:04d}" for i in range(100))
    expected = oracle_shuffle([sorted_ids[i] for i in picked], rng)
    assert [loc.key[2] for loc in chosen] == expected


def test_count_too_large_names_component(tmp_path):
    toy(tmp_path, "C", 10)
    with pytest.raises(ValidationError, match="component C"):
        build_mixture(MixtureSpec("x", (Component("C", "count", n=11),)), tmp_path, tmp_path / "o")


def test_ratio_floor(tmp_path):
    toy(tmp_path, "R", 100)
    _, rep = build_mixture(MixtureSpec("r", (Component("R", "ratio", p=0.29),), 3), tmp_path, tmp_path / "o")
    assert rep.components[0]["selected"] == 29
    with pytest.raises(ValidationError):
        Component("R", "ratio", p=0.0)
    with pytest.raises(ValidationError):
        Component("R", "ratio", p=1.5)


def test_determinism_and_provenance(tmp_path):
    toy(tmp_path, "A", 30)
    toy(tmp_path, "B", 20)
    spec = MixtureSpec("d", (Component("A", "count", n=11), Component("B")), 7)
    m1, _ = build_mixture(spec, tmp_path, tmp_path / "o1")
    m2, _ = build_mixture(spec, tmp_path, tmp_path / "o2")
    assert [s.sha256 for s in m1.shards] == [s.sha256 for s in m2.shards]
    recs = list(m1.iter_records())
    assert len(recs) == 31
    assert all(r.meta["source_manifest"] in ("A.en", "B.en") for r in recs)
    assert len({r.id for r in recs}) == 31
    m3, _ = build_mixture(spec.with_seed(8), tmp_path, tmp_path / "o3")
    assert [s.sha256 for s in m3.shards] != [s.sha256 for s in m1.shards]


def test_independent_of_file_creation_order(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for lang in ("zh", "en", "ko"):
        toy(a, "T", 5, lang)
    for lang in ("ko", "zh", "en"):
        toy(b, "T", 5, lang)
    spec = MixtureSpec("t", (Component("T", "count", n=9),), 5)
    m1, _ = build_mixture(spec, a, tmp_path / "o1")
    m2, _ = build_mixture(spec, b, tmp_path / "o2")
    assert m1.path.read_bytes() == m2.path.read_bytes()


def test_virtual_mode(tmp_path):
    toy(tmp_path, "A", 4)
    m, rep = build_mixture(MixtureSpec("v", (Component("A"),), 1), tmp_path, tmp_path / "o", virtual=True)
    assert m is None
    lines = (tmp_path / "o" / "v.index.jsonl").read_text().splitlines()
    assert sorted(json.loads(x)["id"] for x in lines) == ["a0000", "a0001", "a0002", "a0003"]


def test_spec_validation_and_roundtrip(tmp_path):
    spec = MixtureSpec("s", (Component("A"), Component("B", "count", n=3), Component("C", "ratio", p=0.5)), 9)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert MixtureSpec.load(p) == spec
    with pytest.raises(ValidationError):
        MixtureSpec("dup", (Component("A"), Component("A")))
    with pytest.raises(ValidationError):
        MixtureSpec.from_dict({"name": "x", "components": [], "weights": 1})


def test_presets_match_table():
    ps = stage_presets()
    assert len(ps) == 7
    for p in ps:
        refs = [c.ref for c in p.stage2.components]
        assert refs[:4] == list(BASE_DATASETS)
    assert [p.stage3 is None for p in ps] == [True, True, True, False, False, False, False]
    extras = [tuple(c.ref for c in p.stage2.components[4:]) for p in ps]
    assert extras == [(), ("CI",), ("CI-M",), ("CI",), ("CI-M",), ("CI",), ("CI",)]
    s3 = [tuple(c.ref for c in p.stage3.components) if p.stage3 else None for p in ps]
    assert s3[3:] == [("CI-M", "CT-M", "MText"), ("CI-M", "CT-M", "MText"), ("CI", "CT"), ("CI", "CT", "MText")]
    assert all(c.mode == "all" for p in ps for spec in (p.stage2, p.stage3) if spec for c in spec.components)
    with pytest.raises(ValidationError):
        get_preset("table2-row8")


def test_mtext_full_size_concatenation(tmp_path):
    f = pairs(tmp_path, "flores", [f"f{i}" for i in range(110_000)], "flores")
    x = pairs(tmp_path, "xsc", [f"x{i}" for i in range(20_000)], "xstorycloze")
    m = build_mtext(f, x, tmp_path / "o", shard_size=50_000)
    assert m.total_count == 130_000
    assert m.dataset_name == "MText"


def test_mtext_overlap_and_empty(tmp_path):
    a_ids = [f"p{i}" for i in range(0, 60)]
    b_ids = [f"p{i}" for i in range(40, 90)]
    f = pairs(tmp_path, "flores", a_ids, "flores")
    x = pairs(tmp_path, "xsc", b_ids, "xstorycloze")
    m = build_mtext(f, x, tmp_path / "o")
    assert m.total_count == len(set(a_ids) | set(b_ids))
    empty = pairs(tmp_path, "none", [], "flores")
    m2 = build_mtext(f, empty, tmp_path / "o2")
    assert [r.to_dict() for r in m2.iter_records()] == [r.to_dict() for r in Manifest.load(f.path).iter_records()]


def test_mtext_wrong_type(tmp_path):
    s = toy(tmp_path, "S", 2)
    f = pairs(tmp_path, "flores", ["a"], "flores")
    with pytest.raises(ValidationError):
        build_mtext(f, s, tmp_path / "o")


def test_textpairs_join_mixtures(tmp_path):
    toy(tmp_path, "CT-M", 3, "zh")
    pairs(tmp_path, "MText", ["a", "b"], "flores")
    m, rep = build_mixture(MixtureSpec("s3", (Component("CT-M"), Component("MText")), 2), tmp_path, tmp_path / "o")
    recs = list(m.iter_records())
    assert len(recs) == 5
    mt = [r for r in recs if r.meta["source_manifest"] == "MText.mul"]
    assert {r.turns[0].text for r in mt} == {"hello a", "hello b"}
    assert all(r.language == "fr" for r in mt)
