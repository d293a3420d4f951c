import json
import math
import random
from importlib import resources

import pytest

from chordgen.corpus import (
    EmptyCorpus,
    GenreSpec,
    InsufficientPop,
    InvalidMatrix,
    MixConfig,
    SongRecord,
    build_finetune_mix,
    dedup,
    generate_synthetic_genre,
    genre_test_sets,
    load_jsonl,
    save_jsonl,
    split_songs,
    clone_unassigned,
)
from chordgen.notation import CanonicalChord, load_palette

from conftest import make_random_song


def tiny_song(song_id, genre="pop", key=0, source="src", roots=(0, 5, 7)):
    palette = load_palette()
    bars = [[CanonicalChord(r, palette.by_name["maj"])] for r in roots]
    return SongRecord(id=song_id, genre=genre, key=key, meter=(4, 4),
                      bars=bars, source=source)


def load_spec(name):
    text = resources.files("chordgen.data").joinpath(name).read_text()
    return GenreSpec.from_dict(json.loads(text))


def test_split_ten_songs():
    songs = [tiny_song(f"s{i}") for i in range(10)]
    split_songs(songs, seed=42)
    counts = {name: sum(s.split == name for s in songs)
              for name in ("train", "val", "test")}
    assert counts == {"train": 8, "val": 1, "test": 1}


def test_split_jazz_pool_window():
    # 1,859-song pool: floor-rounded 80/10/10 puts ~1,513 songs in train
    songs = [tiny_song(f"j{i}", genre="jazz", source="jazzpool")
             for i in range(1859)]
    split_songs(songs, seed=42)
    n_train = sum(s.split == "train" for s in songs)
    assert 1487 <= n_train <= 1513


def test_split_deterministic_and_partition():
    def build():
        return ([tiny_song(f"a{i}", source="A") for i in range(57)]
                + [tiny_song(f"b{i}", source="B") for i in range(23)])

    s1, s2 = build(), build()
    split_songs(s1, seed=42)
    split_songs(s2, seed=42)
    assert [s.split for s in s1] == [s.split for s in s2]
    assert all(s.split in ("train", "val", "test") for s in s1)
    # per-source proportions
    for source, total in (("A", 57), ("B", 23)):
        group = [s for s in s1 if s.source == source]
        assert sum(s.split == "val" for s in group) == total // 10
        assert sum(s.split == "test" for s in group) == total // 10


def test_split_ingestion_order_independent():
    songs = [tiny_song(f"s{i}") for i in range(40)]
    shuffled = list(reversed(songs))
    split_songs(songs, seed=1)
    by_id = {s.id: s.split for s in songs}
    fresh = clone_unassigned(shuffled)
    split_songs(fresh, seed=1)
    assert {s.id: s.split for s in fresh} == by_id


def test_split_rejects_empty_and_preassigned():
    with pytest.raises(EmptyCorpus):
        split_songs([])
    songs = [tiny_song("x")]
    songs[0].split = "train"
    with pytest.raises(ValueError):
        split_songs(songs)


def test_dedup_transposition_invariant():
    a = tiny_song("orig", key=0, roots=(0, 5, 7))
    b = tiny_song("transposed", key=2, roots=(2, 7, 9), source="other")
    out = dedup([a, b])
    assert out == [a]
    # priority can flip the survivor
    out = dedup([a, b], source_priority=["other", "src"])
    assert [s.id for s in out] == ["transposed"]


def test_dedup_trivia():
    assert dedup([]) == []
    songs = [tiny_song("a", roots=(0, 5)), tiny_song("b", roots=(0, 7))]
    assert dedup(songs) == songs
    assert dedup(dedup(songs)) == dedup(songs)


def test_finetune_mix_table_counts():
    jazz = [tiny_song(f"j{i}", genre="jazz") for i in range(1513)]
    pop = [tiny_song(f"p{i}") for i in range(10000)]
    for name, pop_mix, total, frac in [("F1", 10000, 11513, 87),
                                       ("F3", 2500, 4013, 62),
                                       ("F5", 0, 1513, 0)]:
        mix = build_finetune_mix(jazz, pop, MixConfig(name, pop_mix, 1513, seed=7))
        assert len(mix) == total
        n_pop = sum(s.genre == "pop" for s in mix)
        assert n_pop == pop_mix
        assert round(100 * n_pop / len(mix)) == frac


def test_finetune_mix_deterministic_and_errors():
    jazz = [tiny_song(f"j{i}", genre="jazz") for i in range(20)]
    pop = [tiny_song(f"p{i}") for i in range(50)]
    cfg = MixConfig("m", 30, 20, seed=5)
    ids1 = [s.id for s in build_finetune_mix(jazz, pop, cfg)]
    ids2 = [s.id for s in build_finetune_mix(jazz, list(reversed(pop)), cfg)]
    assert ids1 == ids2
    with pytest.raises(InsufficientPop):
        build_finetune_mix(jazz, pop, MixConfig("m", 51, 20, seed=5))


def test_genre_test_sets_partition():
    songs = [tiny_song(f"s{i}", genre=("jazz" if i % 3 else "pop"))
             for i in range(30)]
    split_songs(songs, seed=0)
    pop, jazz = genre_test_sets(songs)
    test = [s for s in songs if s.split == "test"]
    assert sorted(s.id for s in pop + jazz) == sorted(s.id for s in test)
    assert all(s.genre == "pop" for s in pop)
    assert all(s.genre == "jazz" for s in jazz)
    all_pop = [tiny_song(f"q{i}") for i in range(10)]
    split_songs(all_pop, seed=0)
    pop, jazz = genre_test_sets(all_pop)
    assert jazz == [] and len(pop) == 1


def test_synthetic_generator_bigram_support():
    spec = load_spec("genre_a.json")
    songs = generate_synthetic_genre(spec, n=50, seed=11)
    support = {(i, j) for i, row in enumerate(spec.matrix)
               for j, p in enumerate(row) if p > 0}
    index = {s: i for i, s in enumerate(spec.states)}
    from chordgen.notation import render_chord
    for song in songs:
        chords = [render_chord(bar[0]) for bar in song.bars]
        for a, b in zip(chords, chords[1:]):
            assert (index[a], index[b]) in support


def test_synthetic_generator_deterministic():
    spec = load_spec("genre_b.json")
    s1 = generate_synthetic_genre(spec, n=20, seed=3)
    s2 = generate_synthetic_genre(spec, n=20, seed=3)
    assert s1 == s2
    assert [a.id for a in s1] == [a.id for a in s2]


def test_synthetic_generator_rejects_bad_input():
    spec = load_spec("genre_a.json")
    bad = GenreSpec(name="bad", genre="pop", states=("C", "G"),
                    matrix=((0.5, 0.4), (0.5, 0.5)), initial=(0.5, 0.5),
                    min_bars=4, max_bars=8, key_dist=(("C", 1.0),),
                    meter=(4, 4))
    with pytest.raises(InvalidMatrix):
        generate_synthetic_genre(bad, n=1, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_genre(spec, n=0, seed=0)


def test_synthetic_bigram_frequencies_match_matrix():
    # law of large numbers: empirical row conditionals within 0.02 TV
    spec = load_spec("genre_a.json")
    songs = generate_synthetic_genre(spec, n=10000, seed=17)
    k = len(spec.states)
    index = {s: i for i, s in enumerate(spec.states)}
    counts = [[0] * k for _ in range(k)]
    from chordgen.notation import render_chord
    for song in songs:
        chords = [index[render_chord(bar[0])] for bar in song.bars]
        for a, b in zip(chords, chords[1:]):
            counts[a][b] += 1
    for i in range(k):
        total = sum(counts[i])
        assert total > 0
        tv = 0.5 * sum(abs(counts[i][j] / total - spec.matrix[i][j])
                       for j in range(k))
        assert tv < 0.02, f"row {i} TV {tv}"


def test_two_genre_bigram_classifier_separates():
    spec_a, spec_b = load_spec("genre_a.json"), load_spec("genre_b.json")
    from chordgen.notation import render_chord

    def logprob_table(spec):
        table = {}
        for i, row in enumerate(spec.matrix):
            for j, p in enumerate(row):
                table[(spec.states[i], spec.states[j])] = (
                    math.log(p) if p > 0 else -20.0)
        return table

    ta, tb = logprob_table(spec_a), logprob_table(spec_b)

    def classify(song):
        chords = [render_chord(bar[0]) for bar in song.bars]
        score_a = sum(ta.get((x, y), -20.0) for x, y in zip(chords, chords[1:]))
        score_b = sum(tb.get((x, y), -20.0) for x, y in zip(chords, chords[1:]))
        return "pop" if score_a > score_b else "jazz"

    held_a = generate_synthetic_genre(spec_a, n=500, seed=23)
    held_b = generate_synthetic_genre(spec_b, n=500, seed=29)
    correct = sum(classify(s) == "pop" for s in held_a)
    correct += sum(classify(s) == "jazz" for s in held_b)
    assert correct / 1000 >= 0.99


def test_jsonl_round_trip(tmp_path):
    rng = random.Random(31)
    songs = [make_random_song(rng, f"rt-{i}", with_bass=True) for i in range(40)]
    for i, s in enumerate(songs):
        s.split = ("train", "val", "test")[i % 3]
    path = tmp_path / "corpus.jsonl"
    save_jsonl(songs, path)
    loaded = load_jsonl(path)
    assert loaded == songs
    assert [s.id for s in loaded] == [s.id for s in songs]
    assert [s.split for s in loaded] == [s.split for s in songs]
    assert [s.mode for s in loaded] == [s.mode for s in songs]
