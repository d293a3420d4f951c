"""Song-level dataset management.

Covers JSONL ingestion, transposition-invariant dedup, deterministic
80/10/10 song-level splits, rehearsal-mix construction for the
fine-tune sweep, and a first-order Markov generator that produces the
synthetic two-genre corpora used by the desk-scale experiments.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .notation import (
    CanonicalChord,
    Dialect,
    parse_chord,
    parse_pitch,
    pitch_name,
    render_chord,
)

SPLITS = ("train", "val", "test", "unassigned")


class CorpusError(ValueError):
    pass


class EmptyCorpus(CorpusError):
    pass


class InsufficientPop(CorpusError):
    pass


class InvalidMatrix(CorpusError):
    pass


@dataclass
class SongRecord:
    """One song: genre, key signature, meter, and bar-grouped chords.

    ``key`` is the key-signature pitch class (minor songs are notated
    under their relative major, lead-sheet style); ``mode`` is retained
    as display metadata only. Identity fields (id/source/split/mode) do
    not participate in equality, so round-tripping through the token
    representation compares musical content.
    """

    id: str = field(compare=False)
    genre: str
    key: int
    meter: tuple[int, int]
    bars: list[list[CanonicalChord]]
    source: str = field(compare=False, default="unknown")
    split: str = field(compare=False, default="unassigned")
    mode: str = field(compare=False, default="major")

    def __post_init__(self) -> None:
        if not 0 <= self.key <= 11:
            raise CorpusError(f"key pitch class out of range: {self.key}")
        if self.split not in SPLITS:
            raise CorpusError(f"unknown split label: {self.split}")

    def n_chords(self) -> int:
        return sum(len(bar) for bar in self.bars)


@dataclass(frozen=True)
class MixConfig:
    """One fine-tune rehearsal configuration (F1..F5 style)."""

    name: str
    pop_mix: int
    jazz_count: int
    seed: int


def _parse_key(text: str) -> tuple[int, str]:
    if text.endswith("m"):
        tonic = parse_pitch(text[:-1])
        return (tonic + 3) % 12, "minor"  # relative-major signature
    return parse_pitch(text), "major"


def _render_key(key: int, mode: str) -> str:
    if mode == "minor":
        return pitch_name((key - 3) % 12) + "m"
    return pitch_name(key)


def song_to_dict(song: SongRecord) -> dict:
    return {
        "id": song.id,
        "genre": song.genre,
        "key": _render_key(song.key, song.mode),
        "meter": f"{song.meter[0]}/{song.meter[1]}",
        "bars": [[render_chord(c) for c in bar] for bar in song.bars],
        "source": song.source,
        "split": song.split,
    }


def song_from_dict(obj: dict, dialect: Dialect = Dialect.GUITAR) -> SongRecord:
    key, mode = _parse_key(obj["key"])
    num, den = obj["meter"].split("/")
    bars = [[parse_chord(text, dialect) for text in bar] for bar in obj["bars"]]
    if not any(bars) or not bars:
        raise CorpusError(f"song {obj.get('id')!r} has no chords")
    return SongRecord(
        id=obj["id"],
        genre=obj["genre"],
        key=key,
        meter=(int(num), int(den)),
        bars=bars,
        source=obj.get("source", "unknown"),
        split=obj.get("split", "unassigned"),
        mode=mode,
    )


def load_jsonl(path: str | Path, dialect: Dialect = Dialect.GUITAR) -> list[SongRecord]:
    songs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                songs.append(song_from_dict(json.loads(line), dialect))
    return songs


def save_jsonl(songs: list[SongRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for song in songs:
            f.write(json.dumps(song_to_dict(song), separators=(",", ":")) + "\n")


def split_songs(songs: list[SongRecord], seed: int = 42) -> list[SongRecord]:
    """Assign train/val/test 80/10/10 per source corpus, in place.

    Floor rounding for val/test, remainder to train; shuffle order is a
    seeded Fisher-Yates over lexicographically sorted song ids, so the
    assignment is independent of ingestion order.
    """
    if not songs:
        raise EmptyCorpus("no songs to split")
    if any(s.split != "unassigned" for s in songs):
        raise CorpusError("split_songs requires all splits unassigned")

    by_source: dict[str, list[SongRecord]] = {}
    for song in songs:
        by_source.setdefault(song.source, []).append(song)

    for source, group in by_source.items():
        group = sorted(group, key=lambda s: s.id)
        rng = random.Random(f"{seed}:{source}")
        rng.shuffle(group)
        n = len(group)
        n_val, n_test = n // 10, n // 10
        for i, song in enumerate(group):
            if i < n - n_val - n_test:
                song.split = "train"
            elif i < n - n_test:
                song.split = "val"
            else:
                song.split = "test"
    return songs


def _normalized_signature(song: SongRecord) -> tuple:
    """Chord stream transposed to key C, with bar boundaries."""
    shift = -song.key % 12
    return tuple(
        tuple(
            ((c.root + shift) % 12, c.quality.name,
             None if c.bass is None else (c.bass + shift) % 12)
            for c in bar
        )
        for bar in song.bars
    )


def dedup(songs: list[SongRecord],
          source_priority: list[str] | None = None) -> list[SongRecord]:
    """Drop transposition-equivalent duplicate songs.

    The survivor is the record from the highest-priority source (first
    occurrence on ties); output preserves input order.
    """
    priority = source_priority or []

    def rank(song: SongRecord) -> int:
        try:
            return priority.index(song.source)
        except ValueError:
            return len(priority)

    best: dict[tuple, int] = {}
    for i, song in enumerate(songs):
        sig = _normalized_signature(song)
        if sig not in best:
            best[sig] = i
        elif rank(song) < rank(songs[best[sig]]):
            best[sig] = i
    keep = set(best.values())
    return [s for i, s in enumerate(songs) if i in keep]


def build_finetune_mix(jazz_train: list[SongRecord], pop_train: list[SongRecord],
                       cfg: MixConfig) -> list[SongRecord]:
    """All jazz plus a seeded without-replacement pop sub-sample."""
    if cfg.jazz_count != len(jazz_train):
        raise CorpusError(
            f"mix {cfg.name}: jazz_count {cfg.jazz_count} != |jazz_train| {len(jazz_train)}")
    if cfg.pop_mix > len(pop_train):
        raise InsufficientPop(
            f"mix {cfg.name}: need {cfg.pop_mix} pop songs, have {len(pop_train)}")
    pool = sorted(pop_train, key=lambda s: s.id)
    rng = random.Random(f"{cfg.seed}:mix")
    rng.shuffle(pool)
    return list(jazz_train) + pool[:cfg.pop_mix]


def genre_test_sets(songs: list[SongRecord]) -> tuple[list[SongRecord], list[SongRecord]]:
    """Partition the test split into (pop_test, jazz_test) by genre tag."""
    test = [s for s in songs if s.split == "test"]
    pop = [s for s in test if s.genre != "jazz"]
    jazz = [s for s in test if s.genre == "jazz"]
    return pop, jazz


@dataclass(frozen=True)
class GenreSpec:
    """First-order Markov description of a synthetic genre."""

    name: str
    genre: str
    states: tuple[str, ...]
    matrix: tuple[tuple[float, ...], ...]
    initial: tuple[float, ...]
    min_bars: int
    max_bars: int
    key_dist: tuple[tuple[str, float], ...]
    meter: tuple[int, int]

    @classmethod
    def from_dict(cls, obj: dict) -> "GenreSpec":
        states = tuple(obj["states"])
        matrix = tuple(tuple(float(x) for x in row) for row in obj["matrix"])
        initial = obj.get("initial")
        if initial is None:
            initial = tuple(1.0 / len(states) for _ in states)
        else:
            initial = tuple(float(x) for x in initial)
        length = obj["length_dist"]
        return cls(
            name=obj["name"],
            genre=obj["genre"],
            states=states,
            matrix=matrix,
            initial=initial,
            min_bars=int(length["min_bars"]),
            max_bars=int(length["max_bars"]),
            key_dist=tuple(sorted(obj.get("key_dist", {"C": 1.0}).items())),
            meter=tuple(obj.get("meter", (4, 4))),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "GenreSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self) -> None:
        k = len(self.states)
        if len(set(self.states)) != k or k == 0:
            raise InvalidMatrix("states must be non-empty and unique")
        if len(self.matrix) != k or any(len(row) != k for row in self.matrix):
            raise InvalidMatrix(f"matrix must be {k}x{k}")
        for i, row in enumerate(self.matrix):
            if any(p < 0 for p in row):
                raise InvalidMatrix(f"negative probability in row {i}")
            if abs(sum(row) - 1.0) > 1e-9:
                raise InvalidMatrix(f"row {i} sums to {sum(row)!r}, not 1")
        if abs(sum(self.initial) - 1.0) > 1e-9 or len(self.initial) != k:
            raise InvalidMatrix("initial distribution invalid")
        if not 1 <= self.min_bars <= self.max_bars:
            raise InvalidMatrix("bad length distribution bounds")


def generate_synthetic_genre(spec: GenreSpec, n: int, seed: int) -> list[SongRecord]:
    """Sample ``n`` songs as first-order Markov chains over the spec's states.

    One chord per bar; per-song RNG streams keep generation reproducible
    and order-independent.
    """
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    chords = [parse_chord(s, Dialect.GUITAR) for s in spec.states]
    keys = [k for k, _ in spec.key_dist]
    key_weights = [w for _, w in spec.key_dist]

    songs = []
    for i in range(n):
        rng = random.Random(f"{seed}:{spec.name}:{i}")
        key_name = rng.choices(keys, weights=key_weights, k=1)[0]
        key, mode = _parse_key(key_name)
        n_bars = rng.randint(spec.min_bars, spec.max_bars)
        state = rng.choices(range(len(chords)), weights=spec.initial, k=1)[0]
        bars = [[chords[state]]]
        for _ in range(n_bars - 1):
            state = rng.choices(range(len(chords)), weights=spec.matrix[state], k=1)[0]
            bars.append([chords[state]])
        songs.append(SongRecord(
            id=f"{spec.name}-{i:05d}",
            genre=spec.genre,
            key=key,
            meter=spec.meter,
            bars=bars,
            source=f"synthetic:{spec.name}",
            mode=mode,
        ))
    return songs


def clone_unassigned(songs: list[SongRecord]) -> list[SongRecord]:
    """Copies with the split label cleared (for re-splitting)."""
    return [replace(s, split="unassigned") for s in songs]
