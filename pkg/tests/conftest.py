import random

import pytest

from chordgen.corpus import SongRecord
from chordgen.notation import CanonicalChord, load_palette
from chordgen.tokenizer import TIME_SIGNATURES, build_vocab


@pytest.fixture(scope="session")
def vocab():
    return build_vocab()


def make_random_song(rng: random.Random, song_id: str = "s",
                     with_bass: bool = False) -> SongRecord:
    """Random song over the full palette (bass-free by default: the token
    table carries no bass dimension, so round-trip fixtures omit it)."""
    palette = load_palette()
    bars = []
    for _ in range(rng.randint(1, 20)):
        bar = []
        for _ in range(rng.randint(1, 4)):
            root = rng.randrange(12)
            quality = palette.qualities[rng.randrange(26)]
            bass = None
            if with_bass and rng.random() < 0.2:
                bass = rng.choice([b for b in range(12) if b != root])
            bar.append(CanonicalChord(root, quality, bass))
        bars.append(bar)
    return SongRecord(
        id=song_id,
        genre=rng.choice(["pop", "jazz"]),
        key=rng.randrange(12),
        meter=rng.choice(TIME_SIGNATURES),
        bars=bars,
        source="testgen",
    )
