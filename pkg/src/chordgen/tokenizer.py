"""The fixed 351-token vocabulary and song <-> token-id conversion.

Layout (ids are stable, serialized with the vocabulary version):

    0..3     structural  PAD, BOS, EOS, BAR
    4..5     genre       <POP>, <JAZZ>
    6..17    key         one per pitch class
    18..38   time        17 supported meters + 4 reserved slots
    39..350  chord       root * 26 + quality index

Sequence layout produced by ``encode``:
``[BOS, genre, key, time, (BAR, chords...)*, EOS]``, truncated to the
model's 256-token window with EOS forced at the final position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .corpus import SongRecord
from .notation import Palette, load_palette, parse_pitch, pitch_name, render_chord, CanonicalChord

log = logging.getLogger(__name__)

MAX_LEN = 256
VOCAB_SIZE = 351

PAD, BOS, EOS, BAR = 0, 1, 2, 3
GENRE_BASE, KEY_BASE, TIME_BASE, CHORD_BASE = 4, 6, 18, 39

GENRES = ("pop", "jazz")
GENRE_PAYLOADS = ("<POP>", "<JAZZ>")

TIME_SIGNATURES = (
    (2, 2),
    (2, 4), (3, 4), (4, 4), (5, 4), (6, 4), (7, 4), (9, 4), (12, 4),
    (2, 8), (3, 8), (4, 8), (5, 8), (6, 8), (7, 8), (9, 8), (12, 8),
)
N_TIME_SLOTS = 21  # supported meters above plus reserved-unused slots


class TokenizerError(ValueError):
    pass


class PaletteMismatch(TokenizerError):
    pass


class UnknownChord(TokenizerError):
    pass


class MalformedSequence(TokenizerError):
    pass


@dataclass(frozen=True)
class Token:
    id: int
    kind: str  # chord | key-signature | time-signature | genre | structural
    payload: str


class Vocabulary:
    """Immutable 351-entry token table."""

    def __init__(self, palette: Palette):
        if len(palette) != 26:
            raise PaletteMismatch(f"palette has {len(palette)} qualities, need 26")
        self.palette = palette
        self.version = f"1-p{palette.version}"
        entries: list[Token] = [
            Token(PAD, "structural", "PAD"),
            Token(BOS, "structural", "BOS"),
            Token(EOS, "structural", "EOS"),
            Token(BAR, "structural", "BAR"),
        ]
        for g, payload in enumerate(GENRE_PAYLOADS):
            entries.append(Token(GENRE_BASE + g, "genre", payload))
        for pc in range(12):
            entries.append(Token(KEY_BASE + pc, "key-signature", pitch_name(pc)))
        for i in range(N_TIME_SLOTS):
            if i < len(TIME_SIGNATURES):
                num, den = TIME_SIGNATURES[i]
                payload = f"{num}/{den}"
            else:
                payload = f"reserved-{i - len(TIME_SIGNATURES) + 1}"
            entries.append(Token(TIME_BASE + i, "time-signature", payload))
        for root in range(12):
            for q in palette:
                entries.append(Token(
                    CHORD_BASE + root * 26 + q.index, "chord",
                    render_chord(CanonicalChord(root, q)),
                ))
        assert len(entries) == VOCAB_SIZE
        self.entries = entries
        self._time_ids = {ts: TIME_BASE + i for i, ts in enumerate(TIME_SIGNATURES)}
        self._genre_ids = {g: GENRE_BASE + i for i, g in enumerate(GENRES)}

    def __len__(self) -> int:
        return VOCAB_SIZE

    def token(self, token_id: int) -> Token:
        return self.entries[token_id]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.entries:
            out[t.kind] = out.get(t.kind, 0) + 1
        return out

    def chord_id(self, chord: CanonicalChord) -> int:
        return CHORD_BASE + chord.root * 26 + chord.quality.index

    def chord_at(self, token_id: int) -> CanonicalChord:
        if not self.is_chord(token_id):
            raise TokenizerError(f"token {token_id} is not a chord")
        offset = token_id - CHORD_BASE
        return CanonicalChord(offset // 26, self.palette.qualities[offset % 26])

    def is_chord(self, token_id: int) -> bool:
        return CHORD_BASE <= token_id < VOCAB_SIZE

    def key_id(self, pc: int) -> int:
        return KEY_BASE + pc % 12

    def time_id(self, meter: tuple[int, int]) -> int:
        tid = self._time_ids.get(tuple(meter))
        if tid is None:
            raise TokenizerError(f"unsupported time signature {meter}")
        return tid

    def genre_id(self, genre: str) -> int:
        gid = self._genre_ids.get(genre)
        if gid is None:
            raise TokenizerError(f"unknown genre tag {genre!r} (need one of {GENRES})")
        return gid


def build_vocab(palette: Palette | None = None) -> Vocabulary:
    """Build the deterministic token table from the quality palette."""
    vocab = Vocabulary(palette or load_palette())
    counts = vocab.counts()
    assert counts == {"structural": 4, "genre": 2, "key-signature": 12,
                      "time-signature": 21, "chord": 312}, counts
    return vocab


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    lines = [f"#chordgen-vocab\tversion={vocab.version}"]
    lines += [f"{t.id}\t{t.kind}\t{t.payload}" for t in vocab.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def verify_vocab_file(vocab: Vocabulary, path: str | Path) -> bool:
    """True when the serialized table matches this vocabulary byte for byte."""
    lines = [f"#chordgen-vocab\tversion={vocab.version}"]
    lines += [f"{t.id}\t{t.kind}\t{t.payload}" for t in vocab.entries]
    return Path(path).read_text(encoding="utf-8") == "\n".join(lines) + "\n"


def encode(song: SongRecord, vocab: Vocabulary, max_len: int = MAX_LEN) -> list[int]:
    """Tokenize one song; see module docstring for the layout."""
    ids = [BOS, vocab.genre_id(song.genre), vocab.key_id(song.key),
           vocab.time_id(song.meter)]
    dropped_basses = 0
    for bar in song.bars:
        ids.append(BAR)
        for chord in bar:
            if chord.bass is not None:
                dropped_basses += 1  # 312 chord tokens carry no bass dimension
            ids.append(vocab.chord_id(CanonicalChord(chord.root, chord.quality)))
    ids.append(EOS)
    if dropped_basses:
        log.debug("encode(%s): dropped %d slash basses", song.id, dropped_basses)
    if len(ids) > max_len:
        ids = ids[:max_len]
        ids[-1] = EOS
    return ids


def decode(seq: list[int], vocab: Vocabulary) -> SongRecord:
    """Rebuild a SongRecord from token ids (inverse of ``encode``)."""
    ids = list(seq)
    while ids and ids[-1] == PAD:
        ids.pop()
    if len(ids) < 4 or ids[0] != BOS:
        raise MalformedSequence("sequence must start with BOS and a full header")
    genre_tok, key_tok, time_tok = (vocab.token(i) for i in ids[1:4])
    if (genre_tok.kind, key_tok.kind, time_tok.kind) != (
            "genre", "key-signature", "time-signature"):
        raise MalformedSequence(
            f"bad header kinds: {genre_tok.kind}, {key_tok.kind}, {time_tok.kind}")
    if time_tok.payload.startswith("reserved"):
        raise MalformedSequence("reserved time-signature slot in header")
    num, den = time_tok.payload.split("/")

    bars: list[list[CanonicalChord]] = []
    for token_id in ids[4:]:
        if token_id == EOS:
            break
        if token_id == BAR:
            bars.append([])
        elif vocab.is_chord(token_id):
            if not bars:
                raise MalformedSequence("chord token before first BAR")
            bars[-1].append(vocab.chord_at(token_id))
        else:
            raise MalformedSequence(
                f"unexpected token {vocab.token(token_id).payload!r} in body")
    return SongRecord(
        id="",
        genre=GENRES[genre_tok.id - GENRE_BASE],
        key=parse_pitch(key_tok.payload),
        meter=(int(num), int(den)),
        bars=bars,
        source="decoded",
    )


def transpose(seq: list[int], semitones: int, vocab: Vocabulary) -> list[int]:
    """Shift chord roots and the key signature by ``semitones`` (mod 12)."""
    out = []
    for token_id in seq:
        if vocab.is_chord(token_id):
            offset = token_id - CHORD_BASE
            root, quality = offset // 26, offset % 26
            out.append(CHORD_BASE + ((root + semitones) % 12) * 26 + quality)
        elif KEY_BASE <= token_id < KEY_BASE + 12:
            out.append(KEY_BASE + (token_id - KEY_BASE + semitones) % 12)
        else:
            out.append(token_id)
    return out


def augment_twelve_keys(seqs: list[list[int]], vocab: Vocabulary) -> list[list[int]]:
    """Twelve-key transposition augmentation, song-major ordering."""
    return [transpose(seq, k, vocab) for seq in seqs for k in range(12)]
