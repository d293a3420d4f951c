"""Chord-symbol normalization across notation dialects.

Every chord string, whatever its source convention, is reduced to a
canonical (root pitch-class, quality, optional slash bass) tuple drawn
from a fixed 26-quality palette. Out-of-palette extensions are
simplified by degree-set containment: the winning quality is the
largest palette degree-set that is a subset of the parsed degrees,
ties resolved to the smallest palette index.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

PALETTE_FILE = "qualities_v1.tsv"
CLASSED_FILE = "wjazzd_classes_v1.tsv"

# Canonical display names, one per pitch class (mixed sharp/flat, lead-sheet style).
PITCH_NAMES = ["C", "Db", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"]

# Accepted spellings; enharmonic equivalents collapse to one pitch class.
PITCH_SPELLINGS = {
    "C": 0, "B#": 0, "C#": 1, "Db": 1, "D": 2, "D#": 3, "Eb": 3,
    "E": 4, "Fb": 4, "F": 5, "E#": 5, "F#": 6, "Gb": 6, "G": 7,
    "G#": 8, "Ab": 8, "A": 9, "A#": 10, "Bb": 10, "B": 11, "Cb": 11,
}


class NotationError(ValueError):
    """Base class for chord-parsing failures."""


class UnparseableChord(NotationError):
    """The text is not a well-formed chord in the requested dialect."""


class AmbiguousChord(NotationError):
    """Two palette qualities tie under strict containment (palette bug)."""


class Dialect(Enum):
    GUITAR = "guitar"
    IREAL = "ireal"
    INTERVAL = "interval"
    CLASSED = "classed"


@dataclass(frozen=True)
class Quality:
    """One palette entry: a named interval structure above the root."""

    name: str
    degrees: frozenset[int]
    render: str
    index: int

    def __repr__(self) -> str:  # compact in test output
        return f"Quality({self.name})"


@dataclass(frozen=True)
class CanonicalChord:
    """Normalized chord: root pitch class, palette quality, optional bass.

    ``bass`` is present only for slash chords; a bass equal to the root
    is dropped at construction time by the parsers.
    """

    root: int
    quality: Quality
    bass: int | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.root <= 11:
            raise ValueError(f"root out of range: {self.root}")
        if self.bass is not None:
            if not 0 <= self.bass <= 11:
                raise ValueError(f"bass out of range: {self.bass}")
            if self.bass == self.root:
                raise ValueError("bass equal to root must be omitted")


class Palette:
    """The ordered 26-quality table plus lookup indices."""

    def __init__(self, qualities: list[Quality], version: str):
        self.qualities = qualities
        self.version = version
        self.by_name = {q.name: q for q in qualities}
        self.by_degrees = {q.degrees: q for q in qualities}
        if len(self.by_name) != len(qualities):
            raise AmbiguousChord("duplicate quality names in palette")
        if len(self.by_degrees) != len(qualities):
            raise AmbiguousChord("duplicate degree-sets in palette")

    def __len__(self) -> int:
        return len(self.qualities)

    def __iter__(self):
        return iter(self.qualities)


def _read_data_file(name: str) -> list[str]:
    text = resources.files("chordgen.data").joinpath(name).read_text(encoding="utf-8")
    return text.splitlines()


@lru_cache(maxsize=None)
def load_palette() -> Palette:
    """Load the shipped quality palette (cached)."""
    qualities = []
    version = "?"
    for line in _read_data_file(PALETTE_FILE):
        if line.startswith("#"):
            m = re.search(r"version=(\S+)", line)
            if m:
                version = m.group(1)
            continue
        if not line.strip():
            continue
        parts = line.split("\t")
        name, offsets = parts[0], parts[1]
        render = parts[2] if len(parts) > 2 else ""  # empty render = bare root
        degrees = frozenset(int(x) for x in offsets.split(","))
        qualities.append(Quality(name, degrees, render, len(qualities)))
    return Palette(qualities, version)


@lru_cache(maxsize=None)
def _classed_table() -> dict[str, str]:
    table = {}
    for line in _read_data_file(CLASSED_FILE):
        if line.startswith("#") or not line.strip():
            continue
        label, quality = line.split("\t")
        table[label] = quality
    return table


def parse_pitch(name: str) -> int:
    pc = PITCH_SPELLINGS.get(name)
    if pc is None:
        raise UnparseableChord(f"unknown pitch name: {name!r}")
    return pc


def pitch_name(pc: int) -> str:
    return PITCH_NAMES[pc % 12]


def match_by_containment(degrees: set[int] | frozenset[int],
                         palette: Palette | None = None) -> Quality:
    """Largest palette degree-set contained in ``degrees``; ties by index.

    Raises UnparseableChord when no palette set fits at all.
    """
    palette = palette or load_palette()
    best: Quality | None = None
    best_size = -1
    target = frozenset(degrees)
    for q in palette:
        if q.degrees <= target:
            size = len(q.degrees)
            if size > best_size:
                best, best_size = q, size
    if best is None:
        raise UnparseableChord(f"no palette quality fits degrees {sorted(degrees)}")
    return best


def containment_candidates(degrees: set[int] | frozenset[int],
                           palette: Palette | None = None) -> list[Quality]:
    """All maximal-size palette subsets of ``degrees`` (palette-order).

    Used by the palette self-check: more than one candidate for a
    shipped surface string means the palette is degenerate.
    """
    palette = palette or load_palette()
    target = frozenset(degrees)
    subsets = [q for q in palette if q.degrees <= target]
    if not subsets:
        return []
    top = max(len(q.degrees) for q in subsets)
    return [q for q in subsets if len(q.degrees) == top]


# ---------------------------------------------------------------------------
# Dialect surface tables. Exact suffix matches take priority; anything else
# goes through the compositional grammar below and is simplified by
# containment.

_GUITAR_SUFFIXES = {
    "": "maj", "maj": "maj", "M": "maj",
    "m": "min", "min": "min", "-": "min",
    "7": "dom7", "dom7": "dom7",
    "maj7": "maj7", "M7": "maj7", "ma7": "maj7",
    "m7": "min7", "min7": "min7", "-7": "min7",
    "maj9": "maj9", "M9": "maj9",
    "m11": "m11", "min11": "m11",
    "13": "13",
    "13#11": "13#11",
    "mMaj7": "mMaj7", "mM7": "mMaj7", "minmaj7": "mMaj7", "mmaj7": "mMaj7",
    "m(maj7)": "mMaj7",
    "dim7": "dim7", "o7": "dim7",
    "sus2": "sus2",
    "sus4": "sus4", "sus": "sus4",
    "6": "6",
    "m6": "m6", "min6": "m6",
    "9": "9",
    "m9": "m9", "min9": "m9",
    "aug": "aug", "+": "aug",
    "dim": "dim", "o": "dim",
    "m7b5": "halfdim7", "min7b5": "halfdim7", "-7b5": "halfdim7",
    "add9": "add9",
    "7sus4": "7sus4", "7sus": "7sus4",
    "maj13": "maj13", "M13": "maj13",
    "m13": "m13", "min13": "m13",
    "7b9": "7b9",
    "7#9": "7#9",
}

_IREAL_SUFFIXES = {
    "": "maj",
    "^": "maj7", "^7": "maj7",
    "^9": "maj9",
    "^13": "maj13",
    "-": "min",
    "-7": "min7",
    "-9": "m9",
    "-11": "m11",
    "-13": "m13",
    "-6": "m6",
    "-^7": "mMaj7",
    "7": "dom7",
    "9": "9",
    "13": "13",
    "13#11": "13#11",
    "7b9": "7b9",
    "7#9": "7#9",
    "o": "dim", "o7": "dim7",
    "h": "halfdim7", "h7": "halfdim7",
    "+": "aug",
    "2": "sus2", "sus2": "sus2",
    "sus": "sus4", "sus4": "sus4",
    "7sus": "7sus4", "7sus4": "7sus4",
    "6": "6",
    "add9": "add9",
}

_ROOT_RE = re.compile(r"^([A-G](?:#|b)?)(.*)$")
_CORE_RE = re.compile(r"^(maj|min|dim|aug|M|m|o|\+|-)?(69|5|6|7|9|11|13)?(.*)$")


def _suffix_to_degrees(suffix: str) -> set[int]:
    """Compositional fallback: build a degree set from a quality suffix.

    Handles core quality + extension number + alterations/adds. Raises
    UnparseableChord on leftovers it cannot account for.
    """
    s = suffix.replace("(", "").replace(")", "")
    m = _CORE_RE.match(s)
    if m is None:
        raise UnparseableChord(f"malformed quality suffix: {suffix!r}")
    core, ext, rest = m.group(1) or "", m.group(2) or "", m.group(3)

    third, fifth = 4, 7
    seventh = 10  # dominant by default
    if core in ("m", "min", "-"):
        third = 3
    elif core in ("dim", "o"):
        third, fifth, seventh = 3, 6, 9
    elif core in ("aug", "+"):
        fifth = 8
    elif core in ("maj", "M"):
        seventh = 11

    degrees = {0, third, fifth}
    if ext == "5":
        degrees = {0, fifth}
    elif ext == "6":
        degrees.add(9)
    elif ext == "69":
        degrees.update((9, 14))
    elif ext == "7":
        degrees.add(seventh)
    elif ext == "9":
        degrees.update((seventh, 14))
    elif ext == "11":
        degrees.update((seventh, 14, 17))
    elif ext == "13":
        degrees.update((seventh, 14, 21))
        if third == 3:
            degrees.add(17)  # minor 13ths conventionally keep the 11th

    # minor-major sevenths written compositionally (e.g. "mmaj7" miss-cased)
    if rest.lower().startswith(("maj7", "m7")) and core in ("m", "min", "-"):
        degrees.discard(10)
        degrees.add(11)
        rest = rest[4 if rest.lower().startswith("maj7") else 2:]

    alterations = {
        "sus4": lambda d: (d.difference_update({3, 4}), d.add(5)),
        "sus2": lambda d: (d.difference_update({3, 4}), d.add(2)),
        "sus": lambda d: (d.difference_update({3, 4}), d.add(5)),
        "b5": lambda d: (d.discard(7), d.add(6)),
        "#5": lambda d: (d.discard(7), d.add(8)),
        "b9": lambda d: d.add(13),
        "#9": lambda d: d.add(15),
        "#11": lambda d: d.add(18),
        "b13": lambda d: d.add(20),
        "add9": lambda d: d.add(14),
        "add2": lambda d: d.add(14),
        "add11": lambda d: d.add(17),
        "add13": lambda d: d.add(21),
        "6": lambda d: d.add(9),
        "9": lambda d: d.add(14),
    }
    while rest:
        for token, apply in alterations.items():
            if rest.startswith(token):
                apply(degrees)
                rest = rest[len(token):]
                break
        else:
            raise UnparseableChord(f"unrecognized chord suffix fragment: {rest!r}")
    return degrees


def _split_bass(text: str) -> tuple[str, int | None]:
    if "/" in text:
        body, bass_name = text.rsplit("/", 1)
        return body, parse_pitch(bass_name)
    return text, None


def _make_chord(root: int, quality: Quality, bass: int | None) -> CanonicalChord:
    if bass == root:
        bass = None
    return CanonicalChord(root, quality, bass)


def _parse_with_table(text: str, table: dict[str, str],
                      palette: Palette) -> CanonicalChord:
    body, bass = _split_bass(text)
    m = _ROOT_RE.match(body)
    if m is None:
        raise UnparseableChord(f"no root pitch in {text!r}")
    root = parse_pitch(m.group(1))
    suffix = m.group(2)
    name = table.get(suffix)
    if name is not None:
        return _make_chord(root, palette.by_name[name], bass)
    quality = match_by_containment(_suffix_to_degrees(suffix), palette)
    return _make_chord(root, quality, bass)


_INTERVAL_RE = re.compile(r"^([A-G](?:#|b)?)\((\d+(?:,\d+)*)\)$")


def parse_chord(text: str, dialect: Dialect) -> CanonicalChord:
    """Parse one chord symbol in the given dialect to its canonical form."""
    palette = load_palette()
    text = text.strip()
    if not text:
        raise UnparseableChord("empty chord string")

    if dialect is Dialect.GUITAR:
        return _parse_with_table(text, _GUITAR_SUFFIXES, palette)

    if dialect is Dialect.IREAL:
        return _parse_with_table(text, _IREAL_SUFFIXES, palette)

    if dialect is Dialect.CLASSED:
        body, bass = _split_bass(text)
        if ":" not in body:
            raise UnparseableChord(f"classed chord needs ROOT:label, got {text!r}")
        root_name, label = body.split(":", 1)
        root = parse_pitch(root_name)
        name = _classed_table().get(label)
        if name is None:
            raise UnparseableChord(f"unknown chord class label: {label!r}")
        return _make_chord(root, palette.by_name[name], bass)

    if dialect is Dialect.INTERVAL:
        body, bass = _split_bass(text)
        m = _INTERVAL_RE.match(body)
        if m is None:
            raise UnparseableChord(f"interval chord needs ROOT(i,j,...), got {text!r}")
        chord = parse_interval_chord(m.group(1), [int(x) for x in m.group(2).split(",")])
        return _make_chord(chord.root, chord.quality, bass)

    raise UnparseableChord(f"unknown dialect {dialect!r}")


def parse_interval_chord(root: str | int, intervals: list[int]) -> CanonicalChord:
    """Map an interval-notation chord (semitone offsets above root) to canon."""
    pc = root if isinstance(root, int) else parse_pitch(root)
    if not intervals or intervals[0] != 0:
        raise UnparseableChord("interval list must start at 0")
    if any(not 0 <= i <= 23 for i in intervals):
        raise UnparseableChord(f"interval out of range in {intervals}")
    if sorted(intervals) != list(intervals):
        raise UnparseableChord("intervals must be sorted ascending")
    quality = match_by_containment(set(intervals))
    return CanonicalChord(pc % 12, quality)


def render_chord(chord: CanonicalChord) -> str:
    """Deterministic canonical display string (guitar-oriented)."""
    out = pitch_name(chord.root) + chord.quality.render
    if chord.bass is not None:
        out += "/" + pitch_name(chord.bass)
    return out
