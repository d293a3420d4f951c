"""Autoregressive continuation sampling with temperature and nucleus filter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import SongRecord
from .model import Model, ModelCheckpoint
from .notation import Dialect, parse_chord
from .autodiff import Tensor
from .tokenizer import BAR, CHORD_BASE, EOS, VOCAB_SIZE, Vocabulary, encode


class InvalidDistribution(ValueError):
    pass


class PromptTooLong(ValueError):
    pass


@dataclass(frozen=True)
class SampleParams:
    top_p: float = 0.9
    temperature: float = 0.8
    max_new_tokens: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


@dataclass(frozen=True)
class PromptSpec:
    name: str
    genre: str
    key: int
    meter: tuple[int, int]
    bars: tuple[tuple[str, ...], ...]   # chord strings, guitar dialect
    mode: str = "major"

    def to_song(self) -> SongRecord:
        return SongRecord(
            id=f"prompt:{self.name}",
            genre=self.genre,
            key=self.key,
            meter=self.meter,
            bars=[[parse_chord(c, Dialect.GUITAR) for c in bar]
                  for bar in self.bars],
            source="prompt",
            mode=self.mode,
        )

    def prefix_ids(self, vocab: Vocabulary) -> list[int]:
        ids = encode(self.to_song(), vocab)
        return ids[:-1] if ids[-1] == EOS else ids


def builtin_prompts() -> list[PromptSpec]:
    """The five evaluation prompts (jazz turnaround spelled I-VI7-ii-V7)."""
    return [
        PromptSpec("pop_i_vi_ii_v_c", "pop", 0, (4, 4),
                   (("C",), ("Am",), ("Dm",), ("G",))),
        PromptSpec("pop_i_v_vi_iv_g", "pop", 7, (4, 4),
                   (("G",), ("D",), ("Em",), ("C",))),
        PromptSpec("jazz_ii_v_i_c", "jazz", 0, (4, 4),
                   (("Dm7", "G7"), ("Cmaj7",))),
        PromptSpec("jazz_turnaround_bb", "jazz", 10, (4, 4),
                   (("Bbmaj7",), ("G7",), ("Cm7",), ("F7",))),
        PromptSpec("jazz_minor_ii_v_abm", "jazz", 11, (4, 4),
                   (("Bbm7b5",), ("Eb7",), ("Abm",)), mode="minor"),
    ]


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest prefix (descending probability, ties by lower
    token id) whose cumulative mass reaches ``p``; zero and renormalize
    the rest. ``p == 1`` (or a fully kept prefix) returns the input
    unchanged."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise InvalidDistribution("expected a 1-D distribution")
    if (probs < 0).any() or abs(float(probs.sum()) - 1.0) > 1e-9:
        raise InvalidDistribution("probabilities must be >= 0 and sum to 1")
    order = np.lexsort((np.arange(probs.size), -probs))
    cumulative = np.cumsum(probs[order])
    keep_len = int(np.searchsorted(cumulative, p, side="left")) + 1
    if keep_len >= probs.size:
        return probs
    kept = order[:keep_len]
    out = np.zeros_like(probs)
    out[kept] = probs[kept]
    return out / out.sum()


# Tokens permitted while generating the continuation body: chords, bar
# lines, and EOS. Header/PAD tokens would make the output undecodable.
_BODY_TOKENS = np.zeros(VOCAB_SIZE, dtype=bool)
_BODY_TOKENS[BAR] = True
_BODY_TOKENS[EOS] = True
_BODY_TOKENS[CHORD_BASE:] = True


def sample_continuation(ckpt: ModelCheckpoint, prompt: PromptSpec,
                        params: SampleParams, vocab: Vocabulary) -> list[int]:
    """Extend the prompt until EOS or ``max_new_tokens``; returns the full
    token sequence (prompt included), which always decodes cleanly."""
    prefix = prompt.prefix_ids(vocab)
    max_len = ckpt.config.max_len
    if len(prefix) >= max_len:
        raise PromptTooLong(f"prompt occupies {len(prefix)} of {max_len} positions")
    eval_params = {k: Tensor(t.data) for k, t in ckpt.params.items()}
    model = Model(ckpt.config, eval_params)
    rng = np.random.Generator(np.random.PCG64(params.seed))

    seq = list(prefix)
    for _ in range(params.max_new_tokens):
        logits = model.forward(np.array([seq], dtype=np.int64)).data[0, -1]
        z = logits / params.temperature
        z[~_BODY_TOKENS] = -np.inf  # mask before max-subtraction
        z = z - z.max()
        probs = np.exp(z)
        probs = probs / probs.sum()
        probs = nucleus_filter(probs, params.top_p)
        token = int(rng.choice(VOCAB_SIZE, p=probs))
        seq.append(token)
        if token == EOS or len(seq) >= max_len:
            break
    return seq


def flag_overfull_bars(song: SongRecord, max_chords_per_bar: int = 8) -> list[int]:
    """Post-hoc sanity check: indices of bars longer than the limit."""
    return [i for i, bar in enumerate(song.bars)
            if len(bar) > max_chords_per_bar]
