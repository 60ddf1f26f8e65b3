"""Byte-level data: corpus loading, batching, evaluation windows and a synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..numerics import Rng
from .model import BOS


def encode(text) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.intp)


@dataclass
class Corpus:
    train: np.ndarray  # byte values
    eval: np.ndarray

    @classmethod
    def from_bytes(cls, data: bytes, eval_frac: float = 0.05, min_eval: int = 4096) -> "Corpus":
        arr = encode(data)
        n_eval = min(max(int(len(arr) * eval_frac), min_eval), len(arr) // 2)
        return cls(arr[: len(arr) - n_eval], arr[len(arr) - n_eval:])

    @classmethod
    def from_file(cls, path, **kw) -> "Corpus":
        return cls.from_bytes(Path(path).read_bytes(), **kw)


def with_bos(window: np.ndarray) -> np.ndarray:
    return np.concatenate([[BOS], window]).astype(np.intp)


def sample_batch(data: np.ndarray, batch: int, length: int, rng: Rng) -> np.ndarray:
    """``[batch, length + 1]`` rows of BOS followed by ``length`` consecutive bytes."""
    if len(data) < length + 1:
        raise ContractError(f"corpus has {len(data)} bytes, need at least {length + 1}")
    starts = rng.integers(0, len(data) - length + 1, size=batch)
    rows = np.stack([data[s:s + length] for s in starts])
    return np.concatenate([np.full((batch, 1), BOS, dtype=np.intp), rows], axis=1)


def eval_windows(data: np.ndarray, length: int, n_windows: int) -> np.ndarray:
    """Evenly spaced, non-overlapping held-out windows (BOS-prefixed)."""
    n_avail = len(data) // length
    if n_avail < 1:
        raise ContractError(f"eval split has {len(data)} bytes, need at least {length}")
    idx = np.linspace(0, n_avail - 1, min(n_windows, n_avail)).round().astype(int)
    idx = np.unique(idx)
    return np.stack([with_bos(data[i * length:(i + 1) * length]) for i in idx])


# -- synthetic corpus -----------------------------------------------------------

_ONSETS = ["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "dr", "gl", "kr", "pl", "sh", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ou"]
_CODAS = ["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st"]
_COLORS = ["red", "blue", "green", "grey", "white", "black", "gold", "violet"]
_PLACES = ["hill", "river", "forest", "town", "harbor", "valley", "mill", "tower"]


def _word(rng: Rng, n_syll: int) -> str:
    return "".join(_ONSETS[rng.integers(0, len(_ONSETS))] + _VOWELS[rng.integers(0, len(_VOWELS))]
                   + _CODAS[rng.integers(0, len(_CODAS))] for _ in range(n_syll))


def _lexicon(rng: Rng, n: int, lo: int, hi: int) -> list:
    words = set()
    while len(words) < n:
        words.add(_word(rng, int(rng.integers(lo, hi + 1))))
    return sorted(words)


def _zipf(rng: Rng, n: int, size=None):
    w = 1.0 / np.arange(1, n + 1)
    return rng.choice(n, size=size, p=w / w.sum())


def synthetic_corpus(n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    """Deterministic English-like text with structure at several ranges.

    A fixed world of nouns, verbs and adjectives (Zipf-distributed) produces
    sentences with number agreement, stable facts (each noun has one colour
    and one home), short arithmetic lines and paragraphs that keep a topic.
    """
    rng = Rng(seed)
    nouns = _lexicon(rng, 300, 1, 3)
    verbs = _lexicon(rng, 120, 1, 2)
    adjs = _lexicon(rng, 80, 1, 2)
    color_of = {n: _COLORS[rng.integers(0, len(_COLORS))] for n in nouns}
    home_of = {n: _PLACES[rng.integers(0, len(_PLACES))] for n in nouns}

    def noun_phrase(topic):
        i = topic[_zipf(rng, len(topic))] if rng.uniform(()) < 0.7 else nouns[_zipf(rng, len(nouns))]
        plural = rng.uniform(()) < 0.3
        adj = adjs[_zipf(rng, len(adjs))] + " " if rng.uniform(()) < 0.4 else ""
        return f"the {adj}{i}{'s' if plural else ''}", plural, i

    def sentence(topic):
        kind = rng.uniform(())
        if kind < 0.55:
            subj, plural, _ = noun_phrase(topic)
            verb = verbs[_zipf(rng, len(verbs))] + ("" if plural else "s")
            obj, _, _ = noun_phrase(topic)
            return f"{subj} {verb} {obj}."
        if kind < 0.75:
            _, _, n = noun_phrase(topic)
            return f"the {n} is {color_of[n]}."
        if kind < 0.9:
            _, _, n = noun_phrase(topic)
            return f"the {n} lives by the {home_of[n]}."
        a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
        return f"{a} plus {b} is {a + b}."

    parts, size = [], 0
    while size < n_bytes:
        topic = [nouns[i] for i in _zipf(rng, len(nouns), size=12)]
        para = " ".join(sentence(topic) for _ in range(int(rng.integers(3, 9))))
        para = para[0].upper() + para[1:] + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]
