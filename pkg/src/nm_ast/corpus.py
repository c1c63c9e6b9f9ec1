"""Byte-level corpus handling and a deterministic synthetic text generator.

The generator produces English-like paragraphs from a small topic-biased
grammar. It exists so every experiment can run without downloading data; any
UTF-8 or binary file works as a corpus too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod

_TOPICS = {
    "sea": dict(
        noun="ship sailor harbour wave captain island storm lighthouse anchor gull net whale tide reef".split(),
        adj="salty grey restless distant calm broken northern wet".split(),
        verb="sailed watched crossed pulled followed repaired lost found".split(),
        place="harbour coast bay island shore dock".split(),
    ),
    "city": dict(
        noun="street painter market train baker window clerk tower bridge lamp crowd cafe".split(),
        adj="busy narrow old bright crowded quiet tall dusty".split(),
        verb="opened closed painted sold visited crossed cleaned built".split(),
        place="square station market avenue district park".split(),
    ),
    "forest": dict(
        noun="fox owl hunter tree river path deer wolf cabin mushroom stone fire".split(),
        adj="dark green ancient silent wild golden cold deep".split(),
        verb="hunted gathered climbed heard chased burned carried buried".split(),
        place="valley forest hill river meadow ridge".split(),
    ),
    "school": dict(
        noun="teacher student book lesson letter garden bell map chalk desk question answer".split(),
        adj="young clever patient careful curious strict happy tired".split(),
        verb="read wrote answered learned drew asked taught forgot".split(),
        place="classroom library hall garden yard office".split(),
    ),
}
_NAMES = "Anna Boris Clara David Elena Felix Greta Hugo Ida Jonas Karin Leo Mira Nils Olga Peter".split()
_ADVERBS = "slowly quickly quietly carefully suddenly happily often never always again".split()
_PREPS = "near behind beside under across toward inside".split()
_TIMES = "in the morning|at night|before dawn|after the rain|on a Sunday|in winter|all day".split("|")
_SAYS = "said|asked|whispered|shouted|replied".split("|")


_ONSETS = "b br c ch d dr f fl g gr h k l m n p pl r s sh st t th tr v w".split()
_VOWELS = "a e i o u ai ea ou ie".split()
_CODAS = ["", "", "", "n", "r", "l", "s", "th", "nd", "st", "m", "ck"]


def _pseudo_words(rng: np.random.Generator, count: int, taken: set, suffix: str = "") -> list[str]:
    """``count`` distinct pronounceable non-words of one to three syllables."""
    words: list[str] = []
    while len(words) < count:
        syl = int(rng.integers(1, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        w += _CODAS[rng.integers(len(_CODAS))] + suffix
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


# tail sizes of the generated lexicon; real words keep the head of every Zipf list
_TAIL = dict(noun=300, adj=100, verb=100, place=60)
_NAME_TAIL = 200


def _lexicon(seed: int) -> tuple[dict, list[str]]:
    """Topic word lists extended with a long tail of generated words.

    A few hundred rare word forms per topic give the text a long-tailed
    vocabulary whose spellings a small model has to spend capacity on.
    """
    rng = rng_mod.stream(seed, "corpus/lexicon")
    taken = {w.lower() for t in _TOPICS.values() for ws in t.values() for w in ws}
    taken.update(n.lower() for n in _NAMES)
    topics = {}
    for name, t in _TOPICS.items():
        topics[name] = {
            k: list(v) + _pseudo_words(rng, _TAIL[k], taken, "ed" if k == "verb" else "")
            for k, v in t.items()
        }
    names = list(_NAMES) + [w.capitalize() for w in _pseudo_words(rng, _NAME_TAIL, taken)]
    return topics, names


def _zipf_choice(rng: np.random.Generator, items: list[str], s: float = 1.1) -> str:
    w = 1.0 / np.arange(1, len(items) + 1) ** s
    return items[rng.choice(len(items), p=w / w.sum())]


def _sentence(rng: np.random.Generator, t: dict, names: list[str]) -> str:
    noun = lambda: _zipf_choice(rng, t["noun"])  # noqa: E731
    adj = lambda: _zipf_choice(rng, t["adj"])  # noqa: E731
    kind = rng.integers(0, 6)
    if kind == 0:
        s = f"The {adj()} {noun()} {_zipf_choice(rng, t['verb'])} the {noun()} {_zipf_choice(rng, _PREPS)} the {_zipf_choice(rng, t['place'])}."
    elif kind == 1:
        s = f"{_zipf_choice(rng, names)} {_zipf_choice(rng, _ADVERBS)} {_zipf_choice(rng, t['verb'])} a {adj()} {noun()} {_zipf_choice(rng, _TIMES)}."
    elif kind == 2:
        s = f"\"Where is the {noun()}?\" {_zipf_choice(rng, _SAYS)} {_zipf_choice(rng, names)}."
    elif kind == 3:
        n = int(rng.integers(2, 40))
        s = f"There were {n} {noun()}s in the {_zipf_choice(rng, t['place'])}, and each one was {adj()}."
    elif kind == 4:
        s = f"Nobody {_zipf_choice(rng, t['verb'])} the {noun()} until {_zipf_choice(rng, names)} came {_zipf_choice(rng, _TIMES)}."
    else:
        s = f"It was a {adj()} day, so the {noun()} and the {noun()} {_zipf_choice(rng, t['verb'])} nothing."
    return s


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like text of exactly ``n_bytes`` bytes."""
    rng = rng_mod.stream(seed, "corpus")
    lexicon, names = _lexicon(seed)
    topics = list(lexicon)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        t = lexicon[topics[rng.integers(0, len(topics))]]
        para = " ".join(_sentence(rng, t, names) for _ in range(int(rng.integers(3, 8))))
        out.append(para + "\n\n")
        size += len(para) + 2
    return "".join(out).encode("ascii")[:n_bytes]


def tokenize(raw: bytes) -> np.ndarray:
    """Byte-level tokens (vocabulary 256)."""
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray

    @classmethod
    def from_bytes(cls, raw: bytes, val_fraction: float = 0.1) -> "Corpus":
        """The last ``val_fraction`` of the bytes is the validation split."""
        tokens = tokenize(raw)
        cut = int(round(tokens.size * (1 - val_fraction)))
        return cls(tokens[:cut], tokens[cut:])

    @classmethod
    def from_file(cls, path, val_fraction: float = 0.1) -> "Corpus":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), val_fraction)


class BatchSampler:
    """Random training windows; the draw for step ``t`` depends only on ``(seed, t)``."""

    def __init__(self, tokens: np.ndarray, batch_size: int, seq_len: int, seed: int, name: str = "batches"):
        if tokens.size < seq_len + 2:
            raise ValueError(f"training split of {tokens.size} tokens is shorter than one window of {seq_len + 1}")
        if tokens.size < batch_size * (seq_len + 1):
            raise ValueError("corpus shorter than one batch")
        self.tokens = tokens
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.name = name

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        r = rng_mod.stream(self.seed, f"{self.name}/{step}")
        starts = r.integers(0, self.tokens.size - self.seq_len - 1, size=self.batch_size)
        idx = starts[:, None] + np.arange(self.seq_len + 1)[None, :]
        w = self.tokens[idx]
        return w[:, :-1], w[:, 1:]
