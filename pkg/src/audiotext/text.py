"""Word-level tokenizer with reserved ids, and prompt templating."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 77
PLACEHOLDER = "[label]"


class Vocab:
    def __init__(self, words):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        if any(w in RESERVED for w in words):
            raise ValueError("vocabulary words collide with reserved tokens")
        self.words = words
        self.itos = list(RESERVED) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        # one word per line; line number = id - 4
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([w for w in text.split("\n") if w])


def normalize_text(text: str) -> list:
    return text.lower().split()


def build_vocab(corpus) -> Vocab:
    words = set()
    for caption in corpus:
        words.update(normalize_text(caption))
    return Vocab(sorted(words))


@dataclass
class TokenSequence:
    ids: list

    @property
    def pad_mask(self) -> list:
        return [i == PAD for i in self.ids]

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> TokenSequence:
    """BOS + ids + EOS, interior tokens dropped so the total stays <= max_len."""
    body = [vocab.id(w) for w in normalize_text(text)][: max_len - 2]
    return TokenSequence([BOS] + body + [EOS])


def detokenize(ids, vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == BOS or i == PAD:
            continue
        if i == EOS:
            break
        words.append(vocab.token(i))
    return " ".join(words)


def pad_batch(seqs, length: int | None = None) -> np.ndarray:
    """Stack token sequences into a (B, L) int array right-padded with PAD."""
    L = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), L), PAD, dtype=np.int64)
    for b, s in enumerate(seqs):
        ids = s.ids if isinstance(s, TokenSequence) else list(s)
        out[b, : len(ids)] = ids
    return out


def apply_prompt_template(label: str, template: str) -> str:
    if PLACEHOLDER not in template:
        raise ValueError(f"template {template!r} has no {PLACEHOLDER} placeholder")
    return template.replace(PLACEHOLDER, label)
