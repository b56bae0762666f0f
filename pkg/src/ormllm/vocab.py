"""Word-level vocabulary over the closed templated corpus.

The file format is one token per line, where the line number is the id,
preceded by a fixed 4-line reserved block: PAD, BOS, EOS and the task
marker for scene-graph serialization. The mapping is bijective.
"""

from __future__ import annotations

from .errors import CompatibilityError, DomainError

PAD, BOS, EOS, SGG_TASK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sgg>")


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED)]) != list(RESERVED):
            raise CompatibilityError(
                f"vocabulary must begin with the reserved block {RESERVED}"
            )
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise CompatibilityError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_corpus(cls, texts) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(text.split())
        words -= set(RESERVED)
        return cls(list(RESERVED) + sorted(words))

    def encode(self, text: str) -> list[int]:
        out = []
        for word in text.split():
            if word not in self.ids:
                raise DomainError(f"token {word!r} is not in the vocabulary")
            out.append(self.ids[word])
        return out

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise DomainError(f"token id {i} outside the vocabulary")
            words.append(self.tokens[int(i)])
        return " ".join(words)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)
