"""Word-level tokenizer and vocabulary.

Tokens are casefolded words plus single punctuation marks. The first six ids
are reserved specials in a fixed order so checkpoints agree on them; [SPT] is
the span marker wrapped around grasp-target names in model output and [IMG]
stands in for vision positions.
"""

import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

PAD, BOS, EOS, SPT, IMG, UNK = "[PAD]", "[BOS]", "[EOS]", "[SPT]", "[IMG]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, SPT, IMG, UNK)
PAD_ID, BOS_ID, EOS_ID, SPT_ID, IMG_ID, UNK_ID = range(len(SPECIALS))

# fixed scaffold words used by the model's prompt format; always in the vocab
PROMPT_SCAFFOLD = "instruction : target :"

_TOKEN_RE = re.compile(r"[a-z0-9]+|[?.,!;:]")


def word_tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.casefold())


@dataclass
class Vocab:
    tokens: List[str]
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocab must start with the specials {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for text in texts:
            words.update(word_tokenize(text))
        words.update(word_tokenize(PROMPT_SCAFFOLD))
        return cls(list(SPECIALS) + sorted(words))

    def encode(self, text: str) -> List[int]:
        return [self.index.get(tok, UNK_ID) for tok in word_tokenize(text)]

    def decode(self, ids: Sequence[int], skip_specials: bool = True) -> str:
        words = []
        for i in ids:
            tok = self.tokens[int(i)]
            if skip_specials and tok in (PAD, BOS, EOS, IMG):
                continue
            words.append(tok)
        return " ".join(words)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)
