"""Word-level tokenizer with character fallback and optional cross-word merges.

Known words map to a single id. Unknown words are split into character
pieces (``w`` ``##o`` ``##r`` ``##d``), so one word can span several
positions. A merge rule joins two adjacent words into one token, which is
how a span boundary can end up inside a token.
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

PAD = "<pad>"
UNK = "<unk>"
BOS = "<bos>"
NL = "<nl>"
IM_START = "<im_start>"
IM_END = "<im_end>"
ITEM_OPEN = "<<<"
ITEM_CLOSE = ">>>"

SPECIALS = (PAD, UNK, BOS, NL, IM_START, IM_END, ITEM_OPEN, ITEM_CLOSE)
MARKERS = (IM_START, IM_END, ITEM_OPEN, ITEM_CLOSE)
_MARKER_RE = re.compile("(" + "|".join(re.escape(m) for m in MARKERS) + r"|\n)")
_CONT = "##"


class Tokenizer:
    def __init__(self, tokens: Sequence[str], merges: Iterable[tuple[str, str]] = ()):
        self.id_to_token: list[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.merges: dict[tuple[str, str], str] = {}
        for a, b in merges:
            merged = f"{a} {b}"
            self.merges[(a, b)] = merged
            if merged not in self.token_to_id:
                self.token_to_id[merged] = len(self.id_to_token)
                self.id_to_token.append(merged)

    @classmethod
    def build(cls, texts: Iterable[str], words: Iterable[str] = (), merges: Iterable[tuple[str, str]] = ()) -> "Tokenizer":
        """Vocabulary from whitespace words in ``texts`` plus every character seen (as pieces)."""
        vocab: dict[str, None] = dict.fromkeys(SPECIALS)
        chars: dict[str, None] = {}
        all_words = list(words)
        for text in texts:
            for piece in _MARKER_RE.split(text):
                if piece in MARKERS or piece == "\n":
                    continue
                all_words.extend(piece.split())
        for w in all_words:
            vocab.setdefault(w)
            chars.update(dict.fromkeys(w))
        for c in chars:
            vocab.setdefault(c)
            vocab.setdefault(_CONT + c)
        return cls(list(vocab), merges)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def _word_ids(self, word: str) -> list[int]:
        tid = self.token_to_id.get(word)
        if tid is not None:
            return [tid]
        out = []
        for i, ch in enumerate(word):
            piece = ch if i == 0 else _CONT + ch
            out.append(self.token_to_id.get(piece, self.token_to_id[UNK]))
        return out

    def encode_words(self, words: Sequence[str]) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids plus, per word, its ``[start, end)`` token offsets.

        Two words joined by a merge share the same offsets.
        """
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        i = 0
        while i < len(words):
            if i + 1 < len(words) and (words[i], words[i + 1]) in self.merges:
                pos = len(ids)
                ids.append(self.token_to_id[self.merges[(words[i], words[i + 1])]])
                offsets += [(pos, pos + 1), (pos, pos + 1)]
                i += 2
                continue
            pos = len(ids)
            ids.extend(self._word_ids(words[i]))
            offsets.append((pos, len(ids)))
            i += 1
        return ids, offsets

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in _MARKER_RE.split(text):
            if piece in MARKERS:
                ids.append(self.token_to_id[piece])
            elif piece == "\n":
                ids.append(self.token_to_id[NL])
            elif piece.strip():
                ids.extend(self.encode_words(piece.split())[0])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        prev: str | None = None
        for i in ids:
            tok = self.id_to_token[int(i)]
            if tok in (PAD, BOS):
                continue
            if tok == NL:
                out.append("\n")
            elif tok in MARKERS:
                if tok == ITEM_OPEN and prev == ITEM_CLOSE:
                    out.append(" ")
                out.append(tok)
            elif tok.startswith(_CONT) and len(tok) > len(_CONT):
                out.append(tok[len(_CONT):])
            else:
                if prev is not None and prev not in (NL, IM_START, ITEM_OPEN):
                    out.append(" ")
                out.append(tok)
            prev = tok
        return "".join(out)

    def save(self, path: str | Path) -> None:
        data = {
            "format": "fsner-vocab/1",
            "tokens": self.id_to_token,
            "merges": [list(k) for k in self.merges],
        }
        Path(path).write_text(json.dumps(data, ensure_ascii=False, indent=0), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["tokens"], [tuple(m) for m in data["merges"]])
