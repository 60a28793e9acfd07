"""Byte-level BPE tokenizer backed by a versioned merges asset.

Text is lowercased and whitespace-collapsed, split into words, and each word
is encoded as UTF-8 bytes that are then merged by rank. The last symbol of a
word carries an end-of-word marker, as in CLIP's tokenizer.
"""

from __future__ import annotations

import functools
import json
import re
from importlib import resources
from pathlib import Path

import torch

from .errors import TokenizerError

VOCAB_ASSET = "bpe_vocab_v1.json"
PAD, SOT, EOT = "<pad>", "<sot>", "<eot>"
END_OF_WORD = "</w>"

_WORD_RE = re.compile(r"[^\W\d_]+|\d|[^\s\w]+|_+", re.UNICODE)
_BYTE_SYMBOLS = [bytes([b]).decode("latin-1") for b in range(256)]


def words(text: str) -> list[str]:
    return _WORD_RE.findall(" ".join(text.lower().split()))


def word_symbols(word: str) -> list[str]:
    """Initial (unmerged) symbol sequence of one word."""
    symbols = list(word.encode("utf-8").decode("latin-1"))
    symbols[-1] += END_OF_WORD
    return symbols


class BPETokenizer:
    def __init__(self, merges: list[tuple[str, str]], version: int = 1):
        self.version = version
        self.merges = [tuple(m) for m in merges]
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        vocab = [PAD, SOT, EOT] + _BYTE_SYMBOLS + [s + END_OF_WORD for s in _BYTE_SYMBOLS]
        vocab += ["".join(pair) for pair in self.merges]
        self.encoder = {sym: i for i, sym in enumerate(vocab)}
        if len(self.encoder) != len(vocab):
            raise TokenizerError("merges asset produces duplicate vocabulary entries")
        self.decoder = vocab
        self.pad_id = self.encoder[PAD]
        self.sot_id = self.encoder[SOT]
        self.eot_id = self.encoder[EOT]
        self._cache: dict[str, list[int]] = {}

    @classmethod
    def from_file(cls, path) -> "BPETokenizer":
        payload = json.loads(Path(path).read_text())
        return cls(payload["merges"], version=payload.get("version", 1))

    @property
    def vocab_size(self) -> int:
        return len(self.decoder)

    def _bpe(self, word: str) -> list[int]:
        if word in self._cache:
            return self._cache[word]
        symbols = word_symbols(word)
        while len(symbols) > 1:
            pairs = [(self.ranks.get(p, float("inf")), i) for i, p in enumerate(zip(symbols, symbols[1:]))]
            rank, i = min(pairs)
            if rank == float("inf"):
                break
            symbols[i : i + 2] = [symbols[i] + symbols[i + 1]]
        ids = [self.encoder[s] for s in symbols]
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        if not isinstance(text, str):
            raise TokenizerError(f"cannot encode non-string input {text!r}")
        try:
            text.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise TokenizerError(f"cannot encode text {text!r}: {exc.reason}") from exc
        ids: list[int] = []
        for w in words(text):
            ids.extend(self._bpe(w))
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (self.pad_id, self.sot_id, self.eot_id):
                continue
            out.append(self.decoder[i])
        raw = "".join(out).replace(END_OF_WORD, " ")
        return raw.encode("latin-1").decode("utf-8", errors="replace").strip()

    def __call__(self, texts, context_length: int) -> torch.Tensor:
        """Tokenize a list of strings into a (N, context_length) int64 tensor.

        Every row is ``<sot> tokens... <eot> <pad>...``; over-long texts are
        truncated so that the end token always survives.
        """
        if isinstance(texts, str):
            texts = [texts]
        if len(texts) == 0:
            raise TokenizerError("tokenize needs at least one string")
        if context_length <= 2:
            raise TokenizerError(f"context_length must exceed 2 (got {context_length})")
        rows = torch.full((len(texts), context_length), self.pad_id, dtype=torch.long)
        for r, text in enumerate(texts):
            body = self.encode(text)[: context_length - 2]
            ids = [self.sot_id, *body, self.eot_id]
            rows[r, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return rows


@functools.lru_cache(maxsize=None)
def default_tokenizer() -> BPETokenizer:
    asset = resources.files("clipag.assets").joinpath(VOCAB_ASSET)
    return BPETokenizer.from_file(asset)


def tokenize(texts, context_length: int = 16) -> torch.Tensor:
    return default_tokenizer()(texts, context_length)


def learn_merges(corpus_words: dict[str, int], num_merges: int, min_count: int = 2) -> list[tuple[str, str]]:
    """Greedy BPE merge learning over a word-frequency table."""
    seqs = {w: word_symbols(w) for w in corpus_words}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: dict[tuple[str, str], int] = {}
        for w, syms in seqs.items():
            for pair in zip(syms, syms[1:]):
                counts[pair] = counts.get(pair, 0) + corpus_words[w]
        if not counts:
            break
        # ties broken lexicographically so the asset is reproducible
        best = max(counts.items(), key=lambda kv: (kv[1], [-ord(c) for c in "".join(kv[0])]))
        if best[1] < min_count:
            break
        pair = best[0]
        merges.append(pair)
        merged = "".join(pair)
        for w, syms in seqs.items():
            i, out = 0, []
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            seqs[w] = out
    return merges
