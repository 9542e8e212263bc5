"""Byte-level BPE tokenizer with a fixed context window.

Vocabulary layout: ids 0..255 are raw bytes, then one id per learned merge
(in merge order), then the two specials (start, end) at the top.  Id 0 is the
NUL byte, which never occurs in real text, so it doubles as padding.  Text is
lowercased before encoding.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from typing import Iterable, Sequence

import torch

from .errors import TokenizationError

N_BYTE_TOKENS = 256
PAD_ID = 0
DEFAULT_CONTEXT_LEN = 77
_ASSET_NAME = "bpe_merges.json"


class Tokenizer:
    def __init__(self, merges: Sequence[tuple[str, str]], context_len: int = DEFAULT_CONTEXT_LEN):
        self.context_len = context_len
        self.merges: list[tuple[str, str]] = [tuple(m) for m in merges]
        # token id <-> string table; merge tokens are concatenations of
        # previously known token strings, so ids are assigned in merge order.
        self._token_strings: list[str] = [chr(i) for i in range(N_BYTE_TOKENS)]
        self._id_of: dict[str, int] = {s: i for i, s in enumerate(self._token_strings)}
        self._merge_rank: dict[tuple[int, int], int] = {}
        self._merge_result: dict[tuple[int, int], int] = {}
        for rank, (left, right) in enumerate(self.merges):
            if left not in self._id_of or right not in self._id_of:
                raise TokenizationError(f"merge {rank} references unknown token")
            new_id = len(self._token_strings)
            merged = left + right
            self._token_strings.append(merged)
            self._id_of[merged] = new_id
            key = (self._id_of[left], self._id_of[right])
            self._merge_rank[key] = rank
            self._merge_result[key] = new_id
        self.start_id = len(self._token_strings)
        self.end_id = self.start_id + 1
        self.vocab_size = len(self._token_strings) + 2

    # -- encoding ---------------------------------------------------------

    def _bpe(self, ids: list[int]) -> list[int]:
        while len(ids) > 1:
            best_rank = None
            best_pos = -1
            for i in range(len(ids) - 1):
                rank = self._merge_rank.get((ids[i], ids[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pos = i
            if best_rank is None:
                break
            pair = (ids[best_pos], ids[best_pos + 1])
            new_id = self._merge_result[pair]
            out = []
            i = 0
            while i < len(ids):
                if i < len(ids) - 1 and (ids[i], ids[i + 1]) == pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def encode(self, text: str, truncate: bool = False) -> list[int]:
        """Token ids including start/end.  Raises TokenizationError when the
        sequence exceeds the context window, unless truncate is set."""
        body = self._bpe(list(text.lower().encode("utf-8")))
        ids = [self.start_id] + body + [self.end_id]
        if len(ids) > self.context_len:
            if not truncate:
                raise TokenizationError(
                    f"text needs {len(ids)} tokens, context window is {self.context_len}"
                )
            ids = ids[: self.context_len - 1] + [self.end_id]
        return ids

    def encode_batch(self, texts: Iterable[str], truncate: bool = False) -> torch.Tensor:
        """(B, context_len) int64 tensor, right-padded with the pad id."""
        rows = []
        for text in texts:
            ids = self.encode(text, truncate=truncate)
            rows.append(ids + [PAD_ID] * (self.context_len - len(ids)))
        if not rows:
            return torch.zeros((0, self.context_len), dtype=torch.int64)
        return torch.tensor(rows, dtype=torch.int64)

    def decode(self, ids: Iterable[int]) -> str:
        chunks = []
        for i in ids:
            if i in (self.start_id, self.end_id, PAD_ID):
                continue
            if not 0 <= i < len(self._token_strings):
                raise TokenizationError(f"token id {i} out of range")
            chunks.append(self._token_strings[i])
        return "".join(chunks).encode("latin-1").decode("utf-8", errors="replace")

    # -- identity ---------------------------------------------------------

    @property
    def identifier(self) -> str:
        digest = hashlib.sha256(
            json.dumps(self.merges, separators=(",", ":")).encode("utf-8")
        ).hexdigest()[:12]
        return f"bpe-{len(self.merges)}m-{digest}"

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        payload = {"merges": [list(m) for m in self.merges], "context_len": self.context_len}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=0)

    @classmethod
    def from_file(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        return cls(payload["merges"], context_len=payload.get("context_len", DEFAULT_CONTEXT_LEN))

    @classmethod
    def default(cls) -> "Tokenizer":
        text = resources.files("grain.assets").joinpath(_ASSET_NAME).read_text("utf-8")
        payload = json.loads(text)
        return cls(payload["merges"], context_len=payload.get("context_len", DEFAULT_CONTEXT_LEN))


def train_merges(corpus: Iterable[str], num_merges: int) -> list[tuple[str, str]]:
    """Greedy BPE merge learning over lowercased utf-8 byte sequences.

    Ties on pair frequency break lexicographically for determinism.
    """
    token_strings = [chr(i) for i in range(N_BYTE_TOKENS)]
    id_of = {s: i for i, s in enumerate(token_strings)}
    sequences = [list(line.lower().encode("utf-8")) for line in corpus if line.strip()]
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts: dict[tuple[int, int], int] = {}
        for seq in sequences:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best_pair = min(
            counts,
            key=lambda p: (-counts[p], token_strings[p[0]], token_strings[p[1]]),
        )
        if counts[best_pair] < 2:
            break
        left, right = token_strings[best_pair[0]], token_strings[best_pair[1]]
        new_id = len(token_strings)
        token_strings.append(left + right)
        id_of[left + right] = new_id
        merges.append((left, right))
        for si, seq in enumerate(sequences):
            out = []
            i = 0
            while i < len(seq):
                if i < len(seq) - 1 and (seq[i], seq[i + 1]) == best_pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            sequences[si] = out
    return merges
