"""Byte-level subword vocabulary trained by pair merging.

The vocabulary starts from 256 byte tokens plus a fixed block of reserved ids
(PAD, EOS, and the eight grammar markers) and grows by repeatedly merging the
most frequent adjacent token pair in the training corpus. Encoding falls back
to raw bytes, so every string round-trips losslessly, whitespace included.
Reserved ids are never produced by merges and never emitted when encoding
plain text.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .markers import MARKER_ORDER, Marker

VOCAB_FORMAT_VERSION = 1

PAD_ID = 0
EOS_ID = 1
_N_SPECIAL = 2
N_RESERVED = _N_SPECIAL + len(MARKER_ORDER)
BYTE_BASE = N_RESERVED
FIRST_MERGE_ID = BYTE_BASE + 256
FULL_SCALE_VOCAB_SIZE = 32000
DESK_SCALE_VOCAB_SIZE = 4096

MARKER_TO_ID = {m: _N_SPECIAL + i for i, m in enumerate(MARKER_ORDER)}
ID_TO_MARKER = {i: m for m, i in MARKER_TO_ID.items()}

TokenSeq = list[int]
MarkedText = list[Union[str, Marker]]


class VocabError(ValueError):
    """Bad vocabulary configuration or file."""


class TokenIdError(ValueError):
    """Token id outside the vocabulary."""


@dataclass
class Vocab:
    """Subword vocabulary: reserved ids, byte tokens, and an ordered merge list."""

    merges: list[tuple[int, int]]
    _token_bytes: list[bytes] = field(init=False, repr=False)
    _ranks: dict[tuple[int, int], int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        toks: list[bytes] = [b""] * N_RESERVED + [bytes([b]) for b in range(256)]
        for a, b in self.merges:
            if a < BYTE_BASE or b < BYTE_BASE or a >= len(toks) or b >= len(toks):
                raise VocabError(f"merge ({a},{b}) references an invalid token id")
            toks.append(toks[a] + toks[b])
        self._token_bytes = toks
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    def token_text(self, token_id: int) -> str:
        """Printable form of one token (reserved tokens use their debug name)."""
        if token_id == PAD_ID:
            return "<PAD>"
        if token_id == EOS_ID:
            return "<EOS>"
        if token_id in ID_TO_MARKER:
            return ID_TO_MARKER[token_id].printed
        return self.token_bytes(token_id).decode("utf-8", errors="replace")

    def token_bytes(self, token_id: int) -> bytes:
        if not BYTE_BASE <= token_id < self.size:
            raise TokenIdError(f"id {token_id} is not a text token (size {self.size})")
        return self._token_bytes[token_id]

    def encode(self, value: Union[str, MarkedText]) -> TokenSeq:
        """Encode a string or marked segment list; markers map to reserved ids."""
        if isinstance(value, str):
            return self._encode_text(value)
        out: TokenSeq = []
        for seg in value:
            if isinstance(seg, Marker):
                out.append(MARKER_TO_ID[seg])
            else:
                out.extend(self._encode_text(seg))
        return out

    def decode(self, ids: Sequence[int]) -> Union[str, MarkedText]:
        """Invert encode. PAD/EOS ids are dropped; marker ids become Marker segments.

        Returns a plain string when no marker id is present, else a MarkedText.
        """
        segments: MarkedText = []
        buf = bytearray()
        has_marker = False
        for tid in ids:
            tid = int(tid)
            if tid < 0 or tid >= self.size:
                raise TokenIdError(f"id {tid} out of range for vocab of size {self.size}")
            if tid in (PAD_ID, EOS_ID):
                continue
            if tid in ID_TO_MARKER:
                has_marker = True
                if buf:
                    segments.append(buf.decode("utf-8", errors="replace"))
                    buf = bytearray()
                segments.append(ID_TO_MARKER[tid])
            else:
                buf.extend(self._token_bytes[tid])
        if not has_marker:
            return buf.decode("utf-8", errors="replace")
        if buf:
            segments.append(buf.decode("utf-8", errors="replace"))
        return segments

    def decode_text(self, ids: Sequence[int]) -> str:
        """Decode ignoring any marker ids (their text contribution is empty)."""
        out = self.decode(ids)
        if isinstance(out, str):
            return out
        return "".join(seg for seg in out if isinstance(seg, str))

    def _encode_text(self, text: str) -> TokenSeq:
        ids = [BYTE_BASE + b for b in text.encode("utf-8")]
        if len(ids) < 2 or not self._ranks:
            return ids
        return _apply_merges(ids, self._ranks, self.merges)


def _apply_merges(ids: list[int], ranks: dict[tuple[int, int], int],
                  merges: list[tuple[int, int]]) -> list[int]:
    """Apply merges in training order (lowest rank first, leftmost first).

    Linked-list representation with a lazy heap of (rank, position) candidates;
    stale entries are skipped by re-checking the pair at pop time.
    """
    n = len(ids)
    val = list(ids)
    nxt = list(range(1, n)) + [-1]
    prv = [-1] + list(range(n - 1))
    alive = [True] * n

    heap: list[tuple[int, int]] = []
    for i in range(n - 1):
        r = ranks.get((val[i], val[i + 1]))
        if r is not None:
            heap.append((r, i))
    heapq.heapify(heap)

    while heap:
        rank, i = heapq.heappop(heap)
        if not alive[i]:
            continue
        j = nxt[i]
        if j == -1 or not alive[j]:
            continue
        if ranks.get((val[i], val[j])) != rank:
            continue  # stale entry
        val[i] = FIRST_MERGE_ID + rank
        alive[j] = False
        k = nxt[j]
        nxt[i] = k
        if k != -1:
            prv[k] = i
            r = ranks.get((val[i], val[k]))
            if r is not None:
                heapq.heappush(heap, (r, i))
        p = prv[i]
        if p != -1:
            r = ranks.get((val[p], val[i]))
            if r is not None:
                heapq.heappush(heap, (r, p))

    return [v for v, a in zip(val, alive) if a]


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Induce a vocabulary by byte-pair merging over the corpus.

    Repeatedly merges the most frequent adjacent pair; ties break toward the
    pair whose first occurrence in the current token stream comes earliest.
    Stops at target_size or when no pair occurs twice. Pairs never span
    document boundaries. Deterministic for a fixed corpus.
    """
    max_merges = target_size - FIRST_MERGE_ID
    if max_merges < 0:
        raise VocabError(
            f"target_size {target_size} is below the {FIRST_MERGE_ID} byte+reserved floor"
        )

    chunks: list[np.ndarray] = []
    for doc in corpus:
        raw = np.frombuffer(doc.encode("utf-8"), dtype=np.uint8)
        if raw.size:
            chunks.append(raw.astype(np.int32) + BYTE_BASE)
            chunks.append(np.array([-1], dtype=np.int32))  # document boundary
    if not chunks:
        return Vocab(merges=[])
    arr = np.concatenate(chunks)

    merges: list[tuple[int, int]] = []
    next_id = FIRST_MERGE_ID
    for _ in range(max_merges):
        if arr.size < 2:
            break
        left = arr[:-1].astype(np.int64)
        right = arr[1:].astype(np.int64)
        valid = (left >= 0) & (right >= 0)
        codes = left[valid] * next_id + right[valid]
        if codes.size == 0:
            break
        uniq, first_idx, counts = np.unique(codes, return_index=True, return_counts=True)
        best_count = counts.max()
        if best_count < 2:
            break
        tied = counts == best_count
        winner = uniq[tied][np.argmin(first_idx[tied])]
        a, b = int(winner // next_id), int(winner % next_id)
        merges.append((a, b))
        arr = _merge_in_corpus(arr, a, b, next_id)
        next_id += 1

    return Vocab(merges=merges)


def _merge_in_corpus(arr: np.ndarray, a: int, b: int, new_id: int) -> np.ndarray:
    """Replace every (a, b) adjacency with new_id, greedy left-to-right."""
    hits = np.where((arr[:-1] == a) & (arr[1:] == b))[0]
    if a == b:
        kept = []
        last = -2
        for p in hits.tolist():
            if p == last + 1:
                continue  # overlaps the pair just merged
            kept.append(p)
            last = p
        hits = np.asarray(kept, dtype=np.int64)
    if hits.size == 0:
        return arr
    arr = arr.copy()
    arr[hits] = new_id
    keep = np.ones(arr.size, dtype=bool)
    keep[hits + 1] = False
    return arr[keep]


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    payload = {
        "version": VOCAB_FORMAT_VERSION,
        "reserved": {
            "pad": PAD_ID,
            "eos": EOS_ID,
            "markers": {m.name: MARKER_TO_ID[m] for m in MARKER_ORDER},
        },
        "merges": [[a, b] for a, b in vocab.merges],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VocabError(f"{path}: not a vocab file ({exc})") from exc
    version = payload.get("version")
    if version != VOCAB_FORMAT_VERSION:
        raise VocabError(f"{path}: unsupported vocab format version {version!r}")
    return Vocab(merges=[(int(a), int(b)) for a, b in payload["merges"]])
