"""Editing aids built on token likelihoods: error flagging and autocomplete.

A token is suspicious when its log-probability sits more than k_sigma
standard deviations below the note's own mean — the threshold adapts to how
predictable each note is overall. Flags are reported per whitespace word: a
word is flagged if any subword token inside it is, and suggestions for the
word come from the top alternatives at its first token, each greedily
extended to a word boundary so multi-token replacements read as words.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ehr import DRUG_CATALOG
from .generation import _log_softmax, score_tokens, topk_next
from .model import ModelConfig, ModelParams, decode_step, init_decode_state
from .tokenizer import BYTE_BASE, EOS_ID, TokenSeq, Vocab

_WORD_RE = re.compile(r"\S+")
# how many extra tokens a suggestion may greedily absorb before giving up
# on reaching a word boundary
_MAX_WORD_EXTENSION = 8


@dataclass(frozen=True)
class AnomalyFlag:
    start: int                # first token index of the flagged word
    end: int                  # one past the last token index
    word: str
    char_start: int           # offsets into the decoded note text
    char_end: int
    logprob: float            # lowest token log-prob inside the span
    mean: float
    std: float
    suggestions: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class Completion:
    tokens: tuple[str, ...]
    joint_prob: float
    horizon: int


@dataclass(frozen=True)
class CorruptedNote:
    text: str
    span: tuple[int, int]     # char offsets of the replacement
    original: str
    replacement: str


def _token_texts(vocab: Vocab, tokens: TokenSeq) -> list[str]:
    return [
        "" if t < BYTE_BASE else vocab.token_text(t)
        for t in tokens
    ]


def _extend_to_word(params, cfg, vocab, state, token):
    """Greedily grow a candidate token until whitespace ends the word.

    `state` is the decode state just before the candidate; branching from it
    is safe because decode states are immutable.
    """
    if token < BYTE_BASE:
        return ""
    text = vocab.token_text(token)
    cur = token
    for _ in range(_MAX_WORD_EXTENSION):
        if not text or text[-1].isspace():
            break
        state, logits = decode_step(params, cfg, state, cur)
        nxt = int(np.argmax(logits))
        if nxt < BYTE_BASE:
            break
        piece = vocab.token_text(nxt)
        if not piece or piece[0].isspace():
            break
        text += piece
        cur = nxt
    return text.strip()


def detect_anomalies(
    params: ModelParams,
    cfg: ModelConfig,
    vocab: Vocab,
    context_tokens: TokenSeq,
    note_tokens: TokenSeq,
    k_sigma: float = 2.0,
    max_suggestions: int = 5,
) -> list[AnomalyFlag]:
    """Flag whitespace words whose tokens score below mean - k_sigma * std.

    Notes with fewer than two tokens have no usable spread and yield no
    flags; so do constant-likelihood notes (std 0).
    """
    if len(note_tokens) < 2 or not math.isfinite(k_sigma):
        return []
    scored = score_tokens(params, cfg, context_tokens, note_tokens,
                          k=max_suggestions)
    lp = np.asarray(scored.token_logprobs)
    mean = float(lp.mean())
    std = float(lp.std())
    threshold = mean - k_sigma * std
    low = lp < threshold
    if not low.any():
        return []

    texts = _token_texts(vocab, note_tokens)
    offsets = [0]
    for t in texts:
        offsets.append(offsets[-1] + len(t))
    note_text = "".join(texts)

    # each token belongs to the word holding its first visible character;
    # tokens here can span several words, and anchoring at the start keeps
    # one surprising token from flagging everything it happens to touch
    words = list(_WORD_RE.finditer(note_text))
    members_of: dict[int, list[int]] = {}
    wi = 0
    for i, t in enumerate(texts):
        stripped = t.lstrip()
        if not stripped:
            continue
        pos = offsets[i] + (len(t) - len(stripped))
        while wi < len(words) and words[wi].end() <= pos:
            wi += 1
        if wi < len(words) and words[wi].start() <= pos:
            members_of.setdefault(wi, []).append(i)

    # one decode sweep through the note; branch off it at each flagged word
    state, _ = init_decode_state(params, cfg, context_tokens)
    fed = 0

    flags: list[AnomalyFlag] = []
    for wi, w in enumerate(words):
        members = members_of.get(wi, [])
        if not members or not any(low[i] for i in members):
            continue
        first = members[0]
        while fed < first:
            state, _ = decode_step(params, cfg, state, note_tokens[fed])
            fed += 1
        suggestions = []
        for token, prob in scored.alternatives[first]:
            word = _extend_to_word(params, cfg, vocab, state, token)
            if word:
                suggestions.append((word, prob))
        flags.append(
            AnomalyFlag(
                start=first,
                end=members[-1] + 1,
                word=w.group(),
                char_start=w.start(),
                char_end=w.end(),
                logprob=float(lp[members].min()),
                mean=mean,
                std=std,
                suggestions=tuple(suggestions),
            )
        )
    return flags


def corrupt_note(
    note: str,
    meds: Sequence[str],
    seed: int,
    catalog: Sequence[str] = DRUG_CATALOG,
) -> CorruptedNote | None:
    """Swap one in-note drug mention for a different catalog drug.

    Returns None when the note mentions none of the given meds.
    """
    mentions = []
    for med in meds:
        for m in re.finditer(rf"\b{re.escape(med)}\b", note, re.IGNORECASE):
            mentions.append((m.start(), m.end(), m.group()))
    if not mentions:
        return None
    mentions.sort()
    rng = random.Random(seed)
    start, end, original = mentions[rng.randrange(len(mentions))]
    choices = [d for d in catalog if d.lower() != original.lower()]
    replacement = rng.choice(choices)
    return CorruptedNote(
        text=note[:start] + replacement + note[end:],
        span=(start, start + len(replacement)),
        original=original,
        replacement=replacement,
    )


def autocomplete(
    params: ModelParams,
    cfg: ModelConfig,
    vocab: Vocab,
    context_tokens: TokenSeq,
    prefix_tokens: TokenSeq,
    horizon: int = 1,
    k: int = 5,
) -> list[Completion]:
    """Top-k continuations of the prefix: single tokens, or beams of a few.

    horizon=1 is exactly topk_next; longer horizons beam-search k paths and
    report joint probabilities. Paths may stop early at EOS.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon == 1:
        return [
            Completion((vocab.token_text(t) if t >= BYTE_BASE else "",), p, 1)
            for t, p in topk_next(params, cfg, context_tokens, prefix_tokens, k)
        ]
    state, logits = init_decode_state(params, cfg, context_tokens)
    for tok in prefix_tokens:
        state, logits = decode_step(params, cfg, state, tok)
    beams = [(0.0, (), state, logits)]
    done: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(horizon):
        grown = []
        for logp, toks, st, lg in beams:
            ls = _log_softmax(lg)
            for t in np.argsort(-ls, kind="stable")[:k]:
                grown.append((logp + float(ls[t]), toks + (int(t),), st, lg))
        grown.sort(key=lambda b: (-b[0], b[1]))
        beams = []
        for logp, toks, st, _ in grown:
            if toks[-1] == EOS_ID:
                done.append((logp, toks))
            elif len(beams) < k:
                st2, lg2 = decode_step(params, cfg, st, toks[-1])
                beams.append((logp, toks, st2, lg2))
    done.extend((logp, toks) for logp, toks, _, _ in beams)
    done.sort(key=lambda b: (-b[0], b[1]))
    out = []
    for logp, toks in done[:k]:
        words = tuple(
            vocab.token_text(t) if t >= BYTE_BASE else "" for t in toks
        )
        out.append(Completion(words, math.exp(logp), horizon))
    return out
