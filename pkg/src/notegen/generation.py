"""Decoding and likelihood scoring on top of the incremental model API.

Beam search keeps a pool of finished hypotheses (EOS reached, or cut off at
max_len) and reports the winner's log-probability by teacher-forced
rescoring, so the returned value is exactly the sum of the per-token scores
that score_tokens would assign to the same tokens. Ranking ties anywhere
are broken toward the lexicographically smallest token sequence, and argmax
ties toward the lowest token id, which keeps every decode deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ModelConfig,
    ModelParams,
    decode_step,
    init_decode_state,
    target_logits,
)
from .tokenizer import EOS_ID, TokenSeq


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 2
    max_len: int = 500
    eos_id: int = EOS_ID
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass(frozen=True)
class TokenScores:
    """Per-position realized-token log-probs plus top-k alternatives."""

    token_logprobs: tuple[float, ...]
    alternatives: tuple[tuple[tuple[int, float], ...], ...]

    @property
    def total_logprob(self) -> float:
        return float(sum(self.token_logprobs))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def _top_ids(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, descending; ties favor lower ids."""
    return np.argsort(-values, kind="stable")[:k]


def score_tokens(
    params: ModelParams,
    cfg: ModelConfig,
    context_tokens: TokenSeq,
    note_tokens: TokenSeq,
    k: int = 5,
) -> TokenScores:
    """log P(w_i | context, w_<i) for each note token, from one forward pass."""
    rows = target_logits(params, cfg, context_tokens, note_tokens)
    logprobs = []
    alts = []
    for i, tok in enumerate(note_tokens):
        ls = _log_softmax(rows[i])
        logprobs.append(float(ls[tok]))
        probs = np.exp(ls)
        top = _top_ids(probs, k)
        alts.append(tuple((int(t), float(probs[t])) for t in top))
    return TokenScores(tuple(logprobs), tuple(alts))


def topk_next(
    params: ModelParams,
    cfg: ModelConfig,
    context_tokens: TokenSeq,
    prefix_tokens: TokenSeq,
    k: int = 5,
) -> list[tuple[int, float]]:
    """The k most likely next tokens after prefix_tokens, descending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = target_logits(params, cfg, context_tokens, prefix_tokens)
    probs = np.exp(_log_softmax(rows[len(prefix_tokens)]))
    return [(int(t), float(probs[t])) for t in _top_ids(probs, k)]


@dataclass(frozen=True)
class _Beam:
    score: float
    tokens: tuple[int, ...]
    state: object
    logits: np.ndarray


def _rank_key(score: float, tokens: tuple[int, ...], normalize: bool):
    value = score / len(tokens) if normalize and tokens else score
    return (-value, tokens)


def beam_decode(
    params: ModelParams,
    cfg: ModelConfig,
    context_tokens: TokenSeq,
    dcfg: DecodeConfig = DecodeConfig(),
) -> tuple[TokenSeq, float]:
    """Beam-search a note; returns (tokens, log-prob of those tokens).

    The token list includes the trailing EOS when decoding terminated on
    it; hypotheses still alive at max_len compete without one. The reported
    log-prob is a teacher-forced rescore of the winning tokens, so it equals
    sum(score_tokens(...).token_logprobs) exactly.
    """
    state, logits = init_decode_state(params, cfg, context_tokens)
    live = [_Beam(0.0, (), state, logits)]
    finished: list[tuple[float, tuple[int, ...]]] = []

    for _ in range(dcfg.max_len):
        candidates: list[_Beam] = []
        for beam in live:
            ls = _log_softmax(beam.logits)
            for tok in _top_ids(ls, dcfg.beam_size):
                candidates.append(
                    _Beam(beam.score + float(ls[tok]), beam.tokens + (int(tok),),
                          beam.state, beam.logits)
                )
        candidates.sort(key=lambda b: _rank_key(b.score, b.tokens, False))
        next_live: list[_Beam] = []
        for cand in candidates:
            if cand.tokens[-1] == dcfg.eos_id:
                finished.append((cand.score, cand.tokens))
            elif len(next_live) < dcfg.beam_size:
                new_state, new_logits = decode_step(
                    params, cfg, cand.state, cand.tokens[-1]
                )
                next_live.append(
                    _Beam(cand.score, cand.tokens, new_state, new_logits)
                )
        live = next_live
        if not live:
            break
        if finished and not dcfg.length_normalize:
            best_done = min(_rank_key(s, t, False) for s, t in finished)
            best_live = min(_rank_key(b.score, b.tokens, False) for b in live)
            # live scores only ever decrease, so nothing can beat best_done
            if best_live >= best_done:
                break
    finished.extend((b.score, b.tokens) for b in live)

    _, tokens = min(
        finished, key=lambda st: _rank_key(st[0], st[1], dcfg.length_normalize)
    )
    rescored = score_tokens(params, cfg, context_tokens, list(tokens), k=1)
    return list(tokens), rescored.total_logprob


def greedy_decode(
    params: ModelParams,
    cfg: ModelConfig,
    context_tokens: TokenSeq,
    max_len: int = 500,
    eos_id: int = EOS_ID,
) -> tuple[TokenSeq, float]:
    """Pure argmax rollout; equivalent to beam_size=1 but cheaper."""
    return beam_decode(
        params, cfg, context_tokens, DecodeConfig(beam_size=1, max_len=max_len,
                                                  eos_id=eos_id)
    )
