"""Evaluation suite: log-perplexity, next-token accuracy, ROUGE, demographics.

ROUGE is computed from scratch (lowercase, whitespace tokens, optional
Porter stemming, clipped n-gram counts) and B-R1 re-scores after removing
note lines that a weak type+hint-only baseline also produced — line removal
is by exact text match against the baseline's lines, which makes stripping
idempotent. Scores are percentages in [0, 100].
"""

from __future__ import annotations

import logging
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .generation import DecodeConfig, beam_decode
from .model import ModelConfig, ModelParams, forward, loss, make_batch
from .tokenizer import EOS_ID, Vocab

log = logging.getLogger(__name__)


# --- Porter stemmer -----------------------------------------------------------------

def _is_cons(w: str, i: int) -> bool:
    c = w[i]
    if c in "aeiou":
        return False
    if c == "y":
        return i == 0 or not _is_cons(w, i - 1)
    return True


def _measure(w: str) -> int:
    """Number of vowel→consonant transitions (the m of [C](VC)^m[V])."""
    m = 0
    i = 0
    n = len(w)
    while i < n and _is_cons(w, i):
        i += 1
    while i < n:
        while i < n and not _is_cons(w, i):
            i += 1
        if i >= n:
            break
        m += 1
        while i < n and _is_cons(w, i):
            i += 1
    return m


def _has_vowel(w: str) -> bool:
    return any(not _is_cons(w, i) for i in range(len(w)))


def _double_cons(w: str) -> bool:
    return len(w) >= 2 and w[-1] == w[-2] and _is_cons(w, len(w) - 1)


def _ends_cvc(w: str) -> bool:
    return (
        len(w) >= 3
        and _is_cons(w, len(w) - 3)
        and not _is_cons(w, len(w) - 2)
        and _is_cons(w, len(w) - 1)
        and w[-1] not in "wxy"
    )


_STEP2 = (
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
)
_STEP3 = (
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
)
_STEP4 = (
    "ement", "ment", "ent", "ance", "ence", "able", "ible", "ant", "ion",
    "ism", "ate", "iti", "ous", "ive", "ize", "al", "er", "ic", "ou",
)


def porter_stem(word: str) -> str:
    """The 1980 Porter algorithm; words of length <= 2 pass through."""
    w = word.lower()
    if len(w) <= 2:
        return w
    # 1a: plurals
    if w.endswith("sses") or w.endswith("ies"):
        w = w[:-2]
    elif not w.endswith("ss") and w.endswith("s"):
        w = w[:-1]
    # 1b: -ed / -ing
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        shed = None
        if w.endswith("ed") and _has_vowel(w[:-2]):
            shed = w = w[:-2]
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            shed = w = w[:-3]
        if shed is not None:
            if w.endswith(("at", "bl", "iz")):
                w += "e"
            elif _double_cons(w) and not w.endswith(("l", "s", "z")):
                w = w[:-1]
            elif _measure(w) == 1 and _ends_cvc(w):
                w += "e"
    # 1c: terminal y
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"
    # 2 and 3: suffix normalization at m > 0; longest suffix wins, then stop
    for table in (_STEP2, _STEP3):
        for suf, rep in table:
            if w.endswith(suf):
                if _measure(w[: -len(suf)]) > 0:
                    w = w[: -len(suf)] + rep
                break
    # 4: strip residual suffixes at m > 1
    for suf in _STEP4:
        if w.endswith(suf):
            stem = w[: -len(suf)]
            if _measure(stem) > 1 and (suf != "ion" or stem.endswith(("s", "t"))):
                w = stem
            break
    # 5a: terminal e
    if w.endswith("e"):
        m = _measure(w[:-1])
        if m > 1 or (m == 1 and not _ends_cvc(w[:-1])):
            w = w[:-1]
    # 5b: -ll at m > 1
    if _measure(w) > 1 and _double_cons(w) and w.endswith("l"):
        w = w[:-1]
    return w


# --- ROUGE --------------------------------------------------------------------------

@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def _grams(text: str, n: int, stem: bool) -> Counter:
    tokens = text.lower().split()
    if stem:
        tokens = [porter_stem(t) for t in tokens]
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int = 1, stem: bool = True) -> RougeScore:
    """Clipped n-gram overlap F1 (percent)."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    cand = _grams(candidate, n, stem)
    ref = _grams(reference, n, stem)
    total_c = sum(cand.values())
    total_r = sum(ref.values())
    if total_c == 0 or total_r == 0:
        return RougeScore(0.0, 0.0, 0.0)
    overlap = sum((cand & ref).values())
    p = overlap / total_c
    r = overlap / total_r
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return RougeScore(100 * p, 100 * r, 100 * f1)


# --- token-level metrics ------------------------------------------------------------

LogitsFn = Callable[[list, list], np.ndarray]


def _pairs(examples) -> list[tuple[list, list]]:
    out = []
    for ex in examples:
        if hasattr(ex, "input_tokens"):
            out.append((ex.input_tokens, ex.target_tokens))
        else:
            out.append((ex[0], ex[1]))
    return out


def _token_stats(params, cfg, examples, batch_size, logits_fn: LogitsFn | None):
    """(total NLL, total correct, total tokens) over target tokens plus EOS."""
    pairs = _pairs(examples)
    total_nll = 0.0
    correct = 0
    count = 0
    if logits_fn is not None:
        for inp, tgt in pairs:
            labels = list(tgt) + [EOS_ID]
            rows = np.asarray(logits_fn(list(inp), labels), dtype=np.float64)
            z = rows - rows.max(-1, keepdims=True)
            lse = np.log(np.exp(z).sum(-1))
            for i, tok in enumerate(labels):
                total_nll += lse[i] - z[i, tok]
                correct += int(np.argmax(rows[i]) == tok)
            count += len(labels)
        return total_nll, correct, count
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(cfg, pairs[start : start + batch_size])
        n = batch.n_target_tokens
        total_nll += loss(params, cfg, batch) * n
        logits, _ = forward(params, cfg, batch)
        hits = (logits.argmax(-1) == batch.labels) & batch.label_mask
        correct += int(hits.sum())
        count += n
    return total_nll, correct, count


def log_perplexity(params, cfg, examples, batch_size: int = 16,
                   logits_fn: LogitsFn | None = None) -> float:
    """Mean NLL in nats per target token; identical arithmetic to training loss."""
    nll, _, count = _token_stats(params, cfg, examples, batch_size, logits_fn)
    return nll / max(count, 1)


def next_token_accuracy(params, cfg, examples, batch_size: int = 16,
                        logits_fn: LogitsFn | None = None) -> float:
    """Percent of target positions where the argmax prediction is the truth."""
    _, correct, count = _token_stats(params, cfg, examples, batch_size, logits_fn)
    return 100.0 * correct / max(count, 1)


# --- demographics -------------------------------------------------------------------

@dataclass(frozen=True)
class Demographics:
    age: int | None = None
    sex: str | None = None

    def __post_init__(self):
        if self.age is not None and self.age < 0:
            raise ValueError("age must be >= 0")
        if self.sex not in (None, "M", "F"):
            raise ValueError("sex must be M or F")


_AGE_RE = re.compile(
    r"\b(\d+)[\s-]*(?:year[\s-]*old|y\.?\s*o\.?|yo)(?![a-z])", re.IGNORECASE
)
# bare "m"/"f" are anchored to word boundaries; mid-word letters never match
_SEX_FIELD_RE = re.compile(r"\bsex:\s*(m|f)\b", re.IGNORECASE)
_MALE_RE = re.compile(r"\b(?:male|man|m)\b", re.IGNORECASE)
_FEMALE_RE = re.compile(r"\b(?:woman|female|f)\b", re.IGNORECASE)


def extract_demographics(text: str) -> Demographics:
    """First age pattern and earliest sex pattern in the text, if any."""
    age = None
    m = _AGE_RE.search(text)
    if m:
        age = int(m.group(1))
    candidates = []
    f = _SEX_FIELD_RE.search(text)
    if f:
        candidates.append((f.start(), f.group(1).upper()))
    mm = _MALE_RE.search(text)
    if mm:
        candidates.append((mm.start(), "M"))
    fm = _FEMALE_RE.search(text)
    if fm:
        candidates.append((fm.start(), "F"))
    sex = min(candidates)[1] if candidates else None
    return Demographics(age=age, sex=sex)


def demographic_accuracy(
    notes: Sequence[str], truths: Sequence[Demographics]
) -> tuple[float, float]:
    """(sex accuracy %, age accuracy %); a missing extraction counts as wrong.

    Age is correct within +/- 1 year of the truth.
    """
    if len(notes) != len(truths):
        raise ValueError("notes and truths must align")
    if not notes:
        return 0.0, 0.0
    sex_ok = 0
    age_ok = 0
    for text, truth in zip(notes, truths):
        got = extract_demographics(text)
        if truth.sex is not None and got.sex == truth.sex:
            sex_ok += 1
        if truth.age is not None and got.age is not None and abs(got.age - truth.age) <= 1:
            age_ok += 1
    return 100.0 * sex_ok / len(notes), 100.0 * age_ok / len(notes)


# --- boilerplate removal ------------------------------------------------------------

def strip_boilerplate(note: str, baseline_note: str) -> tuple[str, float]:
    """Drop note lines that appear verbatim in the baseline's generation.

    Returns (stripped note, removed fraction measured in characters).
    """
    if not note:
        return "", 0.0
    base_lines = set(baseline_note.split("\n"))
    kept = [line for line in note.split("\n") if line not in base_lines]
    stripped = "\n".join(kept)
    return stripped, 1.0 - len(stripped) / len(note)


# --- full evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    log_ppl: float
    acc: float
    r1: float
    r2: float
    b_r1: float
    boilerplate_removed_fraction: float
    sex_acc: float
    age_acc: float
    n_examples: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    vocab: Vocab,
    examples: Sequence,
    *,
    baseline_params: ModelParams | None = None,
    baseline_cfg: ModelConfig | None = None,
    baseline_examples: Sequence | None = None,
    sample_size: int = 4096,
    seed: int = 0,
    beam_size: int = 2,
    decode_max_len: int = 500,
    batch_size: int = 16,
) -> MetricsReport:
    """Beam-decode a fixed-seed sample of the test set and score everything.

    baseline_* describe the type+hint-only model used to identify
    boilerplate; baseline_examples must align index-for-index with examples.
    Without a baseline, B-R1 degenerates to R1 with nothing removed.
    """
    if not examples:
        raise ValueError("empty test set")
    if baseline_params is not None and baseline_examples is None:
        raise ValueError("baseline_examples required with baseline_params")
    if baseline_examples is not None and len(baseline_examples) != len(examples):
        raise ValueError("baseline_examples must align with examples")

    n = len(examples)
    idxs = sorted(random.Random(seed).sample(range(n), min(sample_size, n)))
    sampled = [examples[i] for i in idxs]

    log_ppl = log_perplexity(params, cfg, sampled, batch_size)
    acc = next_token_accuracy(params, cfg, sampled, batch_size)

    dcfg = DecodeConfig(beam_size=beam_size, max_len=decode_max_len)
    r1_sum = r2_sum = b_sum = frac_sum = 0.0
    notes = []
    truths = []
    for pos, ex in zip(idxs, sampled):
        inp, tgt = _pairs([ex])[0]
        cand_tokens, _ = beam_decode(params, cfg, inp, dcfg)
        cand = vocab.decode_text(cand_tokens)
        ref = vocab.decode_text(tgt)
        r1_sum += rouge_n(cand, ref, 1).f1
        r2_sum += rouge_n(cand, ref, 2).f1
        if baseline_params is not None:
            base_inp = _pairs([baseline_examples[pos]])[0][0]
            base_tokens, _ = beam_decode(baseline_params, baseline_cfg, base_inp, dcfg)
            base = vocab.decode_text(base_tokens)
        else:
            base = ""
        s_cand, frac = strip_boilerplate(cand, base)
        s_ref, _ = strip_boilerplate(ref, base)
        b_sum += rouge_n(s_cand, s_ref, 1).f1
        frac_sum += frac
        meta = getattr(ex, "meta", None) or {}
        if "gender" in meta:
            notes.append(cand)
            truths.append(Demographics(age=meta.get("age"), sex=meta["gender"]))
    sex_acc, age_acc = demographic_accuracy(notes, truths) if notes else (0.0, 0.0)

    k = len(sampled)
    return MetricsReport(
        log_ppl=log_ppl,
        acc=acc,
        r1=r1_sum / k,
        r2=r2_sum / k,
        b_r1=b_sum / k,
        boilerplate_removed_fraction=frac_sum / k,
        sex_acc=sex_acc,
        age_acc=age_acc,
        n_examples=k,
    )
