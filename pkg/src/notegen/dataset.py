"""Supervised dataset construction with patient-disjoint splits.

One example per note: the serialized, truncated context as input tokens and
the (truncated) note itself as target tokens. Patients are assigned to
train/validation/test by a seeded hash so the assignment is stable when the
cohort grows, and no patient ever straddles two splits.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .context import (
    CONTEXT_TOKEN_LIMIT,
    RecordContext,
    extract_context,
    serialize_context,
    truncate_context,
)
from .ehr import CohortStore
from .markers import Marker
from .tokenizer import MarkedText, TokenSeq, Vocab

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")
DEFAULT_RATIOS = (0.85, 0.075, 0.075)
TARGET_TOKEN_LIMIT = 500
ALL_PARTS = "dmln"  # demographics, meds, labs, past notes


@dataclass
class Example:
    input_tokens: TokenSeq
    target_tokens: TokenSeq
    meta: dict = field(default_factory=dict)


def split_patients(
    ids: Iterable[int],
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> dict[int, str]:
    """Assign each subject_id to a split by hashing (seed, id) into [0, 1).

    The assignment of a given id depends only on (id, seed, ratios), so adding
    patients never moves existing ones between splits.
    """
    if len(ratios) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    edges = []
    acc = 0.0
    for r in ratios[:-1]:
        acc += r
        edges.append(acc)

    assignment: dict[int, str] = {}
    for sid in ids:
        digest = hashlib.sha256(f"{seed}:{sid}".encode()).digest()
        u = int.from_bytes(digest[:8], "big") / 2**64
        split = SPLIT_NAMES[-1]
        for name, edge in zip(SPLIT_NAMES, edges):
            if u < edge:
                split = name
                break
        assignment[sid] = split
    return assignment


def serialize_ablated(ctx: RecordContext, parts: str = ALL_PARTS) -> MarkedText:
    """Serialize a context, emitting payload text only for the named parts.

    Markers always appear (constant structure); withheld parts contribute no
    text. With all parts included this equals serialize_context exactly.
    Part letters: d = gender+age, m = meds, l = labs, n = past notes.
    """
    unknown = set(parts) - set(ALL_PARTS)
    if unknown:
        raise ValueError(f"unknown context parts {sorted(unknown)}")
    if set(parts) == set(ALL_PARTS):
        return serialize_context(ctx)

    out: MarkedText = []
    if ctx.hint:
        out.append(ctx.hint)
    out.append(Marker.HINT)
    if ctx.note_type:
        out.append(ctx.note_type)
    out.append(Marker.NOTE_TYPE)
    if "d" in parts:
        out.append(ctx.gender)
        out.append(Marker.GENDER)
        out.append(str(ctx.age_years))
    else:
        out.append(Marker.GENDER)
    out.append(Marker.AGE)
    if "m" in parts:
        for i, med in enumerate(ctx.meds):
            if i:
                out.append(Marker.DELIM)
            if med:
                out.append(med)
    out.append(Marker.MEDS)
    if "l" in parts:
        for i, lab in enumerate(ctx.labs):
            if i:
                out.append(Marker.DELIM)
            out.append(lab.render())
    out.append(Marker.LABS)
    if "n" in parts:
        for i, note in enumerate(ctx.past_notes):
            if i:
                out.append(Marker.NOTE)
            if note:
                out.append(note)
    return out


def build_examples(
    store: CohortStore,
    splits: dict[int, str],
    vocab: Vocab,
    context_parts: str = ALL_PARTS,
    context_limit: int = CONTEXT_TOKEN_LIMIT,
    target_limit: int = TARGET_TOKEN_LIMIT,
) -> Iterator[Example]:
    """Yield one Example per note, in (subject_id, note order) order.

    No cohort filtering: every note becomes an example, except empty-text
    notes, which are skipped and counted.
    """
    skipped = 0
    for sid in store.subject_ids():
        for idx, note in enumerate(store.notes_for(sid)):
            if not note.text:
                skipped += 1
                continue
            ctx = extract_context(store, sid, idx, vocab)
            input_tokens = truncate_context(
                vocab.encode(serialize_ablated(ctx, context_parts)), context_limit
            )
            target_tokens = vocab.encode(note.text)[:target_limit]
            yield Example(
                input_tokens=input_tokens,
                target_tokens=target_tokens,
                meta={
                    "subject_id": sid,
                    "note_type": note.category,
                    "note_time": note.chart_time.isoformat(sep=" "),
                    "split": splits[sid],
                    # demographic ground truth at note time, kept even when
                    # the serialized context withholds it
                    "gender": ctx.gender,
                    "age": ctx.age_years,
                },
            )
    if skipped:
        log.warning("skipped %d empty-text notes", skipped)


def write_dataset(examples: Iterable[Example], out_dir: str | Path) -> dict[str, int]:
    """Write train/validation/test JSONL files; returns per-split line counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handles = {
        name: (out_dir / f"{name}.jsonl").open("w", encoding="utf-8")
        for name in SPLIT_NAMES
    }
    counts = dict.fromkeys(SPLIT_NAMES, 0)
    try:
        for ex in examples:
            split = ex.meta["split"]
            line = json.dumps(
                {
                    "input_tokens": ex.input_tokens,
                    "target_tokens": ex.target_tokens,
                    "meta": ex.meta,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
            handles[split].write(line + "\n")
            counts[split] += 1
    finally:
        for fh in handles.values():
            fh.close()
    return counts


def read_dataset(data_dir: str | Path, split: str | None = None) -> Iterator[Example]:
    """Stream examples back from JSONL; all three splits unless one is named."""
    data_dir = Path(data_dir)
    names = (split,) if split else SPLIT_NAMES
    for name in names:
        path = data_dir / f"{name}.jsonl"
        if not path.is_file():
            raise FileNotFoundError(f"missing dataset file {path}")
        with path.open(encoding="utf-8") as fh:
            for line_num, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    yield Example(
                        input_tokens=list(obj["input_tokens"]),
                        target_tokens=list(obj["target_tokens"]),
                        meta=obj["meta"],
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(
                        f"{path.name}:{line_num}: corrupt dataset line ({exc})"
                    ) from exc
