"""Note-context assembly and the marker-delimited serialization grammar.

A note's context bundles a 10-token hint, the intended note type, patient
demographics, and the medications / lab results / earlier notes charted in the
24 hours before the note. Serialized form (markers shown in their debug
rendering)::

    hint <H> type <T> gender <G> age <A> med|med <M> lab|lab <L> note <N> note

Labs render as "label,value,unit,flag" where flag is "abnormal" or empty.
Empty med/lab lists keep their terminator marker; an empty note list emits
nothing. Markers are structural segment values rather than substrings, so
note text containing "<M>" or "|" cannot forge structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import timedelta

from .ehr import CohortStore, clamped_age
from .markers import Marker
from .tokenizer import MarkedText, TokenSeq, Vocab

HINT_TOKENS = 10
CONTEXT_TOKEN_LIMIT = 500
WINDOW = timedelta(hours=24)

VALID_GENDERS = ("M", "F")
VALID_FLAGS = ("abnormal", "")


class ContextParseError(ValueError):
    """Segment stream does not realize the context grammar."""

    def __init__(self, message: str, segment_index: int):
        super().__init__(f"{message} (segment {segment_index})")
        self.segment_index = segment_index


class UnknownRecordError(LookupError):
    pass


@dataclass(frozen=True)
class LabResult:
    label: str
    value: str
    unit: str
    flag: str = ""

    def render(self) -> str:
        return f"{self.label},{self.value},{self.unit},{self.flag}"


@dataclass(frozen=True)
class RecordContext:
    hint: str
    note_type: str
    gender: str
    age_years: int
    meds: tuple[str, ...] = ()
    labs: tuple[LabResult, ...] = ()
    past_notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "hint": self.hint,
            "note_type": self.note_type,
            "gender": self.gender,
            "age_years": self.age_years,
            "meds": list(self.meds),
            "labs": [
                {"label": l.label, "value": l.value, "unit": l.unit, "flag": l.flag}
                for l in self.labs
            ],
            "past_notes": list(self.past_notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecordContext":
        return cls(
            hint=d.get("hint", ""),
            note_type=d.get("note_type", ""),
            gender=d.get("gender", ""),
            age_years=int(d.get("age_years", 0)),
            meds=tuple(d.get("meds", ())),
            labs=tuple(
                LabResult(x["label"], str(x["value"]), x["unit"], x.get("flag", ""))
                for x in d.get("labs", ())
            ),
            past_notes=tuple(d.get("past_notes", ())),
        )


def extract_context(
    store: CohortStore,
    subject_id: int,
    note_index: int,
    vocab: Vocab,
    hint_tokens: int = HINT_TOKENS,
) -> RecordContext:
    """Build the context for one note: demographics plus every event charted
    in [note_time - 24h, note_time). Events at the note timestamp itself are
    excluded. The hint is the decoded first `hint_tokens` subword tokens of
    the note (the whole note if shorter).
    """
    patient = store.patients.get(subject_id)
    if patient is None:
        raise UnknownRecordError(f"unknown subject_id {subject_id}")
    notes = store.notes_for(subject_id)
    if not 0 <= note_index < len(notes):
        raise UnknownRecordError(
            f"subject {subject_id} has {len(notes)} notes, no index {note_index}"
        )
    note = notes[note_index]
    t = note.chart_time
    lo = t - WINDOW

    meds = tuple(
        rx.drug
        for rx in store.prescriptions.get(subject_id, [])
        if lo <= rx.start_time < t
    )
    labs = tuple(
        LabResult(ev.label, ev.value, ev.unit, ev.flag)
        for ev in store.lab_events.get(subject_id, [])
        if lo <= ev.chart_time < t
    )
    past = tuple(n.text for n in notes if lo <= n.chart_time < t)

    hint_ids = vocab.encode(note.text)[:hint_tokens]
    hint = vocab.decode(hint_ids)
    assert isinstance(hint, str)

    return RecordContext(
        hint=hint,
        note_type=note.category,
        gender=patient.gender,
        age_years=clamped_age(patient.dob, t),
        meds=meds,
        labs=labs,
        past_notes=past,
    )


def serialize_context(ctx: RecordContext) -> MarkedText:
    """Render a context as the marker grammar's segment sequence."""
    out: MarkedText = []

    def text(s: str) -> None:
        if s:
            out.append(s)

    text(ctx.hint)
    out.append(Marker.HINT)
    text(ctx.note_type)
    out.append(Marker.NOTE_TYPE)
    text(ctx.gender)
    out.append(Marker.GENDER)
    text(str(ctx.age_years))
    out.append(Marker.AGE)
    for i, med in enumerate(ctx.meds):
        if i:
            out.append(Marker.DELIM)
        text(med)
    out.append(Marker.MEDS)
    for i, lab in enumerate(ctx.labs):
        if i:
            out.append(Marker.DELIM)
        text(lab.render())
    out.append(Marker.LABS)
    for i, note in enumerate(ctx.past_notes):
        if i:
            out.append(Marker.NOTE)
        text(note)
    return out


class _SegmentReader:
    def __init__(self, segments: MarkedText):
        self.segments = list(segments)
        self.i = 0

    def done(self) -> bool:
        return self.i >= len(self.segments)

    def peek(self):
        return None if self.done() else self.segments[self.i]

    def take_text(self) -> str:
        if not self.done() and isinstance(self.segments[self.i], str):
            self.i += 1
            return self.segments[self.i - 1]
        return ""

    def expect(self, marker: Marker) -> None:
        got = self.peek()
        if got is not marker:
            raise ContextParseError(
                f"expected {marker.printed}, found {describe_segment(got)}", self.i
            )
        self.i += 1


def describe_segment(seg) -> str:
    if seg is None:
        return "end of input"
    if isinstance(seg, Marker):
        return seg.printed
    return f"text {seg!r}"


def _parse_delimited(r: _SegmentReader, terminator: Marker) -> list[str]:
    items: list[str] = []
    if r.peek() is terminator:
        r.i += 1
        return items
    items.append(r.take_text())
    while r.peek() is Marker.DELIM:
        r.i += 1
        if not isinstance(r.peek(), str):
            raise ContextParseError(
                f"expected list item after |, found {describe_segment(r.peek())}", r.i
            )
        items.append(r.take_text())
    r.expect(terminator)
    return items


def _parse_lab(raw: str, index: int) -> LabResult:
    fields = raw.split(",")
    if len(fields) != 4:
        raise ContextParseError(
            f"lab needs label,value,unit,flag; got {len(fields)} fields in {raw!r}",
            index,
        )
    label, value, unit, flag = fields
    if flag not in VALID_FLAGS:
        raise ContextParseError(f"lab flag must be 'abnormal' or empty, got {flag!r}", index)
    return LabResult(label, value, unit, flag)


def parse_context(m: MarkedText) -> RecordContext:
    """Inverse of serialize_context on its image; rejects malformed streams."""
    r = _SegmentReader(m)
    hint = r.take_text()
    r.expect(Marker.HINT)
    note_type = r.take_text()
    r.expect(Marker.NOTE_TYPE)
    gender = r.take_text()
    if gender not in VALID_GENDERS:
        raise ContextParseError(
            f"gender must be M or F, got {gender!r}", r.i - 1 if gender else r.i
        )
    r.expect(Marker.GENDER)
    age_text = r.take_text()
    try:
        age = int(age_text)
    except ValueError:
        raise ContextParseError(
            f"age must be an integer, got {age_text!r}", r.i - 1 if age_text else r.i
        ) from None
    r.expect(Marker.AGE)

    meds = _parse_delimited(r, Marker.MEDS)
    lab_start = r.i
    raw_labs = _parse_delimited(r, Marker.LABS)
    labs = [_parse_lab(raw, lab_start) for raw in raw_labs]

    past: list[str] = []
    if not r.done():
        past.append(r.take_text())
        while r.peek() is Marker.NOTE:
            r.i += 1
            if not isinstance(r.peek(), str):
                raise ContextParseError(
                    f"expected note text after <N>, found {describe_segment(r.peek())}",
                    r.i,
                )
            past.append(r.take_text())
    if not r.done():
        raise ContextParseError(
            f"unexpected trailing {describe_segment(r.peek())}", r.i
        )

    return RecordContext(
        hint=hint,
        note_type=note_type,
        gender=gender,
        age_years=age,
        meds=tuple(meds),
        labs=tuple(labs),
        past_notes=tuple(past),
    )


def truncate_context(tokens: TokenSeq, limit: int = CONTEXT_TOKEN_LIMIT) -> TokenSeq:
    """Keep the first `limit` tokens. Serialization puts the structured fields
    first, so truncation sheds trailing past-note text before anything else.
    """
    if limit <= 0:
        raise ValueError("limit must be positive")
    return tokens[:limit]


def render_marked(m: MarkedText) -> str:
    """Debug rendering with markers inlined as <H>, <T>, ..., |."""
    return "".join(seg.printed if isinstance(seg, Marker) else seg for seg in m)
