"""Patient cohort tables: CSV ingest, CSV export, and synthetic generation.

The on-disk shape is five CSV files (PATIENTS, PRESCRIPTIONS, LABEVENTS,
D_LABITEMS, NOTEEVENTS) with RFC-4180 quoting, UTF-8, LF newlines, and
ISO-8601 timestamps. Note text round-trips byte-exact, embedded newlines and
quotes included.

The synthetic generator produces templated notes whose demographics,
medication lines, and lab lines are drawn from events placed inside the note's
preceding 24 hours, so the notes are genuinely predictable from structured
context. Each note opens with a high-entropy header line (date, time, record
number) so that a short token prefix of the note carries no demographic
information.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable

CSV_FILES = (
    "PATIENTS.csv",
    "PRESCRIPTIONS.csv",
    "LABEVENTS.csv",
    "D_LABITEMS.csv",
    "NOTEEVENTS.csv",
)


class CohortError(ValueError):
    """Malformed cohort directory, CSV row, or generation spec."""


@dataclass(frozen=True)
class Patient:
    subject_id: int
    gender: str  # "M" or "F"
    dob: datetime


@dataclass(frozen=True)
class Prescription:
    subject_id: int
    start_time: datetime
    drug: str


@dataclass(frozen=True)
class LabEvent:
    subject_id: int
    chart_time: datetime
    label: str
    value: str
    unit: str
    flag: str  # "abnormal" or ""


@dataclass(frozen=True)
class NoteEvent:
    subject_id: int
    chart_time: datetime
    category: str
    text: str


@dataclass
class CohortStore:
    """All cohort rows, keyed by patient, event lists sorted by time.

    Sorting is stable: rows with equal timestamps keep their input order.
    """

    patients: dict[int, Patient] = field(default_factory=dict)
    prescriptions: dict[int, list[Prescription]] = field(default_factory=dict)
    lab_events: dict[int, list[LabEvent]] = field(default_factory=dict)
    notes: dict[int, list[NoteEvent]] = field(default_factory=dict)

    def subject_ids(self) -> list[int]:
        return sorted(self.patients)

    def notes_for(self, subject_id: int) -> list[NoteEvent]:
        return self.notes.get(subject_id, [])

    def sort_events(self) -> None:
        for d, key in (
            (self.prescriptions, lambda e: e.start_time),
            (self.lab_events, lambda e: e.chart_time),
            (self.notes, lambda e: e.chart_time),
        ):
            for events in d.values():
                events.sort(key=key)


def _parse_time(raw: str, where: str) -> datetime:
    try:
        return datetime.fromisoformat(raw.strip())
    except ValueError:
        raise CohortError(f"{where}: unparseable timestamp {raw!r}") from None


def _require(row: dict, col: str, where: str) -> str:
    val = row.get(col)
    if val is None:
        raise CohortError(f"{where}: missing column {col}")
    return val


def _read_rows(path: Path):
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            yield reader.line_num, row


def load_cohort(cohort_dir: str | Path) -> CohortStore:
    """Read the five cohort CSVs into a store. Fails fast on the first bad row."""
    cohort_dir = Path(cohort_dir)
    for name in CSV_FILES:
        if not (cohort_dir / name).is_file():
            raise CohortError(f"cohort directory is missing {name}")

    store = CohortStore()

    path = cohort_dir / "PATIENTS.csv"
    for line_num, row in _read_rows(path):
        where = f"{path.name}:{line_num}"
        sid = int(_require(row, "SUBJECT_ID", where))
        gender = _require(row, "GENDER", where).strip().upper()
        if gender not in ("M", "F"):
            raise CohortError(f"{where}: gender must be M or F, got {gender!r}")
        store.patients[sid] = Patient(sid, gender, _parse_time(row["DOB"], where))

    path = cohort_dir / "D_LABITEMS.csv"
    labels: dict[str, str] = {}
    for line_num, row in _read_rows(path):
        where = f"{path.name}:{line_num}"
        labels[_require(row, "ITEMID", where).strip()] = _require(row, "LABEL", where)

    path = cohort_dir / "PRESCRIPTIONS.csv"
    for line_num, row in _read_rows(path):
        where = f"{path.name}:{line_num}"
        sid = int(_require(row, "SUBJECT_ID", where))
        drug = _require(row, "DRUG", where)
        if not drug:
            raise CohortError(f"{where}: empty DRUG")
        when = _parse_time(_require(row, "STARTDATE", where), where)
        store.prescriptions.setdefault(sid, []).append(Prescription(sid, when, drug))

    path = cohort_dir / "LABEVENTS.csv"
    for line_num, row in _read_rows(path):
        where = f"{path.name}:{line_num}"
        sid = int(_require(row, "SUBJECT_ID", where))
        itemid = _require(row, "ITEMID", where).strip()
        if itemid not in labels:
            raise CohortError(f"{where}: ITEMID {itemid} not present in D_LABITEMS")
        flag = _require(row, "FLAG", where).strip().lower()
        store.lab_events.setdefault(sid, []).append(
            LabEvent(
                sid,
                _parse_time(_require(row, "CHARTTIME", where), where),
                labels[itemid],
                _require(row, "VALUE", where),
                _require(row, "VALUEUOM", where),
                "abnormal" if flag == "abnormal" else "",
            )
        )

    path = cohort_dir / "NOTEEVENTS.csv"
    for line_num, row in _read_rows(path):
        where = f"{path.name}:{line_num}"
        sid = int(_require(row, "SUBJECT_ID", where))
        category = _require(row, "CATEGORY", where)
        if not category:
            raise CohortError(f"{where}: empty CATEGORY")
        store.notes.setdefault(sid, []).append(
            NoteEvent(
                sid,
                _parse_time(_require(row, "CHARTTIME", where), where),
                category,
                _require(row, "TEXT", where),
            )
        )

    store.sort_events()
    return store


def _fmt(ts: datetime) -> str:
    return ts.isoformat(sep=" ")


def save_cohort(store: CohortStore, cohort_dir: str | Path) -> None:
    """Write the five CSVs. load_cohort inverts this exactly."""
    cohort_dir = Path(cohort_dir)
    cohort_dir.mkdir(parents=True, exist_ok=True)

    def writer(name: str, header: list[str]):
        fh = (cohort_dir / name).open("w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    fh, w = writer("PATIENTS.csv", ["SUBJECT_ID", "GENDER", "DOB"])
    with fh:
        for sid in store.subject_ids():
            p = store.patients[sid]
            w.writerow([p.subject_id, p.gender, _fmt(p.dob)])

    fh, w = writer("PRESCRIPTIONS.csv", ["SUBJECT_ID", "STARTDATE", "DRUG"])
    with fh:
        for sid in sorted(store.prescriptions):
            for rx in store.prescriptions[sid]:
                w.writerow([rx.subject_id, _fmt(rx.start_time), rx.drug])

    all_labels = sorted(
        {ev.label for events in store.lab_events.values() for ev in events}
    )
    itemid_of = {label: 50001 + i for i, label in enumerate(all_labels)}

    fh, w = writer("D_LABITEMS.csv", ["ITEMID", "LABEL"])
    with fh:
        for label in all_labels:
            w.writerow([itemid_of[label], label])

    fh, w = writer(
        "LABEVENTS.csv",
        ["SUBJECT_ID", "CHARTTIME", "ITEMID", "VALUE", "VALUEUOM", "FLAG"],
    )
    with fh:
        for sid in sorted(store.lab_events):
            for ev in store.lab_events[sid]:
                w.writerow(
                    [ev.subject_id, _fmt(ev.chart_time), itemid_of[ev.label],
                     ev.value, ev.unit, ev.flag]
                )

    fh, w = writer("NOTEEVENTS.csv", ["SUBJECT_ID", "CHARTTIME", "CATEGORY", "TEXT"])
    with fh:
        for sid in sorted(store.notes):
            for ev in store.notes[sid]:
                w.writerow([ev.subject_id, _fmt(ev.chart_time), ev.category, ev.text])


# --- synthetic cohort ------------------------------------------------------

DRUG_CATALOG = [
    "Acetaminophen", "Albuterol", "Amlodipine", "Aspirin", "Atorvastatin",
    "Azithromycin", "Ceftriaxone", "Furosemide", "Gabapentin", "Heparin",
    "Insulin", "Levothyroxine", "Lisinopril", "Metoprolol", "Metronidazole",
    "Morphine", "Norepinephrine", "Ondansetron", "Pantoprazole",
    "Phenylephrine", "Piperacillin", "Prednisone", "Vancomycin", "Warfarin",
]

# label, unit, normal range low/high, decimals shown
LAB_CATALOG = [
    ("Potassium", "mEq/L", 3.5, 5.1, 1),
    ("Sodium", "mEq/L", 135.0, 145.0, 0),
    ("Chloride", "mEq/L", 96.0, 106.0, 0),
    ("Bicarbonate", "mEq/L", 22.0, 29.0, 0),
    ("Urea Nitrogen", "mg/dL", 7.0, 20.0, 0),
    ("Creatinine", "mg/dL", 0.5, 1.2, 1),
    ("Glucose", "mg/dL", 70.0, 140.0, 0),
    ("Calcium", "mg/dL", 8.5, 10.5, 1),
    ("Magnesium", "mg/dL", 1.6, 2.6, 1),
    ("Hemoglobin", "g/dL", 12.0, 17.0, 1),
    ("Platelet Count", "K/uL", 150.0, 400.0, 0),
    ("White Blood Cells", "K/uL", 4.0, 11.0, 1),
    ("Lactate", "mmol/L", 0.5, 2.0, 1),
    ("Albumin", "g/dL", 3.4, 5.4, 1),
    ("INR", "ratio", 0.9, 1.2, 1),
    ("Troponin", "ng/mL", 0.0, 0.04, 2),
]

COMPLAINTS = [
    "pneumonia", "sepsis", "chest pain", "heart failure", "cellulitis",
    "pancreatitis", "atrial fibrillation", "respiratory failure",
    "kidney injury", "urinary tract infection",
]

COURSE_WORDS = ["stable", "unchanged", "improved", "guarded"]

TEMPLATE_NAMES = ("progress", "discharge")
TEMPLATE_CATEGORY = {"progress": "Nursing/other", "discharge": "Discharge summary"}


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int
    notes_per_patient: tuple[int, int] = (2, 3)
    template_set: tuple[str, ...] = TEMPLATE_NAMES
    seed: int = 0


def _lab_line(label: str, value: str, unit: str, flag: str) -> str:
    suffix = " (abnormal)" if flag == "abnormal" else ""
    return f"- {label} {value} {unit}{suffix}"


def _render_progress(header: str, age: int, sex_word: str, complaint: str,
                     course: str, meds: list[str], labs: list[tuple]) -> str:
    lines = [header, "", "History of Present Illness:",
             f"The patient is a {age} year old {sex_word} admitted with {complaint}.",
             f"Overnight course was {course}.", "", "Medications:"]
    lines += [f"- Continue {drug} at current dose." for drug in meds]
    lines += ["", "Labs:"]
    lines += [_lab_line(*lab) for lab in labs]
    lines += ["", "Assessment and Plan:",
              f"Continue current management of {complaint}.",
              f"Recheck {labs[0][0]} in the morning." if labs else "Recheck labs in the morning.",
              ""]
    return "\n".join(lines)


def _render_discharge(header: str, age: int, sex_word: str, complaint: str,
                      course: str, meds: list[str], labs: list[tuple]) -> str:
    lines = [header, "", "History of Present Illness:",
             f"The patient is a {age} year old {sex_word} treated for {complaint}.",
             f"Condition on discharge was {course}.", "", "Medications:"]
    lines += [f"- {drug} continued on discharge." for drug in meds]
    lines += ["", "Labs:"]
    lines += [_lab_line(*lab) for lab in labs]
    lines += ["", "Assessment and Plan:",
              "Discharged home in stable condition.",
              f"Return for any worsening {complaint}.",
              ""]
    return "\n".join(lines)


_RENDERERS: dict[str, Callable[..., str]] = {
    "progress": _render_progress,
    "discharge": _render_discharge,
}


def age_years(dob: datetime, when: datetime) -> int:
    """Completed years between dob and `when` (calendar, not 365-day)."""
    years = when.year - dob.year
    if (when.month, when.day) < (dob.month, dob.day):
        years -= 1
    return years


def clamped_age(dob: datetime, when: datetime) -> int:
    """Age at `when`, with date-shift artifacts (> 120 years) clamped to 90."""
    age = age_years(dob, when)
    return 90 if age > 120 else age


def generate_synthetic_cohort(spec: CohortSpec) -> CohortStore:
    """Deterministically generate a templated cohort for a fixed seed.

    Every note lists exactly the medications and labs whose events were placed
    in its own 24-hour window, in time order, so structured context predicts
    the note body. Roughly one patient in fifty gets a date-shifted DOB that
    makes their computed age implausibly large (exercises downstream clamping);
    their note text uses the clamped age.
    """
    if spec.n_patients < 0:
        raise CohortError("n_patients must be >= 0")
    lo, hi = spec.notes_per_patient
    if lo > hi or lo < 0:
        raise CohortError(f"bad notes_per_patient range {spec.notes_per_patient}")
    if hi > 0 and not spec.template_set:
        raise CohortError("template_set must be non-empty when notes are requested")
    for name in spec.template_set:
        if name not in _RENDERERS:
            raise CohortError(f"unknown template {name!r}")

    rng = random.Random(spec.seed)
    store = CohortStore()

    for i in range(spec.n_patients):
        sid = 10001 + i
        gender = "M" if i % 2 == 0 else "F"
        sex_word = "man" if gender == "M" else "woman"

        first_note = datetime(2100, 1, 1) + timedelta(
            days=rng.randint(0, 365 * 99), minutes=rng.randint(0, 24 * 60 - 1)
        )
        if i % 50 == 7:
            # date-shifted elderly: true age lands far above 120
            dob = first_note.replace(year=first_note.year - 300)
        else:
            dob = first_note - timedelta(days=rng.randint(25 * 365, 89 * 365))
        store.patients[sid] = Patient(sid, gender, dob)

        n_notes = rng.randint(lo, hi)
        note_time = first_note
        for k in range(n_notes):
            if k > 0:
                note_time = note_time + timedelta(
                    hours=rng.randint(16, 30), minutes=rng.randint(0, 59)
                )
            if len(spec.template_set) > 1:
                template = "discharge" if k == n_notes - 1 else "progress"
            else:
                template = spec.template_set[0]

            meds = rng.sample(DRUG_CATALOG, rng.randint(1, 3))
            timed_meds = sorted(
                (note_time - timedelta(minutes=rng.randint(60, 20 * 60)), drug)
                for drug in meds
            )
            for when, drug in timed_meds:
                store.prescriptions.setdefault(sid, []).append(
                    Prescription(sid, when, drug)
                )

            labs = []
            for label, unit, norm_lo, norm_hi, decimals in rng.sample(
                LAB_CATALOG, rng.randint(1, 3)
            ):
                width = norm_hi - norm_lo
                raw = rng.uniform(norm_lo - 0.35 * width, norm_hi + 0.35 * width)
                raw = max(raw, 0.0)
                value = f"{raw:.{decimals}f}"
                flag = "abnormal" if not norm_lo <= float(value) <= norm_hi else ""
                labs.append((label, value, unit, flag))
            timed_labs = sorted(
                (note_time - timedelta(minutes=rng.randint(60, 20 * 60)), lab)
                for lab in labs
            )
            for when, (label, value, unit, flag) in timed_labs:
                store.lab_events.setdefault(sid, []).append(
                    LabEvent(sid, when, label, value, unit, flag)
                )

            age = clamped_age(dob, note_time)
            header = (
                f"Admission Date: {note_time.date().isoformat()} "
                f"{note_time.strftime('%H:%M')} MRN: {rng.randint(10**7, 10**8 - 1)}"
            )
            text = _RENDERERS[template](
                header, age, sex_word, rng.choice(COMPLAINTS),
                rng.choice(COURSE_WORDS),
                [drug for _, drug in timed_meds],
                [lab for _, lab in timed_labs],
            )
            store.notes.setdefault(sid, []).append(
                NoteEvent(sid, note_time, TEMPLATE_CATEGORY[template], text)
            )

    store.sort_events()
    return store
