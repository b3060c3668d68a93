import random
from datetime import datetime, timedelta

import pytest

from notegen.context import parse_context, serialize_context
from notegen.dataset import (
    Example,
    build_examples,
    read_dataset,
    serialize_ablated,
    split_patients,
    write_dataset,
)
from notegen.ehr import (
    CohortSpec,
    CohortStore,
    NoteEvent,
    Patient,
    generate_synthetic_cohort,
)
from notegen.markers import Marker
from notegen.tokenizer import Vocab

# --- splits ------------------------------------------------------------------

def test_splits_partition_the_ids():
    ids = list(range(1000))
    splits = split_patients(ids, seed=4)
    assert set(splits) == set(ids)
    assert set(splits.values()) <= {"train", "validation", "test"}


def test_single_patient_gets_exactly_one_split():
    splits = split_patients([42], seed=0)
    assert list(splits) == [42]
    assert splits[42] in ("train", "validation", "test")


def test_split_counts_track_ratios():
    n = 20000
    splits = split_patients(range(n), ratios=(0.85, 0.075, 0.075), seed=1)
    train = sum(1 for v in splits.values() if v == "train")
    val = sum(1 for v in splits.values() if v == "validation")
    test = sum(1 for v in splits.values() if v == "test")
    assert abs(train / n - 0.85) < 0.01
    assert abs(val / n - 0.075) < 0.01
    assert abs(test / n - 0.075) < 0.01


def test_assignment_stable_under_cohort_growth():
    small = split_patients(range(500), seed=7)
    grown = split_patients(range(2000), seed=7)
    for sid in range(500):
        assert small[sid] == grown[sid]


def test_assignment_depends_on_seed():
    a = split_patients(range(200), seed=1)
    b = split_patients(range(200), seed=2)
    assert any(a[i] != b[i] for i in range(200))


def test_bad_ratios_rejected():
    with pytest.raises(ValueError):
        split_patients([1], ratios=(0.5, 0.25, 0.1))
    with pytest.raises(ValueError):
        split_patients([1], ratios=(0.5, 0.5))


# --- ablation ----------------------------------------------------------------

def _a_context():
    store = generate_synthetic_cohort(CohortSpec(n_patients=4, seed=17))
    vocab = Vocab(merges=[])
    examples = list(build_examples(store, split_patients(store.subject_ids()), vocab))
    decoded = vocab.decode(examples[-1].input_tokens)
    return parse_context(decoded)


def test_full_ablation_equals_serialize_context():
    ctx = _a_context()
    assert serialize_ablated(ctx, "dmln") == serialize_context(ctx)
    assert serialize_ablated(ctx, "nlmd") == serialize_context(ctx)


def test_withheld_demographics_drop_payload_keep_markers():
    ctx = _a_context()
    segs = serialize_ablated(ctx, "mln")
    assert Marker.GENDER in segs and Marker.AGE in segs
    assert ctx.gender not in segs
    assert str(ctx.age_years) not in segs
    # other payloads intact
    for med in ctx.meds:
        assert med in segs


def test_withheld_meds_and_labs():
    ctx = _a_context()
    segs = serialize_ablated(ctx, "d")
    i_meds = segs.index(Marker.MEDS)
    i_age = segs.index(Marker.AGE)
    assert segs[i_age + 1] is Marker.MEDS  # nothing between <A> and <M>
    assert segs[i_meds + 1] is Marker.LABS
    assert segs[-1] is Marker.LABS  # no past notes either


def test_unknown_part_letter_rejected():
    ctx = _a_context()
    with pytest.raises(ValueError):
        serialize_ablated(ctx, "dmx")


# --- example construction ------------------------------------------------------

def tiny_store():
    t = datetime(2130, 3, 1, 8, 0)
    store = CohortStore()
    store.patients[1] = Patient(1, "F", datetime(2080, 1, 1))
    store.notes[1] = [
        NoteEvent(1, t, "Nursing/other", "first note body"),
        NoteEvent(1, t + timedelta(hours=10), "Nursing/other", "second note body"),
    ]
    store.patients[2] = Patient(2, "M", datetime(2090, 1, 1))
    store.notes[2] = [NoteEvent(2, t, "Physician", "third note body")]
    return store


def test_one_example_per_note():
    store = tiny_store()
    splits = split_patients(store.subject_ids())
    examples = list(build_examples(store, splits, Vocab(merges=[])))
    assert len(examples) == 3
    assert [ex.meta["subject_id"] for ex in examples] == [1, 1, 2]


def test_empty_text_note_skipped():
    store = tiny_store()
    store.notes[2].append(NoteEvent(2, datetime(2130, 3, 2), "Physician", ""))
    splits = split_patients(store.subject_ids())
    examples = list(build_examples(store, splits, Vocab(merges=[])))
    assert len(examples) == 3


def test_short_note_hint_equals_target():
    store = CohortStore()
    store.patients[5] = Patient(5, "M", datetime(2090, 1, 1))
    store.notes[5] = [NoteEvent(5, datetime(2130, 1, 1), "Physician", "tiny")]
    vocab = Vocab(merges=[])
    (ex,) = build_examples(store, split_patients([5]), vocab)
    assert vocab.decode(ex.target_tokens) == "tiny"
    decoded = vocab.decode(ex.input_tokens)
    assert decoded[0] == "tiny"  # hint segment is the whole note


def test_target_starts_with_hint_tokens():
    store = generate_synthetic_cohort(CohortSpec(n_patients=3, seed=9))
    vocab = Vocab(merges=[])
    splits = split_patients(store.subject_ids())
    for ex in build_examples(store, splits, vocab):
        ctx = parse_context(vocab.decode(ex.input_tokens))
        assert vocab.decode(ex.target_tokens)[: len(ctx.hint)] == ctx.hint


def test_token_limits_enforced():
    store = generate_synthetic_cohort(CohortSpec(n_patients=10, seed=2))
    vocab = Vocab(merges=[])
    splits = split_patients(store.subject_ids())
    for ex in build_examples(store, splits, vocab):
        assert len(ex.input_tokens) <= 500
        assert len(ex.target_tokens) <= 500


def test_no_context_leakage():
    # every event named in the serialized context precedes the note time
    store = generate_synthetic_cohort(CohortSpec(n_patients=15, seed=6))
    vocab = Vocab(merges=[])
    splits = split_patients(store.subject_ids())
    for ex in build_examples(store, splits, vocab):
        sid = ex.meta["subject_id"]
        note_time = datetime.fromisoformat(ex.meta["note_time"])
        window_start = note_time - timedelta(hours=24)
        ctx = parse_context(vocab.decode(ex.input_tokens))
        for med in ctx.meds:
            times = [
                rx.start_time for rx in store.prescriptions[sid] if rx.drug == med
            ]
            assert any(window_start <= t < note_time for t in times)
        for lab in ctx.labs:
            times = [
                ev.chart_time
                for ev in store.lab_events[sid]
                if (ev.label, ev.value) == (lab.label, lab.value)
            ]
            assert any(window_start <= t < note_time for t in times)


def test_split_label_matches_assignment():
    store = tiny_store()
    splits = split_patients(store.subject_ids(), seed=3)
    for ex in build_examples(store, splits, Vocab(merges=[])):
        assert ex.meta["split"] == splits[ex.meta["subject_id"]]


# --- JSONL persistence ---------------------------------------------------------

def make_examples(n, seed=0):
    rng = random.Random(seed)
    out = []
    for i in range(n):
        out.append(
            Example(
                input_tokens=[rng.randrange(300) for _ in range(rng.randrange(1, 40))],
                target_tokens=[rng.randrange(300) for _ in range(rng.randrange(1, 40))],
                meta={
                    "subject_id": i,
                    "note_type": "Nursing/other",
                    "note_time": "2130-01-01 08:00:00",
                    "split": rng.choice(["train", "validation", "test"]),
                },
            )
        )
    return out


def test_jsonl_round_trip(tmp_path):
    examples = make_examples(100, seed=5)
    counts = write_dataset(examples, tmp_path)
    assert sum(counts.values()) == 100
    back = list(read_dataset(tmp_path))
    key = lambda ex: ex.meta["subject_id"]
    assert sorted(back, key=key) == sorted(examples, key=key)


def test_empty_stream_writes_empty_files(tmp_path):
    write_dataset([], tmp_path)
    for name in ("train", "validation", "test"):
        path = tmp_path / f"{name}.jsonl"
        assert path.exists() and path.read_text() == ""
    assert list(read_dataset(tmp_path)) == []


def test_single_split_read(tmp_path):
    examples = make_examples(30, seed=8)
    write_dataset(examples, tmp_path)
    train = list(read_dataset(tmp_path, split="train"))
    assert all(ex.meta["split"] == "train" for ex in train)
    assert len(train) == sum(1 for ex in examples if ex.meta["split"] == "train")


def test_corrupt_line_reports_number(tmp_path):
    write_dataset(make_examples(3, seed=1), tmp_path)
    path = tmp_path / "train.jsonl"
    lines = path.read_text().splitlines()
    if not lines:
        lines = []
    lines.insert(min(1, len(lines)), "{broken")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r"train\.jsonl:\d+"):
        list(read_dataset(tmp_path, split="train"))


def test_missing_file_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        list(read_dataset(tmp_path))


def test_write_is_deterministic(tmp_path):
    examples = make_examples(50, seed=12)
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(examples, a)
    write_dataset(examples, b)
    for name in ("train", "validation", "test"):
        assert (a / f"{name}.jsonl").read_bytes() == (b / f"{name}.jsonl").read_bytes()
