import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from notegen.markers import MARKER_ORDER, Marker
from notegen.tokenizer import (
    BYTE_BASE,
    EOS_ID,
    FIRST_MERGE_ID,
    MARKER_TO_ID,
    PAD_ID,
    TokenIdError,
    Vocab,
    VocabError,
    load_vocab,
    save_vocab,
    train_vocab,
)


def bid(ch: str) -> int:
    """Token id of a single-byte character."""
    (b,) = ch.encode("utf-8")
    return BYTE_BASE + b


# --- training: hand-computed merge sequence -------------------------------

def test_merge_order_on_worked_example():
    # "aaab aaab": (a,a) occurs 4 times (overlap counted), (a,b) twice.
    # After merging (a,a)->aa greedily: aa a b _ aa a b, where (aa,a) and
    # (a,b) both occur twice; (aa,a) is seen first, so it wins the tie.
    vocab = train_vocab(["aaab aaab"], FIRST_MERGE_ID + 2)
    assert vocab.merges == [(bid("a"), bid("a")), (FIRST_MERGE_ID, bid("a"))]


def test_training_stops_when_no_pair_repeats():
    # Third merge is (aaa,b); after that every adjacent pair is unique.
    vocab = train_vocab(["aaab aaab"], FIRST_MERGE_ID + 50)
    assert len(vocab.merges) == 3
    assert vocab.merges[2] == (FIRST_MERGE_ID + 1, bid("b"))


def test_zero_merge_budget_gives_byte_vocab():
    vocab = train_vocab(["anything at all"], FIRST_MERGE_ID)
    assert vocab.merges == []
    assert vocab.encode("hi") == [bid("h"), bid("i")]


def test_target_below_floor_rejected():
    with pytest.raises(VocabError):
        train_vocab(["x"], FIRST_MERGE_ID - 1)


def test_pairs_do_not_cross_document_boundaries():
    # "ab" only ever appears split across the two documents.
    vocab = train_vocab(["xa", "bx", "xa", "bx"], FIRST_MERGE_ID + 20)
    assert (bid("a"), bid("b")) not in vocab.merges


def test_smaller_vocab_merges_are_a_prefix_of_larger():
    corpus = ["the cat sat on the mat", "the cat ate the rat"] * 3
    small = train_vocab(corpus, FIRST_MERGE_ID + 4)
    large = train_vocab(corpus, FIRST_MERGE_ID + 12)
    assert large.merges[: len(small.merges)] == small.merges


# --- encoding --------------------------------------------------------------

def test_encode_matches_training_segmentation():
    vocab = train_vocab(["aaab aaab"], FIRST_MERGE_ID + 50)
    aaab = FIRST_MERGE_ID + 2
    assert vocab.encode("aaab aaab") == [aaab, bid(" "), aaab]
    assert vocab.encode("aaab") == [aaab]
    assert vocab.encode("aa") == [FIRST_MERGE_ID]


def test_encode_never_emits_reserved_ids():
    vocab = train_vocab(["<H> hint <T> note |"], FIRST_MERGE_ID + 30)
    ids = vocab.encode("hint <H> | <PAD> <EOS>")
    assert all(i >= BYTE_BASE for i in ids)


def test_marker_segments_use_reserved_ids():
    vocab = Vocab(merges=[])
    ids = vocab.encode(["ab", Marker.HINT, "cd"])
    assert ids == [bid("a"), bid("b"), MARKER_TO_ID[Marker.HINT], bid("c"), bid("d")]


def test_marker_ids_are_distinct_and_reserved():
    ids = sorted(MARKER_TO_ID.values())
    assert len(set(ids)) == len(MARKER_ORDER)
    assert min(ids) == 2 and max(ids) == BYTE_BASE - 1
    assert PAD_ID == 0 and EOS_ID == 1


# --- decoding --------------------------------------------------------------

def test_decode_plain_text_round_trip():
    vocab = train_vocab(["banana band bandana"], FIRST_MERGE_ID + 10)
    for text in ["banana", "bandana band", "  spaced\tout\n\n", "unrelated text!"]:
        assert vocab.decode(vocab.encode(text)) == text


def test_decode_skips_pad_and_eos():
    vocab = Vocab(merges=[])
    ids = [PAD_ID, bid("o"), bid("k"), EOS_ID, PAD_ID]
    assert vocab.decode(ids) == "ok"


def test_decode_with_markers_returns_segments():
    vocab = Vocab(merges=[])
    marked = ["x", Marker.GENDER, "y z", Marker.DELIM, "w"]
    assert vocab.decode(vocab.encode(marked)) == marked


def test_decode_text_drops_markers():
    vocab = Vocab(merges=[])
    assert vocab.decode_text(vocab.encode(["x", Marker.NOTE, "y"])) == "xy"


def test_decode_rejects_out_of_range_id():
    vocab = Vocab(merges=[])
    with pytest.raises(TokenIdError):
        vocab.decode([vocab.size])
    with pytest.raises(TokenIdError):
        vocab.decode([-1])


def test_token_text_debug_forms():
    vocab = train_vocab(["aaab aaab"], FIRST_MERGE_ID + 2)
    assert vocab.token_text(PAD_ID) == "<PAD>"
    assert vocab.token_text(EOS_ID) == "<EOS>"
    assert vocab.token_text(MARKER_TO_ID[Marker.HINT]) == "<H>"
    assert vocab.token_text(MARKER_TO_ID[Marker.DELIM]) == "|"
    assert vocab.token_text(bid("a")) == "a"
    assert vocab.token_text(FIRST_MERGE_ID + 1) == "aaa"


# --- property: losslessness on arbitrary text ------------------------------

@settings(max_examples=200, deadline=None)
@given(st.text())
def test_round_trip_identity_empty_vocab(text):
    vocab = Vocab(merges=[])
    assert vocab.decode(vocab.encode(text)) == text


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.characters(codec="utf-8"), min_size=0, max_size=200))
def test_round_trip_identity_trained_vocab(text):
    vocab = train_vocab(["the cat sat on the mat \n\t the end"], FIRST_MERGE_ID + 16)
    assert vocab.decode(vocab.encode(text)) == text


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=300))
def test_more_merges_never_lengthen(text):
    corpus = ["round and round the ragged rock", "the rugged rascal ran"] * 2
    small = train_vocab(corpus, FIRST_MERGE_ID + 3)
    large = train_vocab(corpus, FIRST_MERGE_ID + 24)
    assert len(large.encode(text)) <= len(small.encode(text))


# --- persistence -----------------------------------------------------------

def test_vocab_file_round_trip(tmp_path):
    vocab = train_vocab(["persist me persist me"], FIRST_MERGE_ID + 8)
    path = tmp_path / "vocab.json"
    save_vocab(vocab, path)
    loaded = load_vocab(path)
    assert loaded.merges == vocab.merges
    assert loaded.size == vocab.size


def test_vocab_file_version_check(tmp_path):
    path = tmp_path / "vocab.json"
    path.write_text(json.dumps({"version": 99, "merges": []}))
    with pytest.raises(VocabError):
        load_vocab(path)


def test_vocab_file_garbage_rejected(tmp_path):
    path = tmp_path / "vocab.json"
    path.write_text("definitely not json {")
    with pytest.raises(VocabError):
        load_vocab(path)


def test_invalid_merge_ids_rejected():
    with pytest.raises(VocabError):
        Vocab(merges=[(PAD_ID, bid("a"))])
    with pytest.raises(VocabError):
        Vocab(merges=[(bid("a"), FIRST_MERGE_ID + 5)])
