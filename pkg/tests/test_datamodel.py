import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audio_kd.datamodel import (CotaRecord, DataError, Mode, ReasoningTrace, Role, TextRecord,
                                TokenizedSample, ValidationError, Vocab, detokenize, read_jsonl,
                                tokenize, write_jsonl)

WORDS = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "?", "A", "B"]


@pytest.fixture
def small_vocab():
    return Vocab.build(WORDS, n_audio=8)


def make_record(audio=(1, 2, 3, 4), question="alpha beta gamma"):
    trace = ReasoningTrace("alpha", "beta", "gamma", "delta")
    return CotaRecord(audio, question, trace, "A")


def test_counts_match_record(small_vocab):
    rec = make_record()
    s = tokenize(rec, small_vocab, Mode.STUDENT_AUDIO)
    assert len(s.audio_positions) == 4
    # four stage markers + four one-word stages + answer marker + answer + eos
    assert len(s.output_positions) == 11
    assert len(s.roles) == len(s.tokens)


def test_counting_contract_five_outputs():
    # a hand-built sample: 4 audio ids, 3 question ids, 5 output ids
    roles = [Role.TEXT_PROMPT] + [Role.AUDIO_INPUT] * 4 + [Role.TEXT_PROMPT] * 3 + [Role.OUTPUT] * 5
    tokens = list(range(len(roles)))
    s = TokenizedSample(tuple(tokens), tuple(roles), tuple(tokens[-5:]))
    assert len(s.audio_positions) == 4
    assert len(s.output_positions) == 5
    assert s.prediction_positions == tuple(p - 1 for p in s.output_positions)


def test_teacher_mode_has_no_audio_and_same_outputs(small_vocab):
    rec = make_record()
    text = TextRecord("zeta eps", rec.question, rec.trace, rec.answer)
    s = tokenize(rec, small_vocab, "student-audio")
    t = tokenize(text, small_vocab, "teacher-text")
    assert t.audio_positions == ()
    assert t.output_targets == s.output_targets
    assert set(s.audio_positions).isdisjoint(s.output_positions)


def test_roles_cover_sets(small_vocab):
    s = tokenize(make_record(), small_vocab, Mode.STUDENT_AUDIO)
    for i in s.audio_positions:
        assert small_vocab.audio_index(s.tokens[i]) is not None
    assert [s.tokens[i] for i in s.output_positions] == list(s.output_targets)


def test_unknown_words_map_to_unk(small_vocab):
    rec = make_record(question="alpha unseenword")
    s = tokenize(rec, small_vocab, Mode.STUDENT_AUDIO)
    assert small_vocab.id("<unk>") in s.tokens


@pytest.mark.parametrize("field,kwargs", [
    ("question", dict(question="  ")),
    ("answer", dict(answer="")),
])
def test_empty_fields_name_the_field(field, kwargs):
    base = dict(audio=(1,), question="q", trace=ReasoningTrace("a", "b", "c", "d"), answer="A")
    base.update(kwargs)
    with pytest.raises(ValidationError) as err:
        CotaRecord(**base)
    assert err.value.field == field


def test_empty_stage_rejected():
    with pytest.raises(ValidationError) as err:
        ReasoningTrace("a", "", "c", "d")
    assert err.value.field == "trace.caption"


def test_empty_audio_rejected():
    with pytest.raises(ValidationError):
        CotaRecord((), "q", ReasoningTrace("a", "b", "c", "d"), "A")


def test_vocab_dense_roundtrip(small_vocab):
    assert [small_vocab.id(small_vocab.token(i)) for i in range(len(small_vocab))] == list(range(len(small_vocab)))


def test_vocab_padding():
    v = Vocab.build(WORDS, n_audio=2, size=40)
    assert len(v) == 40
    with pytest.raises(ValueError):
        Vocab.build(WORDS, n_audio=2, size=10)


def _random_record(rng):
    def text(n):
        return " ".join(rng.choice(WORDS, size=n))
    stages = [text(int(rng.integers(1, 6))) for _ in range(4)]
    audio = tuple(int(a) for a in rng.integers(0, 8, size=int(rng.integers(1, 10))))
    return CotaRecord(audio, text(int(rng.integers(1, 8))), ReasoningTrace(*stages), text(int(rng.integers(1, 3))))


def test_detokenize_roundtrip_100_seeded_records(small_vocab):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        rec = _random_record(rng)
        assert detokenize(tokenize(rec, small_vocab, Mode.STUDENT_AUDIO), small_vocab) == rec
        text = TextRecord(" ".join(rng.choice(WORDS, size=3)), rec.question, rec.trace, rec.answer)
        assert detokenize(tokenize(text, small_vocab, Mode.TEACHER_TEXT), small_vocab) == text


# --- JSONL ---------------------------------------------------------------


def test_empty_file_reads_empty(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert read_jsonl(p) == []


def test_three_lines_in_order(tmp_path):
    recs = [make_record(audio=(i, i + 1)) for i in range(3)]
    p = tmp_path / "r.jsonl"
    write_jsonl(recs, p)
    assert p.read_text().count("\n") == 3
    assert read_jsonl(p) == recs


def test_missing_answer_cites_line(tmp_path):
    good = make_record().to_dict()
    bad = dict(good)
    del bad["answer"]
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DataError) as err:
        read_jsonl(p)
    assert err.value.line == 2
    assert "answer" in str(err.value)


def test_malformed_line_cites_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(make_record().to_dict()) + "\n{not json\n")
    with pytest.raises(DataError) as err:
        read_jsonl(p)
    assert err.value.line == 2


def test_text_record_file_format(tmp_path):
    rec = TextRecord("a desc", "q", ReasoningTrace("a", "b", "c", "d"), "B")
    p = tmp_path / "t.jsonl"
    write_jsonl([rec], p)
    obj = json.loads(p.read_text())
    assert set(obj) == {"description", "question", "trace", "answer"}
    assert set(obj["trace"]) == {"planning", "caption", "reasoning", "summary"}
    assert read_jsonl(p) == [rec]


texts = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1).filter(lambda s: s.strip())


@settings(max_examples=60, deadline=None)
@given(audio=st.lists(st.integers(0, 10_000), min_size=1, max_size=20), q=texts, a=texts,
       stages=st.lists(texts, min_size=4, max_size=4))
def test_jsonl_roundtrip_property(tmp_path_factory, audio, q, a, stages):
    rec = CotaRecord(tuple(audio), q, ReasoningTrace(*stages), a)
    p = tmp_path_factory.mktemp("rt") / "x.jsonl"
    write_jsonl([rec], p)
    assert read_jsonl(p) == [rec]
