import json
import math
import threading
import time
from collections import Counter
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from audio_kd.datamodel import CotaRecord, ReasoningTrace
from audio_kd.pipeline import (LABELS, MockDeterministic, ExternalService, PromptTemplate, client_from_spec,
                               gen_synthetic, lookup_answer, parse_options, render_prompt, synthetic_capacity,
                               synthetic_vocab, textualize)
from audio_kd.service import create_app

GOLDEN = Path(__file__).parent / "golden" / "textualize_prompt.txt"
TRACE = ReasoningTrace("a", "b", "c", "d")


def record(i=0, question="Q1"):
    return CotaRecord((i, i + 1), question, TRACE, "A")


def test_render_substitutes_both_slots():
    out = render_prompt(PromptTemplate.default(), "Q1", TRACE)
    assert "Here is the question: Q1" in out
    assert "Planning: a\nCaption: b\nReasoning: c\nSummary: d" in out
    assert "**Question**" not in out and "**Reasoning trace**" not in out
    assert out == render_prompt(PromptTemplate.default(), "Q1", TRACE)


def test_render_matches_golden_bytes():
    trace = ReasoningTrace("listen first", "a dog barks twice", "barking means dog", "the dog is option A")
    out = render_prompt(PromptTemplate.default(), "which sound is heard ? A dog B bell C violin D rain", trace)
    assert out.encode("utf-8") == GOLDEN.read_bytes()


def test_template_opens_with_instruction():
    assert PromptTemplate.default().text.startswith("You are an excellent audio analyst.")


@pytest.mark.parametrize("q", ["", "   "])
def test_render_rejects_empty_question(q):
    with pytest.raises(ValueError):
        render_prompt(PromptTemplate.default(), q, TRACE)


def test_textualize_empty():
    res = textualize([], MockDeterministic(7))
    assert res.records == [] and res.failures == []


def test_textualize_preserves_fields_and_is_deterministic():
    recs = [record(i, f"question {i}") for i in range(3)]
    a = textualize(recs, MockDeterministic(7))
    b = textualize(recs, MockDeterministic(7))
    assert a.records == b.records
    assert a.indices == [0, 1, 2]
    for src, out in zip(recs, a.records):
        assert (out.question, out.trace, out.answer) == (src.question, src.trace, src.answer)
        assert out.description and out.description != src.question


def test_mock_depends_only_on_record_and_seed():
    recs = [record(i) for i in range(40)]
    d7 = [MockDeterministic(7).describe(r, "ignored") for r in recs]
    assert d7 == [MockDeterministic(7).describe(r, "other prompt") for r in recs]
    assert d7 != [MockDeterministic(8).describe(r, "ignored") for r in recs]


class FlakyClient:
    def __init__(self, bad):
        self.bad = bad

    def describe(self, rec, prompt):
        if rec.question == self.bad:
            raise ConnectionError("boom")
        return "desc " + rec.question


def test_failure_reported_at_index():
    recs = [record(0, "q0"), record(1, "q1"), record(2, "q2")]
    res = textualize(recs, FlakyClient("q1"))
    assert len(res.records) == 2
    assert res.indices == [0, 2]
    assert [i for i, _ in res.failures] == [1]
    assert "boom" in res.failures[0][1]


class EchoClient:
    def describe(self, rec, prompt):
        return rec.question


def test_description_equal_to_question_rejected():
    res = textualize([record(0, "q0")], EchoClient())
    assert res.records == [] and [i for i, _ in res.failures] == [0]


class SlowFirstClient:
    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def describe(self, rec, prompt):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.05 if rec.audio[0] == 0 else 0.005)
        with self.lock:
            self.active -= 1
        return f"described {rec.audio[0]}"


def test_concurrent_textualize_keeps_order():
    recs = [record(i, f"q{i}") for i in range(8)]
    client = SlowFirstClient()
    res = textualize(recs, client, max_workers=4)
    assert [r.description for r in res.records] == [f"described {i}" for i in range(8)]
    assert 1 < client.peak <= 4


def test_gen_synthetic_single():
    data = gen_synthetic(1, seed=3)
    assert len(data.audio_records) == len(data.text_records) == 1
    assert data.answer_key == [data.audio_records[0].answer]
    assert data.answer_key[0] in LABELS


def test_gen_synthetic_answer_balance():
    n = 1000
    counts = Counter(gen_synthetic(n, seed=0).answer_key)
    sigma = math.sqrt(n * 0.25 * 0.75)
    assert sigma == pytest.approx(13.693, abs=1e-3)
    for label in LABELS:
        assert abs(counts[label] - n / 4) <= 3 * sigma, counts


def dump(data):
    return json.dumps([[r.to_dict() for r in data.audio_records], [r.to_dict() for r in data.text_records],
                       data.answer_key], sort_keys=True).encode()


def test_gen_synthetic_byte_identical():
    assert dump(gen_synthetic(200, seed=5)) == dump(gen_synthetic(200, seed=5))
    assert dump(gen_synthetic(200, seed=5)) != dump(gen_synthetic(200, seed=6))


def test_lookup_oracle_is_perfect(synth):
    data = gen_synthetic(500, seed=2)
    assert all(lookup_answer(r) == a for r, a in zip(data.audio_records, data.answer_key))
    for rec, txt in zip(data.audio_records, data.text_records):
        assert rec.trace.caption in txt.description


def test_tasks_are_distinct():
    data = gen_synthetic(300, seed=4)
    keys = {(r.audio, r.question) for r in data.audio_records}
    assert len(keys) == 300


def test_synthetic_vocab_covers_records():
    vocab = synthetic_vocab()
    assert len(vocab) == 64
    data = gen_synthetic(50, vocab, seed=1)
    for r in data.text_records:
        for w in (r.description + " " + r.question).split():
            assert vocab.id(w) != vocab.id("<unk>"), w


def test_capacity_limits():
    # 2 audio tokens, no noise: 4 classes x 4^2 sequences x 24 option orders
    assert synthetic_capacity(2, 0) == 4 * 16 * 24
    with pytest.raises(ValueError):
        gen_synthetic(synthetic_capacity(2, 0) + 1, audio_len=2, n_noise=0)
    assert len(gen_synthetic(synthetic_capacity(2, 0), audio_len=2, n_noise=0, seed=0).audio_records) == 1536
    with pytest.raises(ValueError):
        gen_synthetic(0)


def test_parse_options():
    assert parse_options("which sound is heard ? A dog B bell C violin D rain") == ["dog", "bell", "violin", "rain"]


def test_external_service_roundtrip():
    http = TestClient(create_app(seed=7))
    client = ExternalService("http://testserver/describe", client=http, retries=0)
    recs = gen_synthetic(5, seed=7).audio_records
    remote = textualize(recs, client)
    local = textualize(recs, MockDeterministic(7))
    assert remote.records == local.records


def test_external_service_retries_then_fails():
    calls = []

    class Broken:
        def post(self, url, json, timeout):
            calls.append(json)
            import httpx
            raise httpx.ConnectError("down")

    client = ExternalService("http://x/describe", retries=2, backoff=0.0, client=Broken())
    with pytest.raises(RuntimeError):
        client.describe(record(), "p")
    assert len(calls) == 3
    assert calls[0] == {"prompt": "p", "audio": [0, 1]}


def test_client_from_spec():
    assert isinstance(client_from_spec("mock", 3), MockDeterministic)
    svc = client_from_spec("http:http://localhost:9/describe")
    assert isinstance(svc, ExternalService) and svc.url == "http://localhost:9/describe"
    with pytest.raises(ValueError):
        client_from_spec("carrier-pigeon")
