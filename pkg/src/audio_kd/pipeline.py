"""Textualization of audio records and the synthetic desk-scale task.

``textualize`` turns each :class:`CotaRecord` into a :class:`TextRecord` by
asking a description client for a text stand-in of the audio. The synthetic
generator builds records whose audio encodes a sound class by construction,
so a lookup over the audio tokens recovers every answer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from itertools import permutations
from typing import Protocol, Sequence

import httpx
import numpy as np

from .datamodel import CotaRecord, ReasoningTrace, TextRecord, Vocab

log = logging.getLogger(__name__)

QUESTION_SLOT = "**Question**"
TRACE_SLOT = "**Reasoning trace**"
STAGE_LABELS = ("Planning", "Caption", "Reasoning", "Summary")


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    @classmethod
    def default(cls) -> "PromptTemplate":
        return cls(resources.files("audio_kd").joinpath("prompt_template.txt").read_text(encoding="utf-8"))


def format_trace(trace: ReasoningTrace) -> str:
    return "\n".join(f"{label}: {text}" for label, text in zip(STAGE_LABELS, trace.stages()))


def render_prompt(template: PromptTemplate, question: str, trace: ReasoningTrace) -> str:
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    return template.text.replace(QUESTION_SLOT, question).replace(TRACE_SLOT, format_trace(trace))


def caption_from_prompt(prompt: str) -> str | None:
    prefix = f"{STAGE_LABELS[1]}: "
    for line in prompt.splitlines():
        if line.startswith(prefix):
            return line[len(prefix):]
    return None


class DescriptionClient(Protocol):
    def describe(self, record: CotaRecord, prompt: str) -> str: ...


MOCK_PREFIXES = ("in this clip", "the clip says")


def mock_description(audio: Sequence[int], caption: str, seed: int) -> str:
    """Rule-based description: a seeded lead-in phrase followed by the trace caption."""
    key = json.dumps([seed, list(audio), caption]).encode("utf-8")
    pick = int.from_bytes(hashlib.sha256(key).digest()[:4], "big") % len(MOCK_PREFIXES)
    return f"{MOCK_PREFIXES[pick]} {caption}"


@dataclass(frozen=True)
class MockDeterministic:
    seed: int = 0

    def describe(self, record: CotaRecord, prompt: str) -> str:
        return mock_description(record.audio, record.trace.caption, self.seed)


@dataclass
class ExternalService:
    """POSTs ``{"prompt", "audio"}`` to ``url`` and reads ``{"description"}`` back."""

    url: str
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    client: httpx.Client | None = None

    def describe(self, record: CotaRecord, prompt: str) -> str:
        payload = {"prompt": prompt, "audio": list(record.audio)}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                if self.client is not None:
                    resp = self.client.post(self.url, json=payload, timeout=self.timeout)
                else:
                    resp = httpx.post(self.url, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                desc = resp.json()["description"]
                if not isinstance(desc, str):
                    raise ValueError("'description' is not a string")
                return desc
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise RuntimeError(f"description service failed after {self.retries + 1} attempts: {last}")


def client_from_spec(spec: str, seed: int = 0) -> DescriptionClient:
    """``mock`` or ``http:<url>`` (the url keeps its own scheme, e.g. ``http:http://host/describe``)."""
    if spec == "mock":
        return MockDeterministic(seed)
    if spec.startswith("http:"):
        url = spec[len("http:"):]
        if not url.startswith(("http://", "https://")):
            url = "http:" + url
        return ExternalService(url)
    raise ValueError(f"unknown client {spec!r}")


@dataclass
class TextualizeResult:
    records: list[TextRecord]
    indices: list[int]                      # input index of each output record
    failures: list[tuple[int, str]] = field(default_factory=list)


def _describe_one(record: CotaRecord, client: DescriptionClient, template: PromptTemplate) -> TextRecord:
    prompt = render_prompt(template, record.question, record.trace)
    desc = client.describe(record, prompt)
    if not desc or not desc.strip():
        raise ValueError("empty description")
    if desc.strip() == record.question.strip():
        raise ValueError("description repeats the question")
    return TextRecord(desc, record.question, record.trace, record.answer)


def textualize(records: Sequence[CotaRecord], client: DescriptionClient,
               template: PromptTemplate | None = None, max_workers: int = 1) -> TextualizeResult:
    template = template or PromptTemplate.default()

    def run(i: int):
        try:
            return i, _describe_one(records[i], client, template), None
        except Exception as exc:  # collected and reported per record
            return i, None, f"{type(exc).__name__}: {exc}"

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(run, range(len(records))))
    else:
        outcomes = [run(i) for i in range(len(records))]
    result = TextualizeResult([], [])
    for i, rec, err in outcomes:
        if err is None:
            result.records.append(rec)
            result.indices.append(i)
        else:
            result.failures.append((i, err))
    if result.failures:
        log.warning("textualize: %d of %d records failed: %s", len(result.failures), len(records),
                    [i for i, _ in result.failures])
    return result


# --- synthetic task -------------------------------------------------------

SOUND_CLASSES = ("dog", "bell", "violin", "rain")
LABELS = ("A", "B", "C", "D")
TOKENS_PER_CLASS = 4
QUESTION_HEAD = "which sound is heard ?"
PLANNING = "listen and match the sound to an option"
SYNTH_WORDS = (
    "which sound is heard ? A B C D dog bell violin rain listen and match the to an option "
    "audio mostly so answer in this clip says"
).split()
OPTION_ORDERS = tuple(permutations(range(len(SOUND_CLASSES))))


def synthetic_vocab(size: int = 64) -> Vocab:
    return Vocab.build(SYNTH_WORDS, n_audio=TOKENS_PER_CLASS * len(SOUND_CLASSES), size=size)


def audio_class(audio: Sequence[int]) -> int:
    """Majority sound class of an audio token sequence."""
    counts = np.bincount([a // TOKENS_PER_CLASS for a in audio], minlength=len(SOUND_CLASSES))
    return int(np.argmax(counts))


def parse_options(question: str) -> list[str]:
    """Option texts following the labels A..D in a question, in label order."""
    words = question.split()
    starts: list[int] = []
    pos = 0
    for label in LABELS:
        try:
            pos = words.index(label, pos)
        except ValueError:
            break
        starts.append(pos)
        pos += 1
    bounds = starts + [len(words)]
    return [" ".join(words[bounds[i] + 1: bounds[i + 1]]) for i in range(len(starts))]


def lookup_answer(record: CotaRecord) -> str:
    """Oracle: read the sound class off the audio, then find its option label."""
    name = SOUND_CLASSES[audio_class(record.audio)]
    return LABELS[parse_options(record.question).index(name)]


def _make_record(cls: int, order: tuple[int, ...], audio: tuple[int, ...]) -> CotaRecord:
    names = [SOUND_CLASSES[c] for c in order]
    question = QUESTION_HEAD + " " + " ".join(f"{l} {n}" for l, n in zip(LABELS, names))
    label = LABELS[order.index(cls)]
    name = SOUND_CLASSES[cls]
    trace = ReasoningTrace(
        planning=PLANNING,
        caption=f"the audio is mostly {name}",
        reasoning=f"{name} is option {label}",
        summary=f"so the answer is {label}",
    )
    return CotaRecord(audio, question, trace, label)


def synthetic_capacity(audio_len: int, n_noise: int) -> int:
    n_cls = len(SOUND_CLASSES)
    other = TOKENS_PER_CLASS * (n_cls - 1)
    per_class = math.comb(audio_len, n_noise) * TOKENS_PER_CLASS ** (audio_len - n_noise) * other ** n_noise
    return n_cls * per_class * len(OPTION_ORDERS)


@dataclass
class SyntheticData:
    audio_records: list[CotaRecord]
    text_records: list[TextRecord]
    answer_key: list[str]
    vocab: Vocab


def gen_synthetic(n: int, vocab: Vocab | None = None, seed: int = 0, audio_len: int = 6,
                  n_noise: int = 2) -> SyntheticData:
    """Generate ``n`` distinct (audio, question) tasks.

    The audio holds ``audio_len - n_noise`` tokens of the target class and
    ``n_noise`` tokens from other classes at random positions, so the majority
    class is always the target.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= n_noise < audio_len / 2:
        raise ValueError("noise tokens must stay a strict minority")
    capacity = synthetic_capacity(audio_len, n_noise)
    if n > capacity:
        raise ValueError(f"only {capacity} distinct tasks exist for this configuration, asked for {n}")
    vocab = vocab or synthetic_vocab()
    rng = np.random.default_rng(seed)
    seen = set()
    records: list[CotaRecord] = []
    n_cls = len(SOUND_CLASSES)
    while len(records) < n:
        cls = int(rng.integers(n_cls))
        order = OPTION_ORDERS[int(rng.integers(len(OPTION_ORDERS)))]
        audio = cls * TOKENS_PER_CLASS + rng.integers(TOKENS_PER_CLASS, size=audio_len)
        noise_pos = rng.choice(audio_len, size=n_noise, replace=False)
        for p in noise_pos:
            other = (cls + 1 + int(rng.integers(n_cls - 1))) % n_cls
            audio[p] = other * TOKENS_PER_CLASS + int(rng.integers(TOKENS_PER_CLASS))
        key = (tuple(int(a) for a in audio), order)
        if key in seen:
            continue
        seen.add(key)
        records.append(_make_record(cls, order, key[0]))
    texts = textualize(records, MockDeterministic(seed))
    if texts.failures:
        raise RuntimeError(f"mock textualization failed: {texts.failures}")
    return SyntheticData(records, texts.records, [r.answer for r in records], vocab)
