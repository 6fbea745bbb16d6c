"""Sample records, the shared vocabulary, tokenization and JSONL serialization.

Two record shapes exist: :class:`CotaRecord` (opaque audio tokens + question,
trace, answer) and :class:`TextRecord` (the same sample with the audio replaced
by a text description). Both tokenize into a :class:`TokenizedSample` whose
per-position roles mark the audio-input positions and the predicted outputs.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

STAGES = ("planning", "caption", "reasoning", "summary")

PAD = "<pad>"
UNK = "<unk>"
BOS = "<bos>"
EOS = "<eos>"
AUDIO_OPEN = "<audio>"
AUDIO_CLOSE = "</audio>"
DESC = "<desc>"
QUESTION = "<q>"
STAGE_MARKERS = ("<plan>", "<cap>", "<reason>", "<sum>")
ANSWER = "<answer>"
SPECIALS = (PAD, UNK, BOS, EOS, AUDIO_OPEN, AUDIO_CLOSE, DESC, QUESTION, *STAGE_MARKERS, ANSWER)


class ValidationError(ValueError):
    """A record field is missing or empty."""

    def __init__(self, field_name: str, message: str | None = None):
        self.field = field_name
        super().__init__(message or f"field {field_name!r} must be non-empty")


class DataError(ValueError):
    """A JSONL line could not be turned into a record."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def _require_text(name: str, value) -> None:
    if not isinstance(value, str) or not value.strip():
        raise ValidationError(name)


@dataclass(frozen=True)
class ReasoningTrace:
    planning: str
    caption: str
    reasoning: str
    summary: str

    def __post_init__(self):
        for name in STAGES:
            _require_text(f"trace.{name}", getattr(self, name))

    def stages(self) -> tuple[str, str, str, str]:
        return (self.planning, self.caption, self.reasoning, self.summary)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in STAGES}

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningTrace":
        if not isinstance(d, dict):
            raise ValidationError("trace", "field 'trace' must be an object")
        missing = [name for name in STAGES if name not in d]
        if missing:
            raise ValidationError(f"trace.{missing[0]}", f"missing field 'trace.{missing[0]}'")
        return cls(**{name: d[name] for name in STAGES})


@dataclass(frozen=True)
class CotaRecord:
    """Audio sample: opaque audio token indices, question, trace and answer."""

    audio: tuple[int, ...]
    question: str
    trace: ReasoningTrace
    answer: str

    def __post_init__(self):
        object.__setattr__(self, "audio", tuple(int(a) for a in self.audio))
        if len(self.audio) < 1:
            raise ValidationError("audio", "field 'audio' must hold at least one token")
        if any(a < 0 for a in self.audio):
            raise ValidationError("audio", "audio token indices must be non-negative")
        _require_text("question", self.question)
        _require_text("answer", self.answer)

    def to_dict(self) -> dict:
        return {
            "audio": list(self.audio),
            "question": self.question,
            "trace": self.trace.to_dict(),
            "answer": self.answer,
        }


@dataclass(frozen=True)
class TextRecord:
    """Textualized sample: the audio is replaced by a description."""

    description: str
    question: str
    trace: ReasoningTrace
    answer: str

    def __post_init__(self):
        _require_text("description", self.description)
        _require_text("question", self.question)
        _require_text("answer", self.answer)

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "question": self.question,
            "trace": self.trace.to_dict(),
            "answer": self.answer,
        }


Record = Union[CotaRecord, TextRecord]


def record_from_dict(d: dict) -> Record:
    if not isinstance(d, dict):
        raise ValidationError("record", "record must be a JSON object")
    kind = TextRecord if "description" in d and "audio" not in d else CotaRecord
    required = ("description" if kind is TextRecord else "audio", "question", "trace", "answer")
    for name in required:
        if name not in d:
            raise ValidationError(name, f"missing field {name!r}")
    trace = ReasoningTrace.from_dict(d["trace"])
    if kind is TextRecord:
        return TextRecord(d["description"], d["question"], trace, d["answer"])
    if not isinstance(d["audio"], list) or not all(isinstance(a, int) for a in d["audio"]):
        raise ValidationError("audio", "field 'audio' must be an array of ints")
    return CotaRecord(tuple(d["audio"]), d["question"], trace, d["answer"])


def read_jsonl(path) -> list[Record]:
    """Read one record per line. Blank lines are skipped; line numbers are 1-based."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(lineno, f"malformed JSON ({exc.msg})") from None
            try:
                records.append(record_from_dict(obj))
            except ValidationError as exc:
                raise DataError(lineno, str(exc)) from exc
    return records


def write_jsonl(records: Iterable[Record], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


class Vocab:
    """Dense id <-> token table shared by teacher and student.

    Audio token index ``k`` from a record maps to the token ``<a{k}>``.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        missing = [s for s in SPECIALS if s not in tokens]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.tokens = tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        self.n_audio = sum(1 for t in tokens if _audio_index(t) is not None)

    @classmethod
    def build(cls, words: Iterable[str], n_audio: int, size: int | None = None) -> "Vocab":
        tokens = list(SPECIALS) + [f"<a{k}>" for k in range(n_audio)]
        for w in words:
            if w not in tokens:
                tokens.append(w)
        if size is not None:
            if len(tokens) > size:
                raise ValueError(f"{len(tokens)} tokens do not fit a vocabulary of {size}")
            tokens += [f"<reserved{i}>" for i in range(size - len(tokens))]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def audio_id(self, k: int) -> int:
        return self.id(f"<a{k}>")

    def audio_index(self, idx: int) -> int | None:
        return _audio_index(self.tokens[idx])

    def encode_text(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def answer_id(self) -> int:
        return self._index[ANSWER]


def _audio_index(tok: str) -> int | None:
    if tok.startswith("<a") and tok.endswith(">") and tok[2:-1].isdigit():
        return int(tok[2:-1])
    return None


class Role(enum.IntEnum):
    AUDIO_INPUT = 0
    TEXT_PROMPT = 1
    OUTPUT = 2


class Mode(str, enum.Enum):
    STUDENT_AUDIO = "student-audio"
    TEACHER_TEXT = "teacher-text"


@dataclass(frozen=True)
class TokenizedSample:
    """Token ids with a role per position.

    ``output_targets[j]`` is the id of the j-th output token; it is predicted
    from position ``prediction_positions[j]`` (the position just before it).
    ``output_stages[j]`` is 0..3 for the trace stages and 4 for the answer.
    """

    tokens: tuple[int, ...]
    roles: tuple[Role, ...]
    output_targets: tuple[int, ...]
    output_stages: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.tokens) != len(self.roles):
            raise ValueError("roles must have one entry per token")
        out = self.output_positions
        if len(out) != len(self.output_targets):
            raise ValueError("every output position needs a target id")
        if out and out[0] == 0:
            raise ValueError("the first position cannot be an output")
        ax = self.audio_positions
        if ax and ax[-1] - ax[0] + 1 != len(ax):
            raise ValueError("audio positions must be contiguous")

    @property
    def audio_positions(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == Role.AUDIO_INPUT)

    @property
    def output_positions(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == Role.OUTPUT)

    @property
    def prediction_positions(self) -> tuple[int, ...]:
        return tuple(i - 1 for i in self.output_positions)

    @property
    def prompt_length(self) -> int:
        out = self.output_positions
        return out[0] if out else len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def output_ids(record: Record, vocab: Vocab) -> tuple[list[int], list[int]]:
    """The output sequence y (trace stages then answer) and its stage labels."""
    ids: list[int] = []
    stages: list[int] = []
    for j, (marker, text) in enumerate(zip(STAGE_MARKERS, record.trace.stages())):
        chunk = [vocab.id(marker)] + vocab.encode_text(text)
        ids += chunk
        stages += [j] * len(chunk)
    chunk = [vocab.answer_id] + vocab.encode_text(record.answer) + [vocab.eos_id]
    ids += chunk
    stages += [4] * len(chunk)
    return ids, stages


def tokenize(record: Record, vocab: Vocab, mode: Mode | str) -> TokenizedSample:
    mode = Mode(mode)
    prompt: list[int] = [vocab.id(BOS)]
    roles: list[Role] = [Role.TEXT_PROMPT]
    if mode is Mode.STUDENT_AUDIO:
        if not isinstance(record, CotaRecord):
            raise TypeError("student-audio mode needs a CotaRecord")
        prompt.append(vocab.id(AUDIO_OPEN))
        roles.append(Role.TEXT_PROMPT)
        prompt += [vocab.audio_id(a) for a in record.audio]
        roles += [Role.AUDIO_INPUT] * len(record.audio)
        prompt.append(vocab.id(AUDIO_CLOSE))
        roles.append(Role.TEXT_PROMPT)
    else:
        if not isinstance(record, TextRecord):
            raise TypeError("teacher-text mode needs a TextRecord")
        desc = [vocab.id(DESC)] + vocab.encode_text(record.description)
        prompt += desc
        roles += [Role.TEXT_PROMPT] * len(desc)
    q = [vocab.id(QUESTION)] + vocab.encode_text(record.question)
    prompt += q
    roles += [Role.TEXT_PROMPT] * len(q)
    y, stages = output_ids(record, vocab)
    return TokenizedSample(
        tokens=tuple(prompt + y),
        roles=tuple(roles + [Role.OUTPUT] * len(y)),
        output_targets=tuple(y),
        output_stages=tuple(stages),
    )


def _split_on(tokens: list[str], marker: str) -> tuple[list[str], list[str]]:
    i = tokens.index(marker)
    return tokens[:i], tokens[i + 1:]


def detokenize(sample: TokenizedSample, vocab: Vocab) -> Record:
    """Inverse of :func:`tokenize` for vocabularies covering the record."""
    toks = [vocab.token(i) for i in sample.tokens]
    if toks[0] == BOS:
        toks = toks[1:]
    audio = None
    description = None
    if toks[0] == AUDIO_OPEN:
        inner, toks = _split_on(toks[1:], AUDIO_CLOSE)
        audio = tuple(_audio_index(t) for t in inner)
    elif toks[0] == DESC:
        inner, toks = _split_on(toks[1:], QUESTION)
        description = " ".join(inner)
        toks = [QUESTION] + toks
    question, rest = _split_on(toks[1:], STAGE_MARKERS[0])
    stages = []
    for nxt in STAGE_MARKERS[1:] + (ANSWER,):
        text, rest = _split_on(rest, nxt)
        stages.append(" ".join(text))
    if EOS in rest:
        rest = rest[: rest.index(EOS)]
    trace = ReasoningTrace(*stages)
    if audio is not None:
        return CotaRecord(audio, " ".join(question), trace, " ".join(rest))
    return TextRecord(description, " ".join(question), trace, " ".join(rest))
