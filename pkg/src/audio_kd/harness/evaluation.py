"""Answer standardization, accuracy and unweighted accuracy, and held-out diagnostics."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from ..datamodel import ANSWER, CotaRecord, Mode, TextRecord, Vocab, tokenize
from ..divergence import JSD, HiddenLossKind
from ..losses import ac_table, top_table
from ..pipeline import LABELS, parse_options
from ..toymodel import DecoderLM, collate, forward, generate
from .config import SamplingConfig

UNANSWERED = None


def _word_pattern(text: str, ignore_case: bool) -> re.Pattern:
    flags = re.IGNORECASE if ignore_case else 0
    return re.compile(r"(?<![\w<])" + re.escape(text) + r"(?![\w>])", flags)


def standardize_answer(generated: str, options: Sequence[str]) -> int | None:
    """Map generated text to an option index, or None when nothing matches.

    Only text after the last answer marker is scanned (the whole text if there
    is no marker). Option labels A, B, ... and option texts both count; the
    match that starts last wins, and at equal starts the longer one.
    """
    if not options:
        raise ValueError("options must be non-empty")
    cut = generated.rfind(ANSWER)
    segment = generated if cut < 0 else generated[cut + len(ANSWER):]
    best = None
    for i, text in enumerate(options):
        pats = [_word_pattern(text, ignore_case=True)] if text.strip() else []
        if i < len(LABELS):
            pats.append(_word_pattern(LABELS[i], ignore_case=False))
        for pat in pats:
            for m in pat.finditer(segment):
                key = (m.start(), m.end() - m.start())
                if best is None or key > best[0]:
                    best = (key, i)
    return UNANSWERED if best is None else best[1]


def score(predictions: Sequence[int | None], gold: Sequence[int]) -> tuple[float, float]:
    """(accuracy %, unweighted accuracy %) where UA averages per-class recall."""
    if not gold:
        return 0.0, 0.0
    correct = np.array([p is not None and p == g for p, g in zip(predictions, gold)])
    gold_arr = np.asarray(gold)
    recalls = [correct[gold_arr == c].mean() for c in sorted(set(gold))]
    return 100.0 * float(correct.mean()), 100.0 * float(np.mean(recalls))


def gold_index(record, options: Sequence[str]) -> int:
    answer = record.answer.strip()
    if answer in LABELS[: len(options)]:
        return LABELS.index(answer)
    return list(options).index(answer)


@dataclass
class EvalResult:
    accuracy: float
    unweighted_accuracy: float
    predictions: list = field(default_factory=list)
    truncated: int = 0
    unanswered: int = 0

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "unweighted_accuracy": self.unweighted_accuracy,
            "truncated": self.truncated,
            "unanswered": self.unanswered,
            "n": len(self.predictions),
        }


def evaluate(student: DecoderLM, records: Sequence[CotaRecord], vocab: Vocab,
             sampling: SamplingConfig, answer_key: Sequence[str] | None = None, seed: int = 0) -> EvalResult:
    """Sample a trace + answer for each record and score the standardized answers.

    Item ``i`` samples with seed ``(seed, i)`` so results do not depend on batching.
    """
    samples = [tokenize(r, vocab, Mode.STUDENT_AUDIO) for r in records]
    prompts = [s.tokens[: s.prompt_length] for s in samples]
    seeds = [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in range(len(records))]
    outs = generate(student, prompts, seeds, eos_id=vocab.eos_id, max_new=sampling.max_new,
                    temperature=sampling.temperature, top_k=sampling.top_k, top_p=sampling.top_p)
    preds, gold = [], []
    truncated = unanswered = 0
    for i, (rec, (new, finished)) in enumerate(zip(records, outs)):
        options = parse_options(rec.question) or list(LABELS)
        if answer_key is not None:
            rec = replace(rec, answer=answer_key[i])
        gold.append(gold_index(rec, options))
        if not finished:
            truncated += 1
            preds.append(UNANSWERED)
            continue
        pred = standardize_answer(vocab.decode(new), options)
        unanswered += pred is UNANSWERED
        preds.append(pred)
    acc, ua = score(preds, gold)
    return EvalResult(acc, ua, preds, truncated, unanswered)


@torch.no_grad()
def heldout_diagnostics(student: DecoderLM, teacher: DecoderLM, snapshot: DecoderLM,
                        audio_records: Sequence[CotaRecord], text_records: Sequence[TextRecord],
                        vocab: Vocab, hidden_kind=HiddenLossKind.SOFTMAX_JSD,
                        batch_size: int = 100) -> dict:
    """Teacher-forced fidelity measures on held-out items.

    ``top_jsd_per_token``: mean top-layer JSD to the teacher per output step.
    ``ac_per_token``: mean acoustic divergence to the snapshot per audio token
    (summed over layers, as in the acoustic loss).
    """
    top_total = ac_total = 0.0
    n_out = n_audio = 0
    for lo in range(0, len(audio_records), batch_size):
        s_batch = collate([tokenize(r, vocab, Mode.STUDENT_AUDIO) for r in audio_records[lo: lo + batch_size]])
        t_batch = collate([tokenize(r, vocab, Mode.TEACHER_TEXT) for r in text_records[lo: lo + batch_size]])
        s_trace = forward(student, s_batch)
        top_total += float(top_table(JSD, forward(teacher, t_batch), s_trace).sum())
        ac_total += float(ac_table(hidden_kind, forward(snapshot, s_batch), s_trace).sum())
        n_out += int(s_batch.out_mask.sum())
        n_audio += int(s_batch.audio_mask.sum())
    return {
        "top_jsd_per_token": top_total / max(n_out, 1),
        "ac_per_token": ac_total / max(n_audio, 1),
    }
