"""Experiment runner: teacher training, snapshot, distillation, evaluation, logging."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..alignment import ProjectionBank, build_layer_map, build_schedule
from ..datamodel import CotaRecord, Mode, TextRecord, Vocab, read_jsonl, tokenize
from ..divergence import DivergenceKind, HiddenLossKind
from ..losses import LossBreakdown, LossTerms, LossWeights, NonFiniteLoss, Objective, compute_loss, write_breakdown_csv
from ..pipeline import SOUND_CLASSES, SYNTH_WORDS, TOKENS_PER_CLASS, gen_synthetic, synthetic_vocab
from ..toymodel import (DecoderLM, ModelSpec, build_model, collate, freeze, load_checkpoint, load_model,
                        model_tensors, save_checkpoint, snapshot, spec_to_dict)
from .config import OptimizerConfig, RunConfig
from .evaluation import evaluate, heldout_diagnostics

log = logging.getLogger(__name__)

# offsets mixed into the global seed for each random stream
SEED_STUDENT, SEED_TEACHER, SEED_BANK, SEED_ORDER, SEED_TEACHER_ORDER, SEED_EVAL, SEED_DATA = range(1, 8)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


class MetricsLog:
    """Append-only list of JSON-serializable records.

    Wall-clock timings are kept apart in ``timings`` so the records themselves
    are identical across repeated runs with the same seeds.
    """

    def __init__(self):
        self.records: list[dict] = []
        self.timings: dict[str, float] = {}

    def append(self, kind: str, **payload) -> None:
        self.records.append({"type": kind, **payload})

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]

    def breakdowns(self) -> list[tuple[int, LossBreakdown]]:
        return [(r["step"], LossBreakdown.from_dict(r["breakdown"])) for r in self.of_type("step")]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        write_breakdown_csv(self.breakdowns(), out / "breakdown.csv")
        (out / "timing.json").write_text(json.dumps(self.timings, indent=2), encoding="utf-8")


@dataclass
class Dataset:
    vocab: Vocab
    train_audio: list[CotaRecord]
    train_text: list[TextRecord]
    eval_audio: list[CotaRecord]
    eval_text: list[TextRecord] | None = None


def load_data(config: RunConfig) -> Dataset:
    dc = config.data
    if dc.synthetic is not None:
        syn = dc.synthetic
        data_seed = derive_seed(config.seed, SEED_DATA) if syn.seed is None else syn.seed
        # one generation guarantees train and eval items are distinct
        data = gen_synthetic(syn.n_train + syn.n_eval, synthetic_vocab(config.student.vocab_size), seed=data_seed)
        n = syn.n_train
        return Dataset(data.vocab, data.audio_records[:n], data.text_records[:n],
                       data.audio_records[n:], data.text_records[n:])
    train_audio = read_jsonl(dc.train_audio)
    train_text = read_jsonl(dc.train_text)
    eval_audio = read_jsonl(dc.eval)
    if len(train_audio) != len(train_text):
        raise ValueError("train_audio and train_text must be aligned line by line")
    for i, (a, t) in enumerate(zip(train_audio, train_text)):
        if (a.question, a.trace, a.answer) != (t.question, t.trace, t.answer):
            raise ValueError(f"train_audio and train_text disagree at record {i}")
    vocab = vocab_for([*train_audio, *train_text, *eval_audio], config.student.vocab_size)
    return Dataset(vocab, train_audio, train_text, eval_audio)


def vocab_for(records, size: int) -> Vocab:
    """The synthetic vocabulary extended by any other words the records use."""
    words = list(SYNTH_WORDS)
    n_audio = TOKENS_PER_CLASS * len(SOUND_CLASSES)
    known = set(words)
    for r in records:
        if isinstance(r, CotaRecord):
            n_audio = max(n_audio, max(r.audio) + 1)
        texts = [r.question, *r.trace.stages(), r.answer]
        if isinstance(r, TextRecord):
            texts.append(r.description)
        for w in " ".join(texts).split():
            if w not in known:
                known.add(w)
                words.append(w)
    return Vocab.build(words, n_audio=n_audio, size=size)


def check_disjoint(train: list[CotaRecord], held_out: list[CotaRecord]) -> None:
    seen = {(r.audio, r.question) for r in train}
    overlap = [i for i, r in enumerate(held_out) if (r.audio, r.question) in seen]
    if overlap:
        raise ValueError(f"{len(overlap)} evaluation items also appear in training (first: {overlap[0]})")


def make_optimizer(params, cfg: OptimizerConfig):
    opt = torch.optim.Adam(params, lr=cfg.lr)
    warmup = cfg.warmup
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warmup) if warmup else 1.0)
    return opt, sched


def _batches(n: int, batch_size: int, steps: int, seed: int):
    """Yield index arrays, reshuffling once per pass over the data."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos: pos + batch_size]
        pos += batch_size


def train_teacher(config: RunConfig, data: Dataset, metrics: MetricsLog | None = None) -> DecoderLM:
    """Plain cross-entropy training of the textual teacher on the textualized set."""
    spec = config.teacher.to_spec(derive_seed(config.seed, SEED_TEACHER))
    teacher = build_model(spec)
    samples = [tokenize(r, data.vocab, Mode.TEACHER_TEXT) for r in data.train_text]
    objective = Objective(terms=LossTerms(top=False, layer=False, ac=False, sft=True),
                          weights=LossWeights(0.0, 0.0, 1.0))
    cfg = config.teacher_optimizer
    opt, sched = make_optimizer(teacher.parameters(), cfg)
    for step, idx in enumerate(_batches(len(samples), cfg.batch_size, cfg.steps,
                                        derive_seed(config.seed, SEED_TEACHER_ORDER))):
        batch = collate([samples[i] for i in idx], data.vocab.pad_id)
        loss, bd = compute_loss(objective, teacher, batch)
        if not torch.isfinite(loss):
            raise NonFiniteLoss("sft", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if metrics is not None and (step % 50 == 0 or step == cfg.steps - 1):
            metrics.append("teacher_step", step=step, sft=bd.sft)
    return freeze(teacher)


def load_teacher(path) -> DecoderLM:
    tensors, meta = load_checkpoint(path)
    return freeze(load_model(tensors, ModelSpec(**meta["spec"])))


@dataclass
class RunResult:
    metrics: MetricsLog
    student: DecoderLM
    teacher: DecoderLM
    snapshot: DecoderLM
    bank: ProjectionBank | None
    data: Dataset
    final: dict = field(default_factory=dict)


def build_objective(config: RunConfig) -> Objective:
    schedule = build_schedule(config.layer_spec, config.student.layers)
    return Objective(
        terms=config.terms,
        weights=config.weights.to_weights(),
        divergence=DivergenceKind.parse(config.divergence),
        hidden=HiddenLossKind(config.hidden_divergence),
        layer_map=build_layer_map(config.student.layers, config.teacher.layers),
        schedule=schedule,
    )


def run_experiment(config: RunConfig, teacher: DecoderLM | None = None,
                   data: Dataset | None = None) -> RunResult:
    """Train teacher (unless given), snapshot the student, distill, evaluate.

    Passing ``teacher`` and ``data`` lets several presets share one teacher.
    """
    t0 = time.perf_counter()
    metrics = MetricsLog()
    metrics.append("config", config=config.model_dump(mode="json"))
    objective = build_objective(config)  # rejects contradictions before any compute
    data = data or load_data(config)
    check_disjoint(data.train_audio, data.eval_audio)
    vocab = data.vocab
    if config.student.vocab_size < len(vocab):
        raise ValueError(f"vocab_size {config.student.vocab_size} < vocabulary of {len(vocab)}")

    # (1) teacher
    if teacher is None:
        if config.teacher_ckpt:
            teacher = load_teacher(config.teacher_ckpt)
        else:
            teacher = train_teacher(config, data, metrics)
    if teacher.spec.layers != config.teacher.layers:
        raise ValueError("teacher depth does not match the configuration")
    metrics.timings["teacher"] = time.perf_counter() - t0

    # (2) student, (3) frozen snapshot taken before any update
    student = build_model(config.student.to_spec(derive_seed(config.seed, SEED_STUDENT)))
    s0 = snapshot(student)
    bank = None
    if objective.terms.layer and objective.schedule.selected:
        bank = ProjectionBank(objective.schedule.selected, config.student.hidden_dim,
                              config.teacher.hidden_dim, seed=derive_seed(config.seed, SEED_BANK))

    # (4) distillation
    s_samples = [tokenize(r, vocab, Mode.STUDENT_AUDIO) for r in data.train_audio]
    t_samples = [tokenize(r, vocab, Mode.TEACHER_TEXT) for r in data.train_text]
    trainable = list(student.parameters()) + (list(bank.parameters()) if bank is not None else [])
    cfg = config.optimizer
    steps = 0 if config.preset_name == "baseline" else cfg.steps
    opt, sched = make_optimizer(trainable, cfg)
    t1 = time.perf_counter()
    for step, idx in enumerate(_batches(len(s_samples), cfg.batch_size, steps,
                                        derive_seed(config.seed, SEED_ORDER))):
        s_batch = collate([s_samples[i] for i in idx], vocab.pad_id)
        t_batch = collate([t_samples[i] for i in idx], vocab.pad_id)
        joint, bd = compute_loss(objective, student, s_batch, teacher=teacher, t_batch=t_batch,
                                 snapshot=s0, bank=bank)
        _check_finite(bd, step)
        metrics.append("step", step=step, lr=sched.get_last_lr()[0], breakdown=bd.to_dict())
        opt.zero_grad()
        if joint.requires_grad:
            joint.backward()
        opt.step()
        sched.step()
    metrics.timings["train"] = time.perf_counter() - t1

    # (5) evaluation
    freeze(student)
    t2 = time.perf_counter()
    final = {}
    if data.eval_text is not None:
        final.update(heldout_diagnostics(student, teacher, s0, data.eval_audio, data.eval_text, vocab,
                                         objective.hidden))
    if config.generate_eval:
        res = evaluate(student, data.eval_audio, vocab, config.sampling,
                       seed=derive_seed(config.seed, SEED_EVAL))
        final.update(res.summary())
    metrics.timings["eval"] = time.perf_counter() - t2
    metrics.append("eval", **final)
    metrics.timings["total"] = time.perf_counter() - t0

    result = RunResult(metrics, student, teacher, s0, bank, data, final)
    if config.out_dir:
        write_outputs(result, config.out_dir)
    return result


def _check_finite(bd: LossBreakdown, step: int) -> None:
    for term in ("top_sum", "layer_sum", "ac_sum", "sft", "joint"):
        if not np.isfinite(getattr(bd, term)):
            raise NonFiniteLoss(term, step)


def checkpoint_meta(state: DecoderLM, vocab: Vocab, bank: ProjectionBank | None = None) -> dict:
    meta = {"spec": spec_to_dict(state.spec), "vocab": list(vocab.tokens)}
    if bank is not None:
        meta["bank"] = {"layers": list(bank.layers), "d_student": bank.d_student, "d_teacher": bank.d_teacher}
    return meta


def save_student(path, student: DecoderLM, vocab: Vocab, bank: ProjectionBank | None = None) -> None:
    tensors = model_tensors(student)
    if bank is not None:
        tensors.update({f"bank/{layer}": bank.matrix(layer) for layer in bank.layers})
    save_checkpoint(path, tensors, checkpoint_meta(student, vocab, bank))


def load_student(path) -> tuple[DecoderLM, Vocab, ProjectionBank | None]:
    tensors, meta = load_checkpoint(path)
    student = load_model(tensors, ModelSpec(**meta["spec"]))
    bank = None
    if "bank" in meta:
        b = meta["bank"]
        bank = ProjectionBank(b["layers"], b["d_student"], b["d_teacher"])
        with torch.no_grad():
            for layer in bank.layers:
                bank.matrix(layer).copy_(tensors[f"bank/{layer}"])
    return student, Vocab(meta["vocab"]), bank


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    result.metrics.write(out)
    save_student(out / "student.ckpt", result.student, result.data.vocab, result.bank)
    save_checkpoint(out / "teacher.ckpt", model_tensors(result.teacher),
                    checkpoint_meta(result.teacher, result.data.vocab))
