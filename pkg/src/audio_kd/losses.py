"""Distillation objective: top-layer KD, layer-wise hidden KD, acoustic KD and SFT.

Each term is first computed as a dense table (per sample, per output step or
audio position, per layer), then summed over steps/layers and averaged over
the batch. The tables feed :class:`LossBreakdown`, which can recompose the
joint objective from its parts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import torch

from .alignment import LayerMap, LayerSchedule, ProjectionBank
from .divergence import JSD, DivergenceKind, HiddenLossKind, kd_hidden, kd_logits
from .toymodel import Batch, DecoderLM, ForwardTrace, forward

STAGE_NAMES = ("planning", "caption", "reasoning", "summary", "answer")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, step: int | None = None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss term {term!r}{where}")


@dataclass(frozen=True)
class LossWeights:
    alpha_layer: float = 0.05
    alpha_ac: float = 0.05
    alpha_sft: float = 0.5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class LossTerms:
    """Which terms of the joint objective are switched on."""

    top: bool = True
    layer: bool = True
    ac: bool = True
    sft: bool = True


def _check_aligned(t_batch: Batch, s_batch: Batch) -> None:
    if t_batch.targets.shape != s_batch.targets.shape or not (
        torch.equal(t_batch.out_mask, s_batch.out_mask)
        and torch.equal(t_batch.targets * t_batch.out_mask, s_batch.targets * s_batch.out_mask)
    ):
        raise ValueError("teacher and student output sequences differ")


# --- dense per-term tables ------------------------------------------------


def top_table(kind, teacher: ForwardTrace, student: ForwardTrace) -> torch.Tensor:
    """[B, Y]: KD(teacher || student) at each output step (zero on padding)."""
    _check_aligned(teacher.batch, student.batch)
    kind = DivergenceKind.parse(kind)
    t = teacher.output_logits().detach()
    terms = kd_logits(kind, t, student.output_logits())
    return terms * student.batch.out_mask


def layer_table(kind, teacher: ForwardTrace, student: ForwardTrace, layer_map: LayerMap,
                schedule: LayerSchedule, bank: ProjectionBank | None) -> torch.Tensor:
    """[B, Y, L_S]: hidden KD between projected teacher and student states per layer.

    Columns of unselected layers stay zero.
    """
    _check_aligned(teacher.batch, student.batch)
    s_hidden = student.output_hidden()
    n_layers, b, y, _ = s_hidden.shape
    if layer_map.n_student != n_layers or layer_map.n_teacher != teacher.hidden.shape[0]:
        raise ValueError("layer map does not match the model depths")
    if schedule.selected and (bank is None or set(schedule.selected) - set(bank.layers)):
        raise ValueError("projection bank does not cover the layer schedule")
    t_hidden = teacher.output_hidden().detach()
    cols = []
    for l_s in range(1, n_layers + 1):
        if l_s not in schedule.selected:
            cols.append(s_hidden.new_zeros(b, y))
            continue
        l_t = layer_map.teacher_layer(l_s)
        projected = bank(l_s, t_hidden[l_t - 1])
        cols.append(kd_hidden(kind, projected, s_hidden[l_s - 1]))
    return torch.stack(cols, dim=-1) * student.batch.out_mask.unsqueeze(-1)


def ac_table(kind, snapshot: ForwardTrace, student: ForwardTrace) -> torch.Tensor:
    """[B, X, L_S]: hidden KD between snapshot and student at audio positions."""
    if snapshot.hidden.shape[0] != student.hidden.shape[0] or snapshot.hidden.shape[-1] != student.hidden.shape[-1]:
        raise ValueError("snapshot and student architectures differ")
    if not torch.equal(snapshot.batch.tokens, student.batch.tokens):
        raise ValueError("snapshot and student must see the same input")
    src = snapshot.audio_hidden().detach()
    cur = student.audio_hidden()
    terms = kd_hidden(kind, src, cur)  # [L, B, X]
    return terms.permute(1, 2, 0) * student.batch.audio_mask.unsqueeze(-1)


def sft_table(student: ForwardTrace) -> torch.Tensor:
    """[B, Y]: -ln p_student(target) at each output step."""
    logp = torch.log_softmax(student.output_logits(), dim=-1)
    nll = -logp.gather(-1, student.batch.targets.unsqueeze(-1)).squeeze(-1)
    return nll * student.batch.out_mask


# --- scalar terms (sum over steps/layers, mean over batch) -----------------


def _reduce(table: torch.Tensor) -> torch.Tensor:
    return table.reshape(table.shape[0], -1).sum(-1).mean()


def loss_top(teacher: ForwardTrace, student: ForwardTrace, kind=JSD) -> torch.Tensor:
    return _reduce(top_table(kind, teacher, student))


def loss_layerwise(teacher: ForwardTrace, student: ForwardTrace, layer_map: LayerMap,
                   schedule: LayerSchedule, bank: ProjectionBank | None,
                   kind=HiddenLossKind.SOFTMAX_JSD) -> torch.Tensor:
    return _reduce(layer_table(kind, teacher, student, layer_map, schedule, bank))


def loss_acoustic(snapshot: ForwardTrace, student: ForwardTrace,
                  kind=HiddenLossKind.SOFTMAX_JSD) -> torch.Tensor:
    return _reduce(ac_table(kind, snapshot, student))


def loss_sft(student: ForwardTrace) -> torch.Tensor:
    return _reduce(sft_table(student))


def loss_txt(top, layerwise, alpha_layer: float):
    """Textual objective: top-layer KD plus the weighted layer-wise sum."""
    return top + alpha_layer * layerwise


# --- breakdown ------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Batch-averaged terms plus the sub-tables they were summed from."""

    top_sum: float
    layer_sum: float
    ac_sum: float
    sft: float
    joint: float
    weights: LossWeights
    top_per_step: list[float] = field(default_factory=list)
    layer_per_layer: list[float] = field(default_factory=list)
    layer_per_step: list[float] = field(default_factory=list)
    ac_per_layer: list[float] = field(default_factory=list)
    ac_per_position: list[float] = field(default_factory=list)
    sft_per_step: list[float] = field(default_factory=list)
    per_stage: dict[str, dict[str, float]] = field(default_factory=dict)

    def recompose(self) -> float:
        w = self.weights
        return (
            math.fsum(self.top_per_step)
            + w.alpha_layer * math.fsum(self.layer_per_layer)
            + w.alpha_ac * math.fsum(self.ac_per_layer)
            + w.alpha_sft * math.fsum(self.sft_per_step)
        )

    @property
    def txt(self) -> float:
        return self.top_sum + self.weights.alpha_layer * self.layer_sum

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossBreakdown":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class LossParts:
    """Dense tables for one batch; any may be None when the term is disabled."""

    top: torch.Tensor | None = None
    layer: torch.Tensor | None = None
    ac: torch.Tensor | None = None
    sft: torch.Tensor | None = None
    stages: torch.Tensor | None = None


def _scalar(table: torch.Tensor | None) -> torch.Tensor | None:
    return None if table is None else _reduce(table)


def _col_means(table: torch.Tensor | None, dims: tuple[int, ...]) -> list[float]:
    if table is None:
        return []
    b = table.shape[0]
    return (table.detach().sum(dim=dims) / b).tolist()


def loss_joint(parts: LossParts, weights: LossWeights) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine tables into the joint scalar and an auditable breakdown."""
    scalars = {
        "top": _scalar(parts.top),
        "layer": _scalar(parts.layer),
        "ac": _scalar(parts.ac),
        "sft": _scalar(parts.sft),
    }
    for name, value in scalars.items():
        if value is not None and not torch.isfinite(value):
            raise NonFiniteLoss(name)
    zero = torch.zeros((), dtype=torch.float64)
    top = scalars["top"] if scalars["top"] is not None else zero
    layer = scalars["layer"] if scalars["layer"] is not None else zero
    ac = scalars["ac"] if scalars["ac"] is not None else zero
    sft = scalars["sft"] if scalars["sft"] is not None else zero
    joint = loss_txt(top, layer, weights.alpha_layer) + weights.alpha_ac * ac + weights.alpha_sft * sft

    per_stage: dict[str, dict[str, float]] = {}
    if parts.stages is not None:
        b = parts.stages.shape[0]
        for j, name in enumerate(STAGE_NAMES):
            sel = parts.stages == j
            entry = {}
            for term, table in (("top", parts.top), ("sft", parts.sft)):
                if table is not None:
                    entry[term] = float((table.detach() * sel).sum() / b)
            if parts.layer is not None:
                entry["layer"] = float((parts.layer.detach().sum(-1) * sel).sum() / b)
            per_stage[name] = entry

    breakdown = LossBreakdown(
        top_sum=float(top.detach()),
        layer_sum=float(layer.detach()),
        ac_sum=float(ac.detach()),
        sft=float(sft.detach()),
        joint=float(joint.detach()),
        weights=weights,
        top_per_step=_col_means(parts.top, (0,)),
        layer_per_layer=_col_means(parts.layer, (0, 1)),
        layer_per_step=_col_means(parts.layer, (0, 2)),
        ac_per_layer=_col_means(parts.ac, (0, 1)),
        ac_per_position=_col_means(parts.ac, (0, 2)),
        sft_per_step=_col_means(parts.sft, (0,)),
        per_stage=per_stage,
    )
    return joint, breakdown


@dataclass
class Objective:
    """Everything needed to evaluate the joint loss for a (teacher, student) batch pair."""

    terms: LossTerms
    weights: LossWeights = field(default_factory=LossWeights)
    divergence: DivergenceKind = JSD
    hidden: HiddenLossKind = HiddenLossKind.SOFTMAX_JSD
    layer_map: LayerMap | None = None
    schedule: LayerSchedule | None = None


def compute_parts(objective: Objective, student: DecoderLM, s_batch: Batch, *,
                  teacher: DecoderLM | None = None, t_batch: Batch | None = None,
                  snapshot: DecoderLM | None = None, bank: ProjectionBank | None = None) -> LossParts:
    terms = objective.terms
    s_trace = forward(student, s_batch)
    parts = LossParts(stages=s_batch.stages * s_batch.out_mask)
    layer_on = terms.layer and objective.schedule is not None and bool(objective.schedule.selected)
    if terms.top or layer_on:
        if teacher is None or t_batch is None:
            raise ValueError("textual KD terms need the teacher and its batch")
        t_trace = forward(teacher, t_batch)
        if terms.top:
            parts.top = top_table(objective.divergence, t_trace, s_trace)
        if layer_on:
            parts.layer = layer_table(objective.hidden, t_trace, s_trace, objective.layer_map,
                                      objective.schedule, bank)
    if terms.ac:
        if snapshot is None:
            raise ValueError("acoustic KD needs the frozen snapshot")
        parts.ac = ac_table(objective.hidden, forward(snapshot, s_batch), s_trace)
    if terms.sft:
        parts.sft = sft_table(s_trace)
    return parts


def compute_loss(objective: Objective, student: DecoderLM, s_batch: Batch, **sources):
    """Return (joint scalar tensor, LossBreakdown)."""
    return loss_joint(compute_parts(objective, student, s_batch, **sources), objective.weights)


def backward(objective: Objective, student: DecoderLM, s_batch: Batch, *,
             bank: ProjectionBank | None = None, **sources) -> tuple[dict[str, torch.Tensor], LossBreakdown]:
    """Exact reverse-mode gradients of the joint loss for every trainable parameter.

    Keys are ``student.<name>`` and ``bank.<layer>``. Frozen models contribute no keys.
    """
    params = {f"student.{n}": p for n, p in student.named_parameters() if p.requires_grad}
    if bank is not None:
        params.update({f"bank.{n.split('.')[-1]}": p for n, p in bank.named_parameters() if p.requires_grad})
    joint, breakdown = compute_loss(objective, student, s_batch, bank=bank, **sources)
    if not math.isfinite(breakdown.joint):
        raise NonFiniteLoss("joint")
    names = list(params)
    if joint.requires_grad:
        grads = torch.autograd.grad(joint, [params[n] for n in names], allow_unused=True)
    else:
        grads = [None] * len(names)
    out = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}
    return out, breakdown


def write_breakdown_csv(rows: list[tuple[int, LossBreakdown]], path) -> None:
    """Columns (step, layer, term, value); layer is empty for whole-term rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "layer", "term", "value"])
        for step, bd in rows:
            for term in ("top_sum", "layer_sum", "ac_sum", "sft", "joint"):
                writer.writerow([step, "", term, repr(getattr(bd, term))])
            for i, v in enumerate(bd.layer_per_layer, start=1):
                writer.writerow([step, i, "layer", repr(v)])
            for i, v in enumerate(bd.ac_per_layer, start=1):
                writer.writerow([step, i, "ac", repr(v)])
