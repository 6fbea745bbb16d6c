"""Student-to-teacher layer correspondence, layer schedules and projection matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def teacher_layer_for(l_s: int, n_student: int, n_teacher: int) -> int:
    """floor((l_s - 1) / n_student * n_teacher + 1), evaluated in exact integer arithmetic."""
    return (l_s - 1) * n_teacher // n_student + 1


@dataclass(frozen=True)
class LayerMap:
    n_student: int
    n_teacher: int
    pairs: tuple[tuple[int, int], ...]

    def teacher_layer(self, l_s: int) -> int:
        if not 1 <= l_s <= self.n_student:
            raise ValueError(f"student layer {l_s} outside 1..{self.n_student}")
        return self.pairs[l_s - 1][1]


def build_layer_map(n_student: int, n_teacher: int) -> LayerMap:
    if n_student < 1 or n_teacher < 1:
        raise ValueError("layer counts must be positive")
    pairs = tuple((l, teacher_layer_for(l, n_student, n_teacher)) for l in range(1, n_student + 1))
    return LayerMap(n_student, n_teacher, pairs)


@dataclass(frozen=True)
class LayerSchedule:
    """Which student layers receive hidden-state supervision (1-based)."""

    kind: str
    selected: tuple[int, ...]
    k: int | None = None

    def __str__(self) -> str:
        return f"one_in_k:{self.k}" if self.kind == "one_in_k" else self.kind


def build_schedule(kind: str, n_student: int, k: int | None = None) -> LayerSchedule:
    """Build a schedule from ``"all"``, ``"top"`` or ``"one_in_k"`` (or ``"one_in_k:<k>"``)."""
    kind, _, arg = kind.partition(":")
    if arg:
        k = int(arg)
    if n_student < 1:
        raise ValueError("layer count must be positive")
    if kind == "all":
        return LayerSchedule("all", tuple(range(1, n_student + 1)))
    if kind == "top":
        return LayerSchedule("top", ())
    if kind == "one_in_k":
        if k is None or k < 1:
            raise ValueError("one_in_k needs k >= 1")
        if k > n_student:
            raise ValueError(f"one_in_k:{k} selects no layer of a {n_student}-layer student")
        return LayerSchedule("one_in_k", tuple(range(k, n_student + 1, k)), k)
    raise ValueError(f"unknown layer schedule {kind!r}")


class ProjectionBank(nn.Module):
    """One learnable (D_S x D_T) matrix per selected student layer.

    The matrices are stored so that ``W @ h_teacher`` has the student's width.
    """

    def __init__(self, layers, d_student: int, d_teacher: int, seed: int = 0,
                 trainable: bool = True, dtype=torch.float64):
        super().__init__()
        self.layers = tuple(int(l) for l in layers)
        self.d_student = d_student
        self.d_teacher = d_teacher
        gen = torch.Generator().manual_seed(seed)
        bound = math.sqrt(6.0 / (d_teacher + d_student))
        weights = {}
        for layer in self.layers:
            if d_student == d_teacher:
                w = torch.eye(d_student, dtype=dtype)
            else:
                w = (torch.rand(d_student, d_teacher, generator=gen, dtype=dtype) * 2 - 1) * bound
            weights[str(layer)] = nn.Parameter(w, requires_grad=trainable)
        self.weights = nn.ParameterDict(weights)

    @property
    def trainable(self) -> bool:
        return all(p.requires_grad for p in self.parameters())

    def matrix(self, layer: int) -> nn.Parameter:
        key = str(layer)
        if key not in self.weights:
            raise KeyError(f"layer {layer} is not in the projection bank {self.layers}")
        return self.weights[key]

    def forward(self, layer: int, h_teacher: torch.Tensor) -> torch.Tensor:
        w = self.matrix(layer)
        if h_teacher.shape[-1] != self.d_teacher:
            raise ValueError(f"expected teacher width {self.d_teacher}, got {h_teacher.shape[-1]}")
        return h_teacher @ w.T


def project(bank: ProjectionBank, layer: int, h_teacher):
    """W_layer @ h_teacher. Accepts a torch tensor or anything numpy can convert."""
    if isinstance(h_teacher, torch.Tensor):
        return bank(layer, h_teacher)
    w = bank.matrix(layer)
    h = torch.as_tensor(np.asarray(h_teacher, dtype=np.float64), dtype=w.dtype)
    with torch.no_grad():
        return bank(layer, h).numpy()
