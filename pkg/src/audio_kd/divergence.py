"""Divergence measures between categorical distributions and hidden-state vectors.

Two surfaces share the same definitions:

* ``divergence`` / ``hidden_divergence`` / ``divergence_grad`` work on single
  numpy vectors in float64 and are the reference API.
* ``kd_logits`` / ``kd_hidden`` work on batched torch tensors in log space and
  are what the training losses call; they reduce over the last dimension only.

All results are in nats.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-12
LN2 = math.log(2.0)


class InfiniteDivergence(ArithmeticError):
    """KL(p||q) is +inf because q puts zero mass where p does not."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"divergence is +inf: q[{index}] = 0 while p[{index}] > 0")


@dataclass(frozen=True)
class DivergenceKind:
    name: str
    lam: float | None = None

    def __post_init__(self):
        if self.name not in ("kl", "rkl", "jsd", "skl"):
            raise ValueError(f"unknown divergence {self.name!r}")
        if self.name == "skl":
            if self.lam is None or not 0.0 < self.lam < 1.0:
                raise ValueError("skew KL needs lambda strictly inside (0, 1)")
        elif self.lam is not None:
            raise ValueError(f"{self.name} takes no parameter")

    @classmethod
    def parse(cls, text: "str | DivergenceKind") -> "DivergenceKind":
        if isinstance(text, DivergenceKind):
            return text
        name, _, arg = str(text).strip().partition(":")
        if name == "skl":
            if not arg:
                raise ValueError("skew KL is written 'skl:<lambda>'")
            return cls("skl", float(arg))
        if arg:
            raise ValueError(f"{name} takes no parameter")
        return cls(name)

    def __str__(self) -> str:
        return f"skl:{self.lam}" if self.name == "skl" else self.name


FORWARD_KL = DivergenceKind("kl")
REVERSE_KL = DivergenceKind("rkl")
JSD = DivergenceKind("jsd")


def skew_kl(lam: float) -> DivergenceKind:
    return DivergenceKind("skl", lam)


class HiddenLossKind(str, enum.Enum):
    SOFTMAX_JSD = "softmax_jsd"
    MSE = "mse"


class Categorical:
    """A validated probability vector (float64)."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("a categorical is a non-empty 1-D vector")
        if not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite")
        if np.any(p < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        self.probs = p

    @classmethod
    def from_logits(cls, logits) -> "Categorical":
        return cls(softmax(np.asarray(logits, dtype=np.float64)))

    def __len__(self) -> int:
        return self.probs.size

    def __repr__(self) -> str:
        return f"Categorical({self.probs.tolist()})"


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _as_probs(p) -> np.ndarray:
    return p.probs if isinstance(p, Categorical) else Categorical(p).probs


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    bad = np.flatnonzero(support & (q <= 0))
    if bad.size:
        raise InfiniteDivergence(int(bad[0]))
    ps = p[support]
    terms = ps * (np.log(np.maximum(ps, EPS)) - np.log(np.maximum(q[support], EPS)))
    return max(float(terms.sum()), 0.0)


def divergence(kind, p, q) -> float:
    """KD(p || q) for ``kind`` in {kl, rkl, jsd, skl:<lambda>}."""
    kind = DivergenceKind.parse(kind)
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    if kind.name == "kl":
        return _kl(p, q)
    if kind.name == "rkl":
        return _kl(q, p)
    if kind.name == "jsd":
        m = 0.5 * (p + q)
        return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    return _kl(p, q + kind.lam * (p - q))  # exactly q when p == q


def hidden_divergence(kind, u, v) -> float:
    kind = HiddenLossKind(kind)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if kind is HiddenLossKind.MSE:
        return float(np.mean((u - v) ** 2))
    return divergence(JSD, softmax(u), softmax(v))


def _softmax_vjp(prob: np.ndarray, g: np.ndarray) -> np.ndarray:
    return prob * (g - np.dot(prob, g))


def divergence_grad(kind, p_logits, q_logits) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``divergence(kind, softmax(a), softmax(b))`` w.r.t. logits a and b."""
    kind = DivergenceKind.parse(kind)
    a = np.asarray(p_logits, dtype=np.float64)
    b = np.asarray(q_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    p, q = softmax(a), softmax(b)
    lp = a - a.max() - np.log(np.exp(a - a.max()).sum())
    lq = b - b.max() - np.log(np.exp(b - b.max()).sum())
    if kind.name == "kl":
        return _softmax_vjp(p, lp - lq + 1.0), q - p
    if kind.name == "rkl":
        return p - q, _softmax_vjp(q, lq - lp + 1.0)
    if kind.name == "jsd":
        lm = np.logaddexp(lp, lq) - LN2
        return _softmax_vjp(p, 0.5 * (lp - lm)), _softmax_vjp(q, 0.5 * (lq - lm))
    lam = kind.lam
    lr = np.logaddexp(math.log(lam) + lp, math.log1p(-lam) + lq)
    ratio = np.exp(lp - lr)
    gp = lp - lr + 1.0 - lam * ratio
    gq = -(1.0 - lam) * ratio
    return _softmax_vjp(p, gp), _softmax_vjp(q, gq)


# --- batched torch versions used by the training losses -------------------


def _kl_log(lp: torch.Tensor, lq: torch.Tensor) -> torch.Tensor:
    return (lp.exp() * (lp - lq)).sum(-1)


def _log_mix(lp: torch.Tensor, lq: torch.Tensor, a: float) -> torch.Tensor:
    """ln(a*p + (1-a)*q), returning lp bit-exactly where lp == lq."""
    p_high = lp >= lq
    hi = torch.where(p_high, lp, lq)
    lo = torch.where(p_high, lq, lp)
    w_lo = torch.where(p_high, lp.new_tensor(1.0 - a), lp.new_tensor(a))
    return hi + torch.log1p(w_lo * torch.expm1(lo - hi))


def kd_logits(kind, teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KD(softmax(teacher) || softmax(student)) reduced over the last axis."""
    kind = DivergenceKind.parse(kind)
    lp = torch.log_softmax(teacher_logits, dim=-1)
    lq = torch.log_softmax(student_logits, dim=-1)
    return kd_logprobs(kind, lp, lq)


def kd_logprobs(kind: DivergenceKind, lp: torch.Tensor, lq: torch.Tensor) -> torch.Tensor:
    if kind.name == "kl":
        return _kl_log(lp, lq)
    if kind.name == "rkl":
        return _kl_log(lq, lp)
    if kind.name == "jsd":
        lm = _log_mix(lp, lq, 0.5)
        return 0.5 * _kl_log(lp, lm) + 0.5 * _kl_log(lq, lm)
    lr = _log_mix(lp, lq, kind.lam)
    return _kl_log(lp, lr)


def kd_hidden(kind, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Hidden-state divergence between u (source) and v (student), last axis reduced."""
    kind = HiddenLossKind(kind)
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    if kind is HiddenLossKind.MSE:
        return ((u - v) ** 2).mean(-1)
    return kd_logits(JSD, u, v)
