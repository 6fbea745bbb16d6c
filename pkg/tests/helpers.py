"""Finite-difference oracle and tiny model fixtures shared by the tests."""

import numpy as np
import torch

from audio_kd.toymodel import ModelSpec

TINY_STUDENT = ModelSpec(layers=2, hidden_dim=8, heads=2, vocab_size=11, max_seq=16, seed=3)
TINY_TEACHER = ModelSpec(layers=3, hidden_dim=12, heads=2, vocab_size=11, max_seq=16, seed=4)
FD_STEP = 1e-5

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
REL_FLOOR = 1e-6


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@torch.no_grad()
def fd_param_grads(loss_fn, params: dict, h: float = FD_STEP) -> dict:
    """Central differences of ``loss_fn()`` w.r.t. every entry of every tensor in ``params``."""
    out = {}
    for name, p in params.items():
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out[name] = g
    return out
