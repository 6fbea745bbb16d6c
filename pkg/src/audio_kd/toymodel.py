"""A small pre-norm decoder-only transformer that exposes every layer's hidden states.

The same class serves as student, textual teacher and frozen snapshot. All
parameters are float64 so gradient checks against finite differences are tight.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import TokenizedSample

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    hidden_dim: int
    heads: int
    vocab_size: int = 64
    max_seq: int = 128
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("layers", "hidden_dim", "heads", "vocab_size", "max_seq", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")


STUDENT_SPEC = ModelSpec(layers=7, hidden_dim=32, heads=2)
TEACHER_SPEC = ModelSpec(layers=9, hidden_dim=48, heads=3, seed=1)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.fc = nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE)
        self.out = nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(mask[:t, :t], float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(y)
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class DecoderLM(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d = spec.hidden_dim
        self.tok_emb = nn.Embedding(spec.vocab_size, d, dtype=DTYPE)
        self.pos_emb = nn.Embedding(spec.max_seq, d, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(d, spec.heads, spec.mlp_ratio) for _ in range(spec.layers))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)
        self.head = nn.Linear(d, spec.vocab_size, dtype=DTYPE)
        self.register_buffer(
            "causal", torch.ones(spec.max_seq, spec.max_seq, dtype=torch.bool).triu(1), persistent=False
        )
        self.frozen = False
        self._init(torch.Generator().manual_seed(spec.seed))

    @torch.no_grad()
    def _init(self, gen: torch.Generator):
        for name, p in self.named_parameters():
            if name.endswith(".bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            elif "emb" in name:
                p.normal_(0.0, 0.1, generator=gen)
            else:
                p.normal_(0.0, 1.0 / math.sqrt(p.shape[1]), generator=gen)
                if name.endswith(("proj.weight", "out.weight")):
                    p.mul_(1.0 / math.sqrt(2 * self.spec.layers))

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """tokens [B, T] -> (hidden [L, B, T, D], logits [B, T, V])."""
        _, t = tokens.shape
        if t > self.spec.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {self.spec.max_seq}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.spec.vocab_size):
            raise ValueError(f"token id out of range for vocab_size {self.spec.vocab_size}")
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(t))
        hidden = []
        for block in self.blocks:
            x = block(x, self.causal)
            hidden.append(x)
        return torch.stack(hidden), self.head(self.ln_f(x))


# the model object carries both its parameters and its spec
ModelState = DecoderLM


def build_model(spec: ModelSpec) -> DecoderLM:
    return DecoderLM(spec)


@dataclass
class Batch:
    """Right-padded tensors for a list of tokenized samples."""

    tokens: torch.Tensor          # [B, T]
    pred_pos: torch.Tensor        # [B, Y] position whose logits predict output step j
    targets: torch.Tensor         # [B, Y]
    out_mask: torch.Tensor        # [B, Y] bool
    stages: torch.Tensor          # [B, Y]
    audio_pos: torch.Tensor       # [B, X]
    audio_mask: torch.Tensor      # [B, X] bool

    def __len__(self) -> int:
        return self.tokens.shape[0]


def collate(samples: Sequence[TokenizedSample], pad_id: int = 0) -> Batch:
    b = len(samples)
    t = max(len(s) for s in samples)
    y = max(len(s.output_targets) for s in samples)
    x = max(len(s.audio_positions) for s in samples)
    tokens = torch.full((b, t), pad_id, dtype=torch.long)
    pred_pos = torch.zeros((b, y), dtype=torch.long)
    targets = torch.zeros((b, y), dtype=torch.long)
    out_mask = torch.zeros((b, y), dtype=torch.bool)
    stages = torch.zeros((b, y), dtype=torch.long)
    audio_pos = torch.zeros((b, x), dtype=torch.long)
    audio_mask = torch.zeros((b, x), dtype=torch.bool)
    for i, s in enumerate(samples):
        tokens[i, : len(s)] = torch.tensor(s.tokens)
        n = len(s.output_targets)
        if n:
            pred_pos[i, :n] = torch.tensor(s.prediction_positions)
            targets[i, :n] = torch.tensor(s.output_targets)
            out_mask[i, :n] = True
            if s.output_stages:
                stages[i, :n] = torch.tensor(s.output_stages)
        ax = s.audio_positions
        if ax:
            audio_pos[i, : len(ax)] = torch.tensor(ax)
            audio_mask[i, : len(ax)] = True
    return Batch(tokens, pred_pos, targets, out_mask, stages, audio_pos, audio_mask)


@dataclass
class ForwardTrace:
    hidden: torch.Tensor   # [L, B, T, D]; index i-1 holds layer i
    logits: torch.Tensor   # [B, T, V]
    batch: Batch

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    def output_logits(self) -> torch.Tensor:
        """[B, Y, V] logits at each output step's prediction position."""
        idx = self.batch.pred_pos.unsqueeze(-1).expand(-1, -1, self.logits.shape[-1])
        return self.logits.gather(1, idx)

    def output_hidden(self) -> torch.Tensor:
        """[L, B, Y, D] hidden states at each output step's prediction position."""
        return _gather_positions(self.hidden, self.batch.pred_pos)

    def audio_hidden(self) -> torch.Tensor:
        """[L, B, X, D] hidden states at audio-input positions."""
        return _gather_positions(self.hidden, self.batch.audio_pos)


def _gather_positions(hidden: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    n_layers, _, _, d = hidden.shape
    idx = pos.unsqueeze(0).unsqueeze(-1).expand(n_layers, -1, -1, d)
    return hidden.gather(2, idx)


def forward(state: DecoderLM, sample) -> ForwardTrace:
    """Teacher-forced forward pass over one sample, a list of samples, or a Batch."""
    if isinstance(sample, TokenizedSample):
        batch = collate([sample])
    elif isinstance(sample, Batch):
        batch = sample
    else:
        batch = collate(list(sample))
    if state.frozen or not torch.is_grad_enabled():
        with torch.no_grad():
            hidden, logits = state(batch.tokens)
    else:
        hidden, logits = state(batch.tokens)
    return ForwardTrace(hidden, logits, batch)


def freeze(state: DecoderLM) -> DecoderLM:
    for p in state.parameters():
        p.requires_grad_(False)
    state.frozen = True
    return state.eval()


def snapshot(state: DecoderLM) -> DecoderLM:
    """Deep, frozen copy of ``state``."""
    return freeze(copy.deepcopy(state))


# --- sampling -------------------------------------------------------------


def filter_candidates(logits, temperature: float, top_k: int, top_p: float):
    """Temperature, then top-k, then top-p. Returns (candidate ids, renormalized probs).

    Candidates come out in descending probability order (ties broken by lower id).
    ``top_k <= 0`` disables the top-k cut.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    z = np.asarray(logits, dtype=np.float64) / temperature
    order = np.argsort(-z, kind="stable")
    if 0 < top_k < order.size:
        order = order[:top_k]
    kept = z[order]
    probs = np.exp(kept - kept[0])
    probs /= probs.sum()
    # smallest prefix whose mass reaches top_p
    n = min(int(np.searchsorted(np.cumsum(probs), top_p, side="left")) + 1, order.size)
    probs = probs[:n] / probs[:n].sum()
    return order[:n], probs


def draw(ids: np.ndarray, probs: np.ndarray, rng: np.random.Generator) -> int:
    i = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return int(ids[min(i, ids.size - 1)])


def sample_next(state: DecoderLM, prefix, temperature: float = 0.6, top_k: int = 5,
                top_p: float = 0.5, seed: int = 0) -> int:
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    tokens = torch.tensor([list(prefix)], dtype=torch.long)
    with torch.no_grad():
        _, logits = state(tokens)
    ids, probs = filter_candidates(logits[0, -1].numpy(), temperature, top_k, top_p)
    return draw(ids, probs, np.random.default_rng(seed))


def generate(state: DecoderLM, prompts: Sequence[Sequence[int]], seeds: Sequence[int], *,
             eos_id: int, max_new: int, temperature: float = 0.6, top_k: int = 5,
             top_p: float = 0.5) -> list[tuple[list[int], bool]]:
    """Sample continuations for each prompt; returns (new tokens, finished) per prompt.

    Prompts of equal length are stepped together. Each prompt draws from its own
    rng, so results do not depend on how prompts are grouped.
    """
    results: list = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for length, members in groups.items():
        rngs = [np.random.default_rng(seeds[i]) for i in members]
        seqs = torch.tensor([list(prompts[i]) for i in members], dtype=torch.long)
        new = [[] for _ in members]
        done = [False] * len(members)
        steps = min(max_new, state.spec.max_seq - length)
        for _ in range(steps):
            with torch.no_grad():
                _, logits = state(seqs)
            last = logits[:, -1].numpy()
            nxt = []
            for j in range(len(members)):
                if done[j]:
                    nxt.append(eos_id)
                    continue
                ids, probs = filter_candidates(last[j], temperature, top_k, top_p)
                tok = draw(ids, probs, rngs[j])
                new[j].append(tok)
                done[j] = tok == eos_id
                nxt.append(tok)
            if all(done):
                break
            seqs = torch.cat([seqs, torch.tensor(nxt, dtype=torch.long).unsqueeze(1)], dim=1)
        for j, i in enumerate(members):
            results[i] = (new[j], done[j])
    return results


# --- checkpoints ----------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
# (sorted keys), then the raw little-endian float64 buffers back to back. The
# header maps each tensor name to its shape and byte offset into the data
# section. Writing is deterministic, so equal states give equal files.

MAGIC = b"AKDCKPT\x01"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    index = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f8")
        buf = arr.tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(buf)}
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": index}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in chunks:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    tensors = {}
    for name, entry in header["tensors"].items():
        raw = data[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
        tensors[name] = torch.from_numpy(arr)
    return tensors, header["meta"]


def model_tensors(state: DecoderLM, prefix: str = "model/") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in state.state_dict().items()}


def load_model(tensors: dict[str, torch.Tensor], spec: ModelSpec, prefix: str = "model/") -> DecoderLM:
    state = DecoderLM(spec)
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    state.load_state_dict(own)
    return state


def spec_to_dict(spec: ModelSpec) -> dict:
    return asdict(spec)
