"""Run configuration and the preset table."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..alignment import build_schedule
from ..divergence import DivergenceKind, HiddenLossKind
from ..losses import LossTerms, LossWeights
from ..toymodel import ModelSpec

PRESET_TERMS = {
    "baseline": LossTerms(top=False, layer=False, ac=False, sft=False),
    "sft_only": LossTerms(top=False, layer=False, ac=False, sft=True),
    "top_kd": LossTerms(top=True, layer=False, ac=False, sft=True),
    "skip_kd": LossTerms(top=True, layer=True, ac=False, sft=True),
    "layer_kd": LossTerms(top=True, layer=True, ac=False, sft=True),
    "layer_ac_kd": LossTerms(top=True, layer=True, ac=True, sft=True),
}
DEFAULT_LAYERS = {
    "baseline": "top",
    "sft_only": "top",
    "top_kd": "top",
    "skip_kd": "one_in_k:7",
    "layer_kd": "all",
    "layer_ac_kd": "all",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    layers: int
    hidden_dim: int
    heads: int
    vocab_size: int = 64
    max_seq: int = 128
    seed: Optional[int] = None

    def to_spec(self, default_seed: int) -> ModelSpec:
        return ModelSpec(self.layers, self.hidden_dim, self.heads, self.vocab_size, self.max_seq,
                         default_seed if self.seed is None else self.seed)


class WeightsConfig(_Strict):
    alpha_layer: float = Field(0.05, ge=0)
    alpha_ac: float = Field(0.05, ge=0)
    alpha_sft: float = Field(0.5, ge=0)

    def to_weights(self) -> LossWeights:
        return LossWeights(self.alpha_layer, self.alpha_ac, self.alpha_sft)


class OptimizerConfig(_Strict):
    kind: Literal["adam"] = "adam"
    lr: float = Field(1e-3, gt=0)
    steps: int = Field(300, ge=0)
    batch_size: int = Field(32, ge=1)
    warmup: int = Field(20, ge=0)


class SamplingConfig(_Strict):
    temperature: float = Field(0.6, gt=0)
    top_k: int = 5
    top_p: float = Field(0.5, gt=0, le=1)
    max_new: int = Field(48, ge=1)


class SyntheticConfig(_Strict):
    n_train: int = Field(2000, ge=1)
    n_eval: int = Field(500, ge=1)
    seed: Optional[int] = None


class DataConfig(_Strict):
    train_audio: Optional[str] = None
    train_text: Optional[str] = None
    eval: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None

    @model_validator(mode="after")
    def _one_source(self):
        files = [self.train_audio, self.train_text, self.eval]
        if self.synthetic is None and not all(files):
            if any(files):
                raise ValueError("file datasets need train_audio, train_text and eval")
            self.synthetic = SyntheticConfig()
        if self.synthetic is not None and any(files):
            raise ValueError("give either dataset files or a synthetic section, not both")
        return self


class RunConfig(_Strict):
    student: ModelConfig = ModelConfig(layers=7, hidden_dim=32, heads=2)
    teacher: ModelConfig = ModelConfig(layers=9, hidden_dim=48, heads=3)
    teacher_ckpt: Optional[str] = None
    teacher_optimizer: OptimizerConfig = OptimizerConfig(lr=3e-3, steps=300)
    preset: str = "layer_ac_kd"
    weights: WeightsConfig = WeightsConfig()
    divergence: str = "jsd"
    hidden_divergence: str = "softmax_jsd"
    layers: Optional[str] = None
    optimizer: OptimizerConfig = OptimizerConfig()
    sampling: SamplingConfig = SamplingConfig()
    seed: int = 0
    data: DataConfig = DataConfig()
    out_dir: Optional[str] = None
    generate_eval: bool = True

    @field_validator("divergence")
    @classmethod
    def _divergence(cls, v):
        DivergenceKind.parse(v)
        return v

    @field_validator("hidden_divergence")
    @classmethod
    def _hidden(cls, v):
        HiddenLossKind(v)
        return v

    @field_validator("preset")
    @classmethod
    def _preset(cls, v):
        name, _, k = v.partition(":")
        if name not in PRESET_TERMS or (k and name != "skip_kd"):
            raise ValueError(f"unknown preset {v!r}")
        if k and int(k) < 1:
            raise ValueError("skip_kd needs k >= 1")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        layers = self.layer_spec
        kind = layers.partition(":")[0]
        name = self.preset_name
        expected = DEFAULT_LAYERS[name].partition(":")[0]
        if kind != expected:
            raise ValueError(f"preset {name!r} cannot use layers {layers!r}")
        build_schedule(layers, self.student.layers)
        if self.student.vocab_size != self.teacher.vocab_size:
            raise ValueError("teacher and student must share one vocabulary")
        return self

    @property
    def preset_name(self) -> str:
        return self.preset.partition(":")[0]

    @property
    def layer_spec(self) -> str:
        name, _, k = self.preset.partition(":")
        if k:
            if self.layers is not None and self.layers != f"one_in_k:{k}":
                raise ValueError(f"preset {self.preset!r} contradicts layers {self.layers!r}")
            return f"one_in_k:{k}"
        return self.layers or DEFAULT_LAYERS[name]

    @property
    def terms(self) -> LossTerms:
        return PRESET_TERMS[self.preset_name]


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.model_validate(yaml.safe_load(text) or {})
