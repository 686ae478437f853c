"""Pipeline configuration: one YAML file, validated, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .quant import MAX_BITS, MIN_BITS, PASSTHROUGH_BITS
from .vit import ViTConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    depth: int = Field(2, ge=1)
    embed_dim: int = Field(16, ge=1)
    heads: int = Field(2, ge=1)
    mlp_dim: int = Field(32, ge=1)
    patches: int = Field(16, ge=2)
    num_classes: int = Field(4, ge=2)
    patch_dim: int = Field(8, ge=1)
    ln_eps: float = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        return self

    def vit_config(self) -> ViTConfig:
        return ViTConfig(**self.model_dump())


class DataSection(_Section):
    seed: int = 0
    train_samples: int = Field(512, ge=1)
    test_samples: int = Field(512, ge=1)
    separation: float = Field(1.0, ge=0)
    informative_patches: int = Field(4, ge=1)
    noise: float = Field(1.0, gt=0)


class TrainSection(_Section):
    seed: int = 0
    epochs: int = Field(40, ge=0)
    lr: float = Field(0.1, ge=0)
    batch_size: int = Field(32, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    schedule: Literal["cosine", "constant"] = "cosine"
    init_std: float = Field(0.02, gt=0)
    grad_norm_threshold: float = Field(0.05, gt=0)


class CalibrationSection(_Section):
    size: int = Field(32, ge=1)
    seed: int = 0
    act_percentile: float = Field(99.9, gt=50, le=100)
    weight_percentile: float = Field(100.0, gt=50, le=100)


class SearchSection(_Section):
    candidate_bits: list[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6, 7, 8])
    alpha: int = Field(2, ge=1)
    beta: Optional[int] = Field(32, ge=1)
    retain: int = Field(3, ge=1)
    budget_bits: Optional[int] = Field(None, ge=1)
    budget_uniform_bits: Optional[int] = 6
    granularity: Literal["block", "matrix"] = "block"
    aggregate: Literal["sum", "mean", "max"] = "sum"
    activation_omega: bool = False

    @field_validator("candidate_bits")
    @classmethod
    def _bits_in_range(cls, v):
        if not v:
            raise ValueError("candidate_bits must not be empty")
        bad = [b for b in v if not MIN_BITS <= b <= MAX_BITS]
        if bad:
            raise ValueError(f"candidate bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bad}")
        return sorted(set(v))

    @field_validator("budget_uniform_bits")
    @classmethod
    def _uniform_in_range(cls, v):
        if v is not None and not MIN_BITS <= v <= MAX_BITS:
            raise ValueError(f"budget_uniform_bits must lie in [{MIN_BITS}, {MAX_BITS}]")
        return v

    @model_validator(mode="after")
    def _one_budget(self):
        if (self.budget_bits is None) == (self.budget_uniform_bits is None):
            raise ValueError("set exactly one of budget_bits and budget_uniform_bits")
        return self


class QuantSection(_Section):
    act_bits: Optional[int] = 8
    patch_bits: Optional[int] = None
    fixed_bits: Optional[int] = None
    aas: bool = True
    importance_mode: Literal["received", "literal"] = "received"
    quantize_attn: bool = False

    @field_validator("act_bits", "patch_bits", "fixed_bits")
    @classmethod
    def _valid_bits(cls, v):
        if v is not None and v != PASSTHROUGH_BITS and not MIN_BITS <= v <= MAX_BITS:
            raise ValueError(f"bit-width must lie in [{MIN_BITS}, {MAX_BITS}] or be {PASSTHROUGH_BITS}")
        return v


class PipelineConfig(_Section):
    """Every tunable of the data, training and quantization pipeline.

    ``quant.act_bits=None`` makes each component's activations follow its
    weight bits.  ``quant.patch_bits=None`` takes the attention-input base
    bits from the owning attention component's weight bits.
    ``quant.fixed_bits`` skips the search and quantizes every component
    uniformly (``32`` disables quantization entirely).
    """

    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    search: SearchSection = Field(default_factory=SearchSection)
    quant: QuantSection = Field(default_factory=QuantSection)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.informative_patches > self.model.patches:
            raise ValueError("data.informative_patches cannot exceed model.patches")
        return self


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {key!r} descends into a non-section")
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ValueError(f"override must look like section.key=value, got {item!r}")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    tree: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        tree = loaded or {}
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(tree, key, value)
    return PipelineConfig.model_validate(tree)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)
