from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class GraphVariant(str, Enum):
    ATOM = "atom"
    HIERARCHICAL = "hierarchical"
    FULL = "full"


class LossVariant(str, Enum):
    FULL = "full"
    NO_AB = "no_ab"
    NO_FRAG = "no_frag"
    NO_TOPO = "no_topo"
    NO_SCAF = "no_scaf"
    NO_GRAPH_LEVEL = "no_graph_level"
    NO_LOCAL = "no_local"


class TaskType(str, Enum):
    PRETRAIN = "pretrain"
    CLASSIFY = "classify"
    REGRESS = "regress"


class EmbeddingLevel(str, Enum):
    GRAPH = "graph"
    FRAGMENT = "fragment"
    BOND = "bond"


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: int = Field(default=5, ge=1)
    hidden: int = Field(default=300, ge=8)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    jk: str = Field(default="sum", pattern="^sum$")
    input_dim: int = Field(default=15, ge=1)
    proj_dim: int = Field(default=128, ge=1)
    norm: bool = False
    share_projection: bool = True


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ab: float = Field(default=0.2, ge=0.0)
    frag: float = Field(default=0.4, ge=0.0)
    topo: float = Field(default=0.4, ge=0.0)
    scaf: float = Field(default=0.4, ge=0.0)
    tau: float = Field(default=0.1, gt=0.0)

    def as_dict(self) -> Dict[str, float]:
        return {"ab": self.ab, "frag": self.frag, "topo": self.topo, "scaf": self.scaf}


class SplitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    @field_validator("ratios", mode="before")
    @classmethod
    def split_ratio_text(cls, value):
        return _split_list(value)

    @field_validator("ratios")
    @classmethod
    def ratios_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")
        return value


class AblationFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    graph: GraphVariant = GraphVariant.FULL
    loss: LossVariant = LossVariant.FULL


class AdamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-5, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    decoupled: bool = True


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    ablation: AblationFlags = Field(default_factory=AblationFlags)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)

    pretrain_epochs: int = Field(default=100, ge=1)
    finetune_epochs: int = Field(default=100, ge=1)
    pretrain_batch: int = Field(default=256, ge=1)
    finetune_batch: int = Field(default=32, ge=1)
    vocab_size: int = Field(default=800, ge=1)
    fingerprint_bits: int = 2048
    n_groups: int = Field(default=16, ge=1)
    seed: Optional[int] = None
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    @field_validator("seeds", mode="before")
    @classmethod
    def split_seed_text(cls, value):
        return _split_list(value)

    @field_validator("fingerprint_bits")
    @classmethod
    def fingerprint_power_of_two(cls, value: int) -> int:
        if value < 64 or value > 4096 or value & (value - 1):
            raise ValueError("fingerprint_bits must be a power of two in [64, 4096]")
        return value

    @model_validator(mode="after")
    def seeds_not_empty(self) -> "RunConfig":
        if not self.seeds:
            raise ValueError("at least one finetuning seed is required")
        return self


class SeedResult(BaseModel):
    seed: int
    metric: float
    valid_metric: float
    best_epoch: int
    skipped_tasks: List[int] = Field(default_factory=list)


class MetricsReport(BaseModel):
    task: TaskType
    metric: str
    init: str = "random"
    per_seed: List[SeedResult] = Field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    extra: Dict[str, float] = Field(default_factory=dict)
