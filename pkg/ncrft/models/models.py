from sqlmodel import SQLModel, Field, Relationship
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from pydantic import Field as ConfigField
from typing import Optional, List
from datetime import datetime
from enum import Enum


class ModelKind(str, Enum):
    LINEAR_CHAIN = "linear-chain"
    RNNT = "rnnt"
    NCRFT = "ncrft"


class PotentialDesign(str, Enum):
    ADDITIVE = "additive"        # phi = f, psi = g
    LOGSOFTMAX = "logsoftmax"    # phi = log-softmax(f), psi = log-softmax(g)


class TaskType(str, Enum):
    ACCURACY = "accuracy"
    F1 = "f1"


class TagScheme(str, Enum):
    RAW = "raw"
    BIO = "bio"
    BIOES = "bioes"


class OptimizerKind(str, Enum):
    SGD_MOMENTUM = "sgd-momentum"
    ADAM = "adam"


class StopCriterion(str, Enum):
    METRIC = "metric"    # dev accuracy or F1, higher is better
    NLL = "nll"          # dev per-sentence NLL, lower is better


class RunStatus(str, Enum):
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"


# Configuration schemas

class EncoderConfig(BaseModel):
    word_dim: int = ConfigField(default=100, gt=0)
    char_dim: int = ConfigField(default=30, gt=0)
    char_filters: int = ConfigField(default=30, gt=0)
    char_width: int = ConfigField(default=3, gt=0)
    f_hidden: int = ConfigField(default=200, gt=0)
    f_layers: int = ConfigField(default=1, gt=0)
    g_hidden: int = ConfigField(default=50, gt=0)
    label_dim: int = ConfigField(default=10, gt=0)
    dropout: float = ConfigField(default=0.5, ge=0.0, lt=1.0)

    @property
    def token_dim(self) -> int:
        return self.word_dim + self.char_filters


class OptimizerSettings(BaseModel):
    kind: OptimizerKind = OptimizerKind.SGD_MOMENTUM
    learning_rate: float = ConfigField(default=0.01, gt=0.0)
    momentum: float = ConfigField(default=0.9, ge=0.0, lt=1.0)
    decay: float = ConfigField(default=0.05, ge=0.0)
    beta1: float = ConfigField(default=0.9, ge=0.0, lt=1.0)
    beta2: float = ConfigField(default=0.999, ge=0.0, lt=1.0)
    epsilon: float = ConfigField(default=1e-8, gt=0.0)
    clip_norm: float = ConfigField(default=5.0, ge=0.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_kind: ModelKind = ModelKind.NCRFT
    design: PotentialDesign = PotentialDesign.ADDITIVE
    task: TaskType = TaskType.F1
    tag_scheme: TagScheme = TagScheme.BIOES
    encoder: EncoderConfig = ConfigField(default_factory=EncoderConfig)
    optimizer: OptimizerSettings = ConfigField(default_factory=OptimizerSettings)
    train_beam: int = ConfigField(default=128, gt=0)
    decode_beam: int = ConfigField(default=512, gt=0)
    batch_size: int = ConfigField(default=16, gt=0)
    epochs: int = ConfigField(default=100, gt=0)
    patience: int = ConfigField(default=10, gt=0)
    seed: int = ConfigField(default=1, ge=0)
    token_column: int = 0
    tag_column: int = -1
    rare_word_threshold: int = ConfigField(default=1, ge=0)
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    test_path: Optional[str] = None
    embeddings_path: Optional[str] = None
    checkpoint_path: str = "model.ckpt"
    pretrained_rnnt: Optional[str] = None
    cold_start: bool = False
    constrained_decoding: bool = False
    dev_size: int = ConfigField(default=0, ge=0)
    stop_on: StopCriterion = StopCriterion.METRIC
    workers: int = ConfigField(default=1, gt=0)
    exact_nll_cap: int = ConfigField(default=100000, gt=0)
    # "auto": runs.db next to the checkpoint; "": no registry
    registry_url: str = "auto"

    @field_validator("train_path", "dev_path", "test_path", "embeddings_path", "pretrained_rnnt", mode="before")
    @classmethod
    def blank_is_none(cls, value):
        if isinstance(value, str) and value.strip() in ("", "none", "None"):
            return None
        return value

    @model_validator(mode="after")
    def check_protocol(self):
        if self.pretrained_rnnt and self.model_kind != ModelKind.NCRFT:
            raise ValueError("pretrained_rnnt only applies to model_kind=ncrft")
        if self.tag_scheme == TagScheme.RAW and self.task == TaskType.F1:
            raise ValueError("task=f1 needs a BIO or BIOES tag scheme")
        return self


# Run registry tables

class TrainingRun(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    kind: str
    design: str
    seed: int
    config_text: str
    checkpoint_path: str
    status: RunStatus = Field(default=RunStatus.RUNNING)
    best_epoch: Optional[int] = None
    best_dev_metric: Optional[float] = None
    started_at: datetime = Field(default_factory=datetime.utcnow)
    finished_at: Optional[datetime] = None

    # Relationships
    epochs: List["EpochMetric"] = Relationship(back_populates="run")


class EpochMetric(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="trainingrun.id", index=True)
    epoch: int
    learning_rate: float
    train_loss: float
    dev_metric: float
    dev_nll: Optional[float] = None
    early_update_rate: float = 0.0
    seconds: float = 0.0

    # Relationships
    run: TrainingRun = Relationship(back_populates="epochs")
