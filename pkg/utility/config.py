# utility/config.py
import os
from enum import Enum
from typing import Optional, Tuple

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class LogLevel(str, Enum):
    """Log levels accepted by the CLI."""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


class Settings(BaseSettings):
    """Engine defaults, overridable through EMMKGR_* environment variables.

    Every CLI flag takes its default from here, so the precedence is
    built-in default < environment < explicit flag.
    """

    # --- Runtime ---
    THREADS: Optional[int] = Field(
        default=None,
        description="Worker cap for parallel stages (None = available cores)"
    )
    LOG_LEVEL: LogLevel = Field(
        default=LogLevel.INFO,
        description="Root log level for the CLI"
    )

    # --- Graph construction ---
    KNN: int = Field(
        default=10,
        description="Top-n cosine neighbors per modality instance"
    )

    # --- Model ---
    DIM: int = Field(
        default=64,
        description="Shared embedding dimension (must be even)"
    )
    LAYERS: int = Field(
        default=2,
        description="Number of propagation layers"
    )

    # --- Optimization ---
    LAMBDA_KG: float = Field(
        default=1.0,
        description="Weight of the knowledge-graph loss in the joint objective"
    )
    LR: float = Field(
        default=1e-3,
        description="Adam learning rate"
    )
    WEIGHT_DECAY: float = Field(
        default=1e-4,
        description="L2 coefficient applied to every parameter group"
    )
    EPOCHS: int = Field(
        default=200,
        description="Maximum number of training epochs"
    )
    PATIENCE: int = Field(
        default=10,
        description="Epochs without validation improvement before stopping"
    )
    BPR_BATCH_SIZE: int = Field(
        default=2048,
        description="BPR triples per optimization step"
    )
    KG_BATCH_SIZE: int = Field(
        default=2048,
        description="KG triples per optimization step"
    )
    NEGATIVES: int = Field(
        default=1,
        description="Negatives sampled per positive triple"
    )
    SEED: int = Field(
        default=42,
        description="Run seed; every random stage derives a named sub-stream from it"
    )

    # --- Evaluation ---
    EVAL_K: int = Field(
        default=20,
        description="Cutoff of the validation Recall used for early stopping"
    )
    CUTOFFS: Tuple[int, ...] = Field(
        default=(10, 20),
        description="Cutoffs reported by the evaluation commands"
    )
    CLUSTER_K: int = Field(
        default=50,
        description="Number of K-means clusters for the cohesion analysis"
    )

    @field_validator("DIM")
    @classmethod
    def validate_dim(cls, v):
        """Rotations pair coordinates, so the dimension must be even."""
        if v <= 0 or v % 2:
            raise ValueError("DIM must be a positive even integer")
        return v

    @field_validator("THREADS")
    @classmethod
    def validate_threads(cls, v):
        if v is not None and v < 1:
            raise ValueError("THREADS must be at least 1")
        return v

    def resolve_threads(self, override: Optional[int] = None) -> int:
        """Effective worker cap: explicit override, then THREADS, then core count."""
        if override is not None:
            return max(1, override)
        if self.THREADS is not None:
            return self.THREADS
        return max(1, os.cpu_count() or 1)

    model_config = SettingsConfigDict(
        env_prefix="EMMKGR_",
        extra="ignore",
        case_sensitive=False,
    )


# Instantiate settings to be imported by other modules
settings = Settings()
