from typing import Tuple

from pydantic import BaseModel, Field, field_validator


class TrainConfig(BaseModel):
    """Optimization settings for both training phases."""

    phase1_steps: int = Field(2000, ge=1, description="Backbone pretraining steps")
    phase2_steps: int = Field(2000, ge=1, description="Joint steps after MoA insertion")
    batch_size: int = Field(16, ge=1)
    warmup_steps: int = Field(400, ge=1)
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = Field(1e-9, gt=0.0)
    grad_clip: float = Field(1.0, ge=0.0, description="Global gradient-norm bound; 0 disables clipping")
    lr_scale: float = Field(1.0, gt=0.0, description="Multiplier on the Noam learning rate")
    seed: int = 0
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    val_utterances: int = Field(32, ge=1, description="Validation utterances scored at each phase end")

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, v):
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"Adam betas must lie in [0, 1), got {v}")
        return v

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps
