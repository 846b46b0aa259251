"""Model configuration schemas and the desk-scale size grid."""

import json
import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class RoutingMode(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"


class MoASites(str, Enum):
    DECODER = "decoder"
    PREDICTORS = "predictors"
    BOTH = "both"


class MoAConfig(BaseModel):
    """Adapter pool and routing shared by every MoA insertion site."""

    n_adapters: int = Field(8, ge=1, description="Adapters per site (N)")
    top_k: Optional[int] = Field(3, ge=1, description="Survivors per site; null means dense routing")
    bottleneck: int = Field(4, ge=1, description="Adapter bottleneck width (B)")
    sites: MoASites = Field(MoASites.BOTH, description="decoder | predictors | both")
    importance_weight: float = Field(0.1, ge=0.0, description="Weight of the importance loss")

    @model_validator(mode="after")
    def _check_k(self):
        if self.top_k is not None and self.top_k > self.n_adapters:
            raise ValueError(f"top_k={self.top_k} exceeds n_adapters={self.n_adapters}")
        return self

    @property
    def mode(self) -> RoutingMode:
        return RoutingMode.DENSE if self.top_k is None else RoutingMode.SPARSE

    @property
    def active_adapters(self) -> int:
        return self.n_adapters if self.top_k is None else self.top_k

    @property
    def in_decoder(self) -> bool:
        return self.sites in (MoASites.DECODER, MoASites.BOTH)

    @property
    def in_predictors(self) -> bool:
        return self.sites in (MoASites.PREDICTORS, MoASites.BOTH)


class ModelConfig(BaseModel):
    name: str = "S"
    vocab_size: int = Field(40, ge=2)
    enc_layers: int = Field(2, ge=1)
    dec_layers: int = Field(3, ge=1)
    d_model: int = Field(32, ge=2)
    d_filter: int = Field(64, ge=1)
    pred_filter: int = Field(64, ge=1)
    n_heads: int = Field(2, ge=1)
    n_mels: int = Field(20, ge=1)
    fft_kernel: int = Field(9, ge=1, description="Kernel of the first FFT feed-forward conv")
    pred_kernel: int = Field(3, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    ref_layers: int = Field(4, ge=1, description="Layers of reference features (L)")
    ref_width: int = Field(16, ge=1, description="Reference feature width (F)")
    moa: Optional[MoAConfig] = None

    @field_validator("fft_kernel", "pred_kernel")
    @classmethod
    def _odd_kernel(cls, v):
        if v % 2 != 1:
            raise ValueError(f"kernel width must be odd, got {v}")
        return v

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError(f"d_model={self.d_model} must be even (bidirectional GRU halves)")
        if self.moa is not None:
            for site, width in self.moa_site_widths().items():
                if self.moa.bottleneck >= width:
                    raise ValueError(f"bottleneck {self.moa.bottleneck} must be below the {site} width {width}")
        return self

    @property
    def d_emb(self) -> int:
        return self.d_model

    def moa_site_widths(self) -> Dict[str, int]:
        if self.moa is None:
            return {}
        widths = {}
        if self.moa.in_decoder:
            widths["decoder"] = self.d_model
        if self.moa.in_predictors:
            widths["predictors"] = self.pred_filter
        return widths

    def moa_site_ids(self) -> List[str]:
        if self.moa is None:
            return []
        ids = []
        if self.moa.in_predictors:
            ids += ["duration", "pitch", "energy"]
        if self.moa.in_decoder:
            ids += [f"decoder.{i}" for i in range(self.dec_layers)]
        return ids

    def without_moa(self) -> "ModelConfig":
        return self.model_copy(update={"moa": None})

    def with_moa(self, moa: MoAConfig, name: Optional[str] = None) -> "ModelConfig":
        data = {**self.model_dump(), "moa": moa.model_dump(), "name": name or self.name}
        try:
            return ModelConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigurationError(f"cannot attach MoA to {self.name}: {exc.errors()[0].get('msg')}") from None


class FeatureStats(BaseModel):
    """Corpus statistics used to normalize pitch and energy targets."""

    pitch_mean: float = 0.0
    pitch_std: float = 1.0
    energy_mean: float = 0.0
    energy_std: float = 1.0

    @field_validator("pitch_std", "energy_std")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError(f"standard deviation must be positive, got {v}")
        return v


def _grid(name: str, d_model: int) -> ModelConfig:
    return ModelConfig(name=name, d_model=d_model, d_filter=2 * d_model, pred_filter=2 * d_model)


# d_filter = pred_filter = 2 * d_model, as in the full-scale grid
DESK_PRESETS: Dict[str, ModelConfig] = {
    "S": _grid("S", 32),
    "M/S": _grid("M/S", 40),
    "M": _grid("M", 64),
    "L": _grid("L", 128),
}

SPARSE_MOA = MoAConfig(n_adapters=8, top_k=3, bottleneck=4)
DENSE_MOA = MoAConfig(n_adapters=3, top_k=None, bottleneck=4)

FULL_SCALE = ModelConfig(name="full", enc_layers=4, dec_layers=6, d_model=128, d_filter=256, pred_filter=256,
                         n_mels=80, ref_layers=13, ref_width=768)
FULL_SCALE_SPARSE = FULL_SCALE.with_moa(MoAConfig(n_adapters=8, top_k=3, bottleneck=96), name="full+MoA(s)")
FULL_SCALE_DENSE = FULL_SCALE.with_moa(MoAConfig(n_adapters=3, top_k=None, bottleneck=96), name="full+MoA(d)")


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        with open(path, "r") as f:
            return json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"{path}: unreadable config ({exc})") from None


def validate_config(model_cls: Type[ConfigT], data: dict, source: str = "<dict>") -> ConfigT:
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        raise ConfigurationError(f"{source}: {where}: {first.get('msg')}") from None


def load_config(path, model_cls: Type[ConfigT] = ModelConfig) -> ConfigT:
    config = validate_config(model_cls, read_config_file(path), source=str(path))
    logger.debug("Loaded %s from %s", model_cls.__name__, path)
    return config
