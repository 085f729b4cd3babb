"""Request/response bodies for the HTTP service.

ConfigPatch mirrors the run-config fields; every field is optional and
unset fields fall back to preset/file defaults.  The CLI builds these same
models, so local and remote runs validate identically.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

__all__ = [
    "ConfigPatch",
    "TrainRequest",
    "TrainResponse",
    "EvalRequest",
    "EvalResponse",
    "AblateRequest",
    "AblateRow",
    "AblateResponse",
    "SweepRequest",
    "SweepRow",
    "SweepResponse",
    "SyntheticRequest",
    "SyntheticResponse",
    "HealthResponse",
    "ErrorBody",
]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConfigPatch(_Strict):
    """Sparse overlay over the run configuration."""

    config_path: str | None = None
    preset: Literal["paper", "tiny"] | None = None
    seed: int | None = None
    out_dir: str | None = None
    images_dir: str | None = None
    embeddings_csv: str | None = None
    synthetic: str | None = None
    synthetic_noise: float | None = None
    synthetic_shift: int | None = None
    split_train: float | None = None
    split_val: float | None = None
    split_test: float | None = None
    ways: int | None = None
    graphs_per_class: int | None = None
    images_per_graph: int | None = None
    query_graphs: int | None = None
    align_strength: float | None = None
    projection_head: bool | None = None
    lambda_loss: float | None = None
    registry_momentum: float | None = None
    epochs: int | None = None
    episodes_per_epoch: int | None = None
    lr: float | None = None
    val_episodes: int | None = None
    augment: bool | None = None
    eval_episodes: int | None = None
    pairs_per_kind: int | None = None
    backfill_sigma: float | None = None

    def overrides(self) -> dict:
        skip = {"config_path", "preset"}
        return {k: v for k, v in self.model_dump().items()
                if k not in skip and v is not None}


class TrainRequest(_Strict):
    config: ConfigPatch = Field(default_factory=ConfigPatch)


class TrainResponse(_Strict):
    summary: dict
    files: dict[str, str]


class EvalRequest(_Strict):
    config: ConfigPatch = Field(default_factory=ConfigPatch)
    checkpoint: str
    mode: Literal["episodic", "overall", "identify", "verify",
                  "biometric"] = "biometric"


class EvalResponse(_Strict):
    summary: dict[str, float]
    files: dict[str, str]
    registry_classes: int


class AblateRequest(_Strict):
    config: ConfigPatch = Field(default_factory=ConfigPatch)
    variant: Literal["single_impression", "no_cross_graph", "query_alignment",
                     "no_prototype_node"]


class AblateRow(_Strict):
    variant: str
    rank1: float
    rank5: float
    eer: float


class AblateResponse(_Strict):
    rows: list[AblateRow]
    files: dict[str, str]


class SweepRequest(_Strict):
    config: ConfigPatch = Field(default_factory=ConfigPatch)
    lambdas: list[float] = Field(default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])


class SweepRow(_Strict):
    lam: float = Field(alias="lambda")
    overall_acc: float

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SweepResponse(_Strict):
    rows: list[SweepRow]
    files: dict[str, str]


class SyntheticRequest(_Strict):
    config: ConfigPatch = Field(default_factory=ConfigPatch)
    kind: Literal["images", "embeddings"] = "images"


class SyntheticResponse(_Strict):
    path: str
    classes: int
    impressions_per_class: int
    kind: str


class HealthResponse(_Strict):
    status: str
    version: str


class ErrorBody(_Strict):
    error: str
    code: int
