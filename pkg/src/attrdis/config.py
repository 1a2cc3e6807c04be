"""Run configuration schema.

Every field has a default; unknown keys are rejected.  Configs are read
from YAML and the fully resolved config is written back next to the run
outputs as ``config.resolved``.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datagen import SceneSpec, SpecError
from .model import Dims

Mode = Literal["baseline", "eq3", "eq4", "mixup_input"]
G_MODES = ("eq3", "eq4", "mixup_input")

BENCH_C = 8
BENCH_PAIRS = ((0, 1, 0.8), (2, 3, -0.8), (4, 5, 0.8), (6, 7, -0.8))


# attributes 5..7 form a one-hot group (think age bands); 5 still follows attribute 4
GROUP_BENCH = (5, 6, 7)
GROUP_MARGINALS = (0.5, 0.3, 0.2)


class ConfigError(ValueError):
    """Invalid configuration; the message lists offending field paths."""


def benchmark_marginals(C: int = BENCH_C) -> list[float]:
    return [round(float(v), 10) for v in np.linspace(0.1, 0.9, C)]


def benchmark_corr(C: int = BENCH_C, flip: bool = False) -> list[list[float]]:
    m = np.eye(C)
    for i, j, r in BENCH_PAIRS:
        if i < C and j < C:
            m[i, j] = m[j, i] = -r if flip else r
    return m.tolist()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class DataConfig(_Strict):
    input_dim: int = Field(64, gt=0)
    n_train: int = Field(8000, ge=2)
    n_test: int = Field(4000, ge=2)
    marginals: list[float] = Field(default_factory=benchmark_marginals)
    train_corr: list[list[float]] = Field(default_factory=benchmark_corr)
    test_corr: list[list[float]] = Field(default_factory=lambda: benchmark_corr(flip=True))
    style_seed: int = 0
    noise_sigma: float = Field(0.5, ge=0)
    norm_jitter: float = Field(0.5, ge=0)
    exclusive_groups: list[list[int]] = Field(default_factory=list)

    @property
    def C(self) -> int:
        return len(self.marginals)

    def scene(self, split: str) -> SceneSpec:
        corr = self.train_corr if split == "train" else self.test_corr
        return SceneSpec(marginals=tuple(self.marginals), target_corr=np.array(corr),
                         input_dim=self.input_dim, style_seed=self.style_seed,
                         noise_sigma=self.noise_sigma, norm_jitter=self.norm_jitter,
                         exclusive_groups=tuple(tuple(g) for g in self.exclusive_groups))

    @model_validator(mode="after")
    def _scenes_valid(self):
        for split in ("train", "test"):
            try:
                self.scene(split)
            except SpecError as err:
                raise ValueError(f"{split}_corr/marginals: {err}") from err
        return self


class ModelConfig(_Strict):
    D: Optional[int] = Field(None, gt=0)
    C: Optional[int] = Field(None, gt=0)
    K: int = Field(32, gt=0)
    H: int = Field(64, gt=0)
    Hc: int = Field(32, gt=0)


class TrainConfig(_Strict):
    mode: Mode = "baseline"
    lam: float = Field(1.0, ge=0)
    ndsi: bool = True
    lr: float = Field(1e-4, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    milestones: list[int] = Field(default_factory=lambda: [40, 50])
    decay: float = Field(10.0, gt=0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(60, ge=0)
    # test hook: alpha = beta = 1 for every draw
    degenerate_draws: bool = False

    @field_validator("milestones")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("milestones must be strictly increasing")
        return v


class EvalConfig(_Strict):
    threshold: float = Field(0.5, gt=0, lt=1)
    mi: bool = True
    mi_bins: int = Field(8, ge=2)


class RunConfig(_Strict):
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.model.D is not None and self.model.D != self.data.input_dim:
            raise ValueError(f"model.D={self.model.D} disagrees with data.input_dim={self.data.input_dim}")
        if self.model.C is not None and self.model.C != self.data.C:
            raise ValueError(f"model.C={self.model.C} disagrees with len(data.marginals)={self.data.C}")
        if self.train.mode in G_MODES and self.train.batch_size < 2:
            raise ValueError(f"train.batch_size must be >= 2 for mode {self.train.mode}")
        return self

    @property
    def dims(self) -> Dims:
        m = self.model
        return Dims(D=self.data.input_dim, C=self.data.C, K=m.K, H=m.H, Hc=m.Hc)

    def resolved(self) -> dict:
        d = self.model_dump(mode="json")
        d["model"]["D"] = self.data.input_dim
        d["model"]["C"] = self.data.C
        return d

    def config_hash(self) -> str:
        d = self.resolved()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=False, default_flow_style=None, width=120)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "\n".join(lines)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<root>: config file must hold a mapping")
    return parse_config(data)


def group_benchmark(cfg: RunConfig, group=GROUP_BENCH, marginals=GROUP_MARGINALS) -> RunConfig:
    """Copy of ``cfg`` whose data carries one mutually exclusive attribute group."""
    d = cfg.model_dump(mode="json")
    marg = list(d["data"]["marginals"])
    for i, p in zip(group, marginals):
        marg[i] = p
    d["data"]["marginals"] = marg
    d["data"]["exclusive_groups"] = [list(group)]
    return parse_config(d)


def with_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML scalars)."""
    d = cfg.model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key.path=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"{key}: unknown section {p!r}")
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return parse_config(d)
