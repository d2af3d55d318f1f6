"""
Esquemas de los ficheros de configuración JSON (experimentos y bench).
Las claves desconocidas se rechazan; cualquier fallo se convierte en ConfigError.

Campos de barrido (b, p, margin, sparsity, k, d, refresh_period) aceptan un
valor o una lista: `SchemeConfig.expand()` genera el producto cartesiano.
"""

import itertools
import json
from pathlib import Path
from typing import Literal, Optional, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import FIXED_FRAC_BITS, PLAIN_BITS
from .errors import ConfigError

_SWEEP_FIELDS = ("b", "p", "margin", "sparsity", "k", "d", "refresh_period")

IntSweep = Union[int, list[int]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TaskConfig(_Strict):
    n_clients: int = Field(default=100, ge=1)
    n_features: int = Field(default=32, ge=1)
    n_classes: int = Field(default=10, ge=2)
    n_samples: int = Field(default=20000, ge=1)     # pool de entrenamiento (incluye proxy)
    n_test: int = Field(default=2000, ge=1)
    label_skew: Optional[float] = Field(default=0.5, gt=0)   # α de Dirichlet; None → IID
    class_sep: float = Field(default=1.5, gt=0)
    noise: float = Field(default=1.0, gt=0)
    proxy_fraction: float = Field(default=0.05, ge=0, lt=1)
    model: Literal["logistic", "mlp"] = "logistic"
    hidden: int = Field(default=32, ge=1)


class TrainConfig(_Strict):
    rounds: int = Field(default=100, ge=1)
    clients_per_round: int = Field(default=10, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    client_lr: float = Field(default=0.1, ge=0)
    batch_size: int = Field(default=32, ge=1)
    server_lr: float = Field(default=1.0, gt=0)


class SchemeConfig(_Strict):
    kind: Literal["none", "sq", "prune", "pq"]
    b: IntSweep = 8
    p: Optional[IntSweep] = None        # None → min_safe_bitwidth (sq) o 32 (prune)
    margin: Optional[IntSweep] = None   # p = b + margin (estudio de overflow)
    scheme: Literal["symmetric", "affine"] = "symmetric"
    lift: Literal["unsigned", "centered"] = "unsigned"
    sparsity: Union[float, list[float]] = 0.5
    k: IntSweep = 32
    d: IntSweep = 8
    kmeans_iters: int = Field(default=50, ge=1)
    refresh_period: Optional[IntSweep] = 1   # None → calibración única en la ronda 0
    refresh_source: Literal["aggregate_update", "public_proxy"] = "public_proxy"
    compress_vectors: bool = False

    @model_validator(mode="after")
    def _p_or_margin(self):
        if self.p is not None and self.margin is not None:
            raise ValueError("usa p o margin, no ambos")
        return self

    def expand(self) -> list["SchemeConfig"]:
        """Una configuración concreta por combinación de los campos de barrido."""
        axes = []
        for name in _SWEEP_FIELDS:
            value = getattr(self, name)
            axes.append(value if isinstance(value, list) else [value])
        return [self.model_copy(update=dict(zip(_SWEEP_FIELDS, combo)))
                for combo in itertools.product(*axes)]

    def label(self) -> str:
        """Texto de la columna `params` del CSV."""
        if self.kind == "none":
            return "fp32"
        if self.kind == "sq":
            width = f"p={self.p}" if self.p is not None else (
                f"margin={self.margin}" if self.margin is not None else "p=safe")
            return f"b={self.b} {width} {self.scheme}"
        if self.kind == "prune":
            return f"sparsity={self.sparsity} p={self.p or 32} R={self.refresh_period}"
        return f"k={self.k} d={self.d} R={self.refresh_period}"


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = Field(default=0, ge=0)
    n_seeds: int = Field(default=3, ge=1)
    task: TaskConfig = TaskConfig()
    train: TrainConfig = TrainConfig()
    schemes: list[SchemeConfig] = Field(min_length=1)
    weighted: bool = True
    include_baseline: bool = True
    plain_bits: int = Field(default=PLAIN_BITS, ge=2, le=32)
    frac_bits: int = Field(default=FIXED_FRAC_BITS, ge=0, lt=32)

    @model_validator(mode="after")
    def _clients_fit(self):
        if self.train.clients_per_round > self.task.n_clients:
            raise ValueError(f"clients_per_round={self.train.clients_per_round} "
                             f"> n_clients={self.task.n_clients}")
        return self


class BenchConfig(_Strict):
    rows: int = Field(default=200, ge=1)
    cols: int = Field(default=64, ge=1)
    repeats: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)
    codecs: list[SchemeConfig] = Field(default_factory=lambda: [
        SchemeConfig(kind="sq", b=8, p=8),
        SchemeConfig(kind="sq", b=8, p=16),
        SchemeConfig(kind="prune", sparsity=0.9, p=32),
        SchemeConfig(kind="prune", sparsity=0.5, p=32),
        SchemeConfig(kind="pq", k=32, d=8),
        SchemeConfig(kind="pq", k=16, d=4),
    ])


Model = TypeVar("Model", bound=BaseModel)


def load_config(path: Union[str, Path], model: type[Model]) -> Model:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"no se puede leer {path}: {exc}") from exc
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"configuración inválida en {path}:\n{exc}") from exc
