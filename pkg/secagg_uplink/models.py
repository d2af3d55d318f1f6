"""
Tipos de dominio del protocolo: vectores de grupo, semillas, parámetros de los
codecs, payloads enmascarados, planes de ronda y los mensajes del servicio TEE.
Todos son modelos pydantic; los campos numpy se validan a mano.
"""

import hashlib
import math
import secrets
import struct
from enum import IntEnum
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import DimensionError, ShapeError

MAX_BITS = 32
_CHILD_DOMAIN = b"secagg-uplink:child:v1:"


def _frozen_array(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


# ── Grupo finito ──────────────────────────────────────────────────────────────

class GroupVector(BaseModel):
    """Vector de enteros en Z_{2^p}. Inmutable."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray                 # uint64, cada elemento en [0, 2^p - 1]
    p: int = Field(ge=1, le=MAX_BITS)  # bit-width del grupo

    @field_validator("values", mode="before")
    @classmethod
    def _as_uint64(cls, v):
        arr = np.asarray(v)
        if arr.ndim != 1:
            raise DimensionError(f"GroupVector necesita 1 dimensión, recibido {arr.ndim}")
        if arr.size and arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
                raise DimensionError("GroupVector solo admite enteros")
        if arr.size and arr.dtype.kind in "if" and arr.min() < 0:
            raise DimensionError("GroupVector no admite valores negativos")
        return _frozen_array(arr.astype(np.uint64, copy=True))

    @model_validator(mode="after")
    def _check_range(self):
        if self.values.size and int(self.values.max()) >= (1 << self.p):
            raise DimensionError(f"valor fuera de [0, 2^{self.p} - 1]")
        return self

    @classmethod
    def trusted(cls, values: np.ndarray, p: int) -> "GroupVector":
        """Construye sin validar: solo para resultados ya reducidos mod 2^p."""
        return cls.model_construct(values=_frozen_array(values.astype(np.uint64, copy=False)), p=p)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupVector):
            return NotImplemented
        return self.p == other.p and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.p, self.values.tobytes()))


class MaskSeed(BaseModel):
    """Semilla opaca de 128 bits. Misma semilla → misma máscara."""
    model_config = ConfigDict(frozen=True)

    seed: bytes

    @field_validator("seed")
    @classmethod
    def _sixteen_bytes(cls, v: bytes) -> bytes:
        if len(v) != 16:
            raise ValueError(f"MaskSeed necesita 16 bytes, recibido {len(v)}")
        return v

    @classmethod
    def from_int(cls, n: int) -> "MaskSeed":
        return cls(seed=(n % (1 << 128)).to_bytes(16, "little"))

    @classmethod
    def from_hex(cls, text: str) -> "MaskSeed":
        return cls(seed=bytes.fromhex(text))

    @classmethod
    def random(cls) -> "MaskSeed":
        return cls(seed=secrets.token_bytes(16))

    def child(self, label: int) -> "MaskSeed":
        """Deriva una semilla hija independiente (por ronda, tag, tensor, cliente...)."""
        digest = hashlib.blake2b(
            _CHILD_DOMAIN + self.seed + struct.pack("<I", label & 0xFFFFFFFF),
            digest_size=16,
        ).digest()
        return MaskSeed(seed=digest)

    def hex(self) -> str:
        return self.seed.hex()


# ── Codecs ────────────────────────────────────────────────────────────────────

class QParams(BaseModel):
    """Parámetros de cuantización escalar por tensor, iguales para todos los clientes."""
    model_config = ConfigDict(frozen=True)

    scale: float = Field(gt=0)              # s
    zero_point: int                          # z en [0, 2^b - 1]
    bits: int = Field(ge=1, le=MAX_BITS)    # b

    @model_validator(mode="after")
    def _zero_point_in_range(self):
        if not 0 <= self.zero_point < (1 << self.bits):
            raise ValueError(f"zero_point {self.zero_point} fuera de [0, 2^{self.bits} - 1]")
        return self

    # 8 bytes float64 + 4 bytes int32 + 1 byte b
    def to_bytes(self) -> bytes:
        return struct.pack("<diB", self.scale, self.zero_point, self.bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "QParams":
        scale, zero_point, bits = struct.unpack("<diB", data)
        return cls(scale=scale, zero_point=zero_point, bits=bits)


class PruneSpec(BaseModel):
    """Máscara de poda compartida por todos los clientes de la ronda."""
    model_config = ConfigDict(frozen=True)

    mask_seed: MaskSeed
    sparsity: float = Field(ge=0.0, lt=1.0)
    shape: tuple[int, ...]

    @model_validator(mode="after")
    def _keeps_something(self):
        if any(n < 1 for n in self.shape):
            raise ShapeError(f"forma inválida {self.shape}")
        if self.kept_count < 1:
            raise ValueError("la poda no puede eliminar todos los elementos")
        return self

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def kept_count(self) -> int:
        return self.size - math.floor(self.sparsity * self.size)


class PQConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(ge=2)  # número de codewords
    d: int = Field(ge=1)  # tamaño de bloque pedido

    @property
    def bits_per_index(self) -> int:
        return (self.k - 1).bit_length()


class Codebook(BaseModel):
    """k codewords de dimensión d (float32, igual que viajan por el downlink)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    codewords: np.ndarray
    degenerate: bool = False             # k > bloques distintos: centroides duplicados
    distortion: Optional[float] = None   # distorsión final sobre los bloques de entrenamiento
    history: tuple[float, ...] = ()      # distorsión tras cada asignación de k-means

    @field_validator("codewords", mode="before")
    @classmethod
    def _finite_matrix(cls, v):
        arr = np.asarray(v, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"codebook necesita forma (k, d), recibido {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("codebook con valores no finitos")
        return _frozen_array(arr.copy())

    @property
    def k(self) -> int:
        return int(self.codewords.shape[0])

    @property
    def d(self) -> int:
        return int(self.codewords.shape[1])

    # u32 k, u32 d, k·d float32 row-major
    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.k, self.d) + self.codewords.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        k, d = struct.unpack_from("<II", data)
        body = np.frombuffer(data, dtype="<f4", offset=8)
        if body.size != k * d:
            raise ValueError(f"codebook serializado con {body.size} floats, esperado {k * d}")
        return cls(codewords=body.reshape(k, d))


class Assignments(BaseModel):
    """Índices de codeword por bloque, forma (C_in/d, C_out)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    indices: np.ndarray
    k: int = Field(ge=1)

    @field_validator("indices", mode="before")
    @classmethod
    def _int_matrix(cls, v):
        arr = np.asarray(v)
        if arr.ndim != 2:
            raise ShapeError(f"Assignments necesita 2 dimensiones, recibido {arr.ndim}")
        return _frozen_array(arr.astype(np.int64, copy=True))

    @model_validator(mode="after")
    def _indices_below_k(self):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.k):
            raise DimensionError(f"índice de codeword fuera de [0, {self.k - 1}]")
        return self

    @classmethod
    def from_flat(cls, flat: np.ndarray, k: int, grid: tuple[int, int]) -> "Assignments":
        rows, cols = grid
        return cls(indices=np.asarray(flat).reshape(cols, rows).T, k=k)

    def flat(self) -> np.ndarray:
        """Índices en el orden de bloques de split_blocks (por columnas)."""
        return self.indices.T.ravel()


# ── Protocolo ─────────────────────────────────────────────────────────────────

class SchemeTag(IntEnum):
    SQ = 0
    PRUNE = 1
    PQ_ASSIGN = 2
    PLAIN = 3   # punto fijo sin comprimir (biases, normas, baseline)


class MaskedPayload(BaseModel):
    """Mensaje cliente → servidor: cuerpo empaquetado y enmascarado."""
    model_config = ConfigDict(frozen=True)

    round_id: int = Field(ge=0, lt=1 << 32)
    client_id: int = Field(ge=0, lt=1 << 32)
    scheme_tag: SchemeTag
    p: int = Field(ge=1, le=MAX_BITS)
    body: bytes
    element_count: int = Field(ge=0)

    @model_validator(mode="after")
    def _body_matches_count(self):
        expected = (self.element_count * self.p + 7) // 8
        if len(self.body) != expected:
            raise DimensionError(
                f"body de {len(self.body)} bytes, esperado {expected} "
                f"({self.element_count} elementos a {self.p} bits)"
            )
        return self


class AssignmentHistogram(BaseModel):
    """Histogramas por bloque: counts[bloque, r] = clientes que eligieron el codeword r."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray
    n_clients: int = Field(ge=1)

    @field_validator("counts", mode="before")
    @classmethod
    def _count_matrix(cls, v):
        arr = np.asarray(v)
        if arr.ndim != 2:
            raise ShapeError(f"counts necesita forma (bloques, k), recibido {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValueError("counts negativos")
        return _frozen_array(arr.astype(np.int64, copy=True))

    @model_validator(mode="after")
    def _conserves_clients(self):
        if self.counts.size and np.any(self.counts.sum(axis=1) != self.n_clients):
            raise ValueError("algún bloque no suma el número de clientes")
        return self

    @property
    def k(self) -> int:
        return int(self.counts.shape[1])

    @property
    def n_blocks(self) -> int:
        return int(self.counts.shape[0])


# ── Simulación ────────────────────────────────────────────────────────────────

class ClientShard(BaseModel):
    """Datos locales de un cliente. sample_count es su peso ω en FedAvg."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    client_id: int
    features: np.ndarray
    labels: np.ndarray

    @model_validator(mode="after")
    def _non_empty(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("features y labels con distinto número de filas")
        if self.features.shape[0] < 1:
            raise ValueError(f"el cliente {self.client_id} no tiene muestras")
        return self

    @property
    def sample_count(self) -> int:
        return int(self.labels.shape[0])


class RefreshPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    period: Optional[int] = Field(default=1, ge=1)  # None → solo en la ronda 0
    source: Literal["aggregate_update", "public_proxy"] = "public_proxy"

    def is_refresh_round(self, round_id: int) -> bool:
        if round_id == 0:
            return True
        return self.period is not None and round_id % self.period == 0


class SQCodec(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: Literal["sq"] = "sq"
    qparams: QParams


class PruneCodec(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: Literal["prune"] = "prune"
    spec: PruneSpec


class PQCodec(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: Literal["pq"] = "pq"
    config: PQConfig
    block_size: int = Field(ge=1)   # d adaptado a C_in de esta capa
    codebook: Codebook


class PlainCodec(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: Literal["plain"] = "plain"


TensorCodec = Annotated[Union[SQCodec, PruneCodec, PQCodec, PlainCodec], Field(discriminator="kind")]


class RoundPlan(BaseModel):
    """Lo que el servidor difunde al empezar la ronda."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    round_id: int = Field(ge=0)
    theta: dict[str, np.ndarray]
    codecs: dict[str, TensorCodec]
    p: int = Field(ge=1, le=MAX_BITS)                 # bit-width de segmentos SQ y PRUNE
    plain_p: int = Field(default=32, ge=2, le=MAX_BITS)
    frac_bits: int = Field(default=16, ge=0, lt=MAX_BITS)
    clients: list[int]
    seeds: dict[int, MaskSeed]
    weighted: bool = True
    lift: Literal["unsigned", "centered"] = "unsigned"

    @model_validator(mode="after")
    def _consistent(self):
        if set(self.theta) != set(self.codecs):
            raise ValueError("cada tensor necesita exactamente un codec")
        if not self.clients:
            raise ValueError("la ronda necesita al menos un cliente")
        if len(set(self.clients)) != len(self.clients):
            raise ValueError("clientes duplicados en la ronda")
        if set(self.seeds) != set(self.clients):
            raise ValueError("cada cliente necesita exactamente una semilla")
        ks = set()
        for name, codec in self.codecs.items():
            tensor = self.theta[name]
            if isinstance(codec, PQCodec):
                if tensor.ndim != 2:
                    raise ShapeError(f"PQ solo comprime matrices ('{name}' tiene forma {tensor.shape})")
                if tensor.shape[0] % codec.block_size:
                    raise ShapeError(f"block_size {codec.block_size} no divide C_in de '{name}'")
                ks.add(codec.codebook.k)
            elif isinstance(codec, PruneCodec) and codec.spec.shape != tensor.shape:
                raise ShapeError(f"PruneSpec de '{name}' con forma {codec.spec.shape}, tensor {tensor.shape}")
            elif isinstance(codec, SQCodec) and codec.qparams.bits > self.p:
                raise DimensionError(f"b={codec.qparams.bits} de '{name}' mayor que p={self.p}")
        if len(ks) > 1:
            raise ValueError("todas las capas PQ de una ronda comparten k")
        return self


class RoundMetrics(BaseModel):
    round_id: int
    accuracy: float
    loss: float
    uplink_bytes: float              # media por cliente, suma de bodies serializados
    overflow_fraction: float         # oráculo del simulador
    compression_error: float         # ‖d(agg) − Σg‖ / ‖Σg‖
    secure_matches_plaintext: bool   # agregado seguro == suma modular en claro


# ── Mensajes del servicio TEE ─────────────────────────────────────────────────

class MaskSumRequest(BaseModel):
    round_id: int
    seeds: dict[int, str]     # client_id → semilla en hex
    scheme_tag: SchemeTag
    length: int = Field(ge=0)
    p: int = Field(ge=1, le=MAX_BITS)


class MaskSumResponse(BaseModel):
    length: int
    p: int
    body: str                 # suma de máscaras empaquetada, en hex


class HistogramRequest(BaseModel):
    round_id: int
    frames: list[str]         # frames completos (cabecera + body) en hex
    seeds: dict[int, str]
    k: int = Field(ge=2)
    blocks: int = Field(ge=0)


class HistogramResponse(BaseModel):
    n_clients: int
    counts: list[list[int]]   # (bloques, k)


class ErrorResponse(BaseModel):
    error: str
    detail: str
