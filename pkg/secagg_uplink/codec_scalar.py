"""
Cuantización escalar por tensor (MinMax) y su decuantizador lineal del agregado.
También el punto fijo con signo que usan los tensores sin comprimir.
"""

import logging
from typing import Literal

import numpy as np

from .errors import CalibrationError, CapacityError, DimensionError
from .finite_group import to_signed
from .models import MAX_BITS, GroupVector, QParams

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12

Scheme = Literal["symmetric", "affine"]
Lift = Literal["unsigned", "centered"]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ── Calibración ───────────────────────────────────────────────────────────────

def calibrate_minmax(tensor, b: int, scheme: Scheme = "symmetric") -> QParams:
    x = np.asarray(tensor, dtype=np.float64).ravel()
    if x.size == 0:
        raise CalibrationError("no se puede calibrar un tensor vacío")
    if not 1 <= b <= MAX_BITS:
        raise CapacityError(f"b={b} fuera de [1, {MAX_BITS}]")
    lo, hi = float(x.min()), float(x.max())

    if scheme == "symmetric":
        # con b=1 el rango con signo es {-1, 0}: denominador mínimo 1
        scale = max(abs(lo), abs(hi)) / max((1 << (b - 1)) - 1, 1)
        zero_point = 1 << (b - 1)
        return QParams(scale=max(scale, SCALE_FLOOR), zero_point=zero_point, bits=b)

    if scheme == "affine":
        scale = max((hi - lo) / ((1 << b) - 1), SCALE_FLOOR)
        zero_point = int(np.clip(round_half_away(np.float64(-lo / scale)), 0, (1 << b) - 1))
        return QParams(scale=scale, zero_point=zero_point, bits=b)

    raise ValueError(f"esquema desconocido: {scheme}")


# ── Cuantización ──────────────────────────────────────────────────────────────

def quantize(tensor, qp: QParams) -> GroupVector:
    x = np.asarray(tensor, dtype=np.float64).ravel()
    q = np.clip(round_half_away(x / qp.scale) + qp.zero_point, 0, (1 << qp.bits) - 1)
    return GroupVector.trusted(q.astype(np.uint64), qp.bits)


def dequantize(q: GroupVector, qp: QParams) -> np.ndarray:
    if q.p != qp.bits:
        raise DimensionError(f"vector a {q.p} bits con qparams de {qp.bits} bits")
    return qp.scale * (q.values.astype(np.float64) - qp.zero_point)


def dequantize_aggregate(q_sum: GroupVector, qp: QParams, n_clients: int,
                         lift: Lift = "unsigned") -> np.ndarray:
    """
    s·(x − N·z).
    Con lift="centered" el residuo (x − N·2^{b−1}) mod 2^p se lee con signo y se
    suma N·(2^{b−1} − z), así vale también para qparams afines.
    """
    if q_sum.p < qp.bits:
        raise DimensionError(f"agregado a {q_sum.p} bits menor que b={qp.bits}")
    if n_clients < 1:
        raise ValueError("n_clients debe ser ≥ 1")
    if lift == "unsigned":
        return qp.scale * (q_sum.values.astype(np.float64) - n_clients * qp.zero_point)
    if lift == "centered":
        half = 1 << (qp.bits - 1)
        center = np.uint64((n_clients * half) % (1 << q_sum.p))
        shifted = (q_sum.values - center) & np.uint64((1 << q_sum.p) - 1)
        residue = to_signed(GroupVector.trusted(shifted, q_sum.p)).astype(np.float64)
        return qp.scale * (residue + n_clients * (half - qp.zero_point))
    raise ValueError(f"lift desconocido: {lift}")


def min_safe_bitwidth(b: int, n_clients: int) -> int:
    """b + ⌈log2 N⌉: la suma de N valores de b bits no desborda."""
    if n_clients < 1:
        raise ValueError("n_clients debe ser ≥ 1")
    p = b + (n_clients - 1).bit_length()
    if p > MAX_BITS:
        raise CapacityError(f"b={b} con N={n_clients} necesita p={p} > {MAX_BITS}")
    return p


# ── Punto fijo con signo ──────────────────────────────────────────────────────

def default_frac_bits(p: int) -> int:
    return 16 if p >= 32 else p // 2


def encode_fixed(x, p: int, frac_bits: int) -> GroupVector:
    """round(x·2^f) saturado al rango con signo de p bits, en complemento a dos."""
    scaled = round_half_away(np.asarray(x, dtype=np.float64).ravel() * float(1 << frac_bits))
    limit = 1 << (p - 1)
    ints = np.clip(scaled, -limit, limit - 1).astype(np.int64)
    return GroupVector.trusted(ints.astype(np.uint64) & np.uint64((1 << p) - 1), p)


def decode_fixed(v: GroupVector, frac_bits: int) -> np.ndarray:
    return to_signed(v).astype(np.float64) / float(1 << frac_bits)
