"""
Aritmética modular en Z_{2^p}, expansión de máscaras y empaquetado de bits.

Formato de empaquetado (wire format de todos los payloads):
  valores en orden de índice, p bits cada uno, LSB primero, bits rellenados en
  bytes little-endian, último byte parcial con ceros en los bits altos.

Máscaras: bloque_c = BLAKE2b-512(b"secagg-uplink:mask:v1:" || seed || u64le(c)).
Los bloques se concatenan y el flujo de bytes se lee con `unpack` a p bits
por elemento. Vector de referencia (seed = 00 01 .. 0f):
  bloque 0 = cd73f6dd2a4b5452ba6c92aa311ba93f...
  expand_mask(seed, 4, 32) = [0xddf673cd, 0x52544b2a, 0xaa926cba, 0x3fa91b31]
"""

import hashlib
import logging
import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, FramingError
from .models import MAX_BITS, GroupVector, MaskSeed

log = logging.getLogger(__name__)

_MASK_DOMAIN = b"secagg-uplink:mask:v1:"
_BLOCK_BYTES = 64
_WORD_DTYPES = {8: "<u1", 16: "<u2", 32: "<u4"}


def _check_bits(p: int) -> None:
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= MAX_BITS:
        raise DimensionError(f"bit-width p={p} fuera de [1, {MAX_BITS}]")


def _modmask(p: int) -> np.uint64:
    return np.uint64((1 << p) - 1)


def _check_pair(a: GroupVector, b: GroupVector) -> None:
    if a.p != b.p:
        raise DimensionError(f"bit-width distinto: {a.p} vs {b.p}")
    if len(a) != len(b):
        raise DimensionError(f"longitud distinta: {len(a)} vs {len(b)}")


# ── Aritmética ────────────────────────────────────────────────────────────────

def zeros(length: int, p: int) -> GroupVector:
    _check_bits(p)
    return GroupVector.trusted(np.zeros(length, dtype=np.uint64), p)


def add_mod(a: GroupVector, b: GroupVector) -> GroupVector:
    _check_pair(a, b)
    return GroupVector.trusted((a.values + b.values) & _modmask(a.p), a.p)


def sub_mod(a: GroupVector, b: GroupVector) -> GroupVector:
    # uint64 envuelve mod 2^64 y 2^p divide a 2^64
    _check_pair(a, b)
    return GroupVector.trusted((a.values - b.values) & _modmask(a.p), a.p)


def scale_mod(a: GroupVector, factor: int) -> GroupVector:
    """Multiplica cada elemento por un entero (peso ω) en el grupo."""
    f = np.uint64(int(factor) % (1 << a.p))
    return GroupVector.trusted((a.values * f) & _modmask(a.p), a.p)


def sum_mod(vectors: Sequence[GroupVector]) -> GroupVector:
    if not vectors:
        raise DimensionError("sum_mod necesita al menos un vector")
    first = vectors[0]
    for v in vectors[1:]:
        _check_pair(first, v)
    total = np.zeros(len(first), dtype=np.uint64)
    for v in vectors:
        total += v.values
    return GroupVector.trusted(total & _modmask(first.p), first.p)


def widen(v: GroupVector, p: int) -> GroupVector:
    """Mismos enteros vistos en un grupo más ancho (b → p)."""
    _check_bits(p)
    if p < v.p:
        raise DimensionError(f"no se puede estrechar de {v.p} a {p} bits")
    return GroupVector.trusted(v.values, p)


def concat(vectors: Iterable[GroupVector], p: int) -> GroupVector:
    parts = list(vectors)
    for v in parts:
        if v.p != p:
            raise DimensionError(f"segmento a {v.p} bits en un flujo de {p} bits")
    if not parts:
        return zeros(0, p)
    return GroupVector.trusted(np.concatenate([v.values for v in parts]), p)


def to_signed(v: GroupVector) -> np.ndarray:
    """Levantamiento centrado: [2^{p-1}, 2^p) se lee como negativo."""
    signed = v.values.astype(np.int64)
    half = 1 << (v.p - 1)
    return np.where(signed >= half, signed - (1 << v.p), signed)


# ── Máscaras ──────────────────────────────────────────────────────────────────

def prf_stream(seed: MaskSeed, n_bytes: int) -> bytes:
    """Flujo de bytes pseudoaleatorio en modo contador."""
    n_blocks = -(-n_bytes // _BLOCK_BYTES)
    prefix = _MASK_DOMAIN + seed.seed
    stream = b"".join(
        hashlib.blake2b(prefix + struct.pack("<Q", counter)).digest()
        for counter in range(n_blocks)
    )
    return stream[:n_bytes]


def expand_mask(seed: MaskSeed, length: int, p: int) -> GroupVector:
    _check_bits(p)
    if length < 0:
        raise DimensionError(f"longitud negativa: {length}")
    return unpack(prf_stream(seed, (length * p + 7) // 8), length, p, strict=False)


def expand_mask_mod(seed: MaskSeed, length: int, modulus: int) -> np.ndarray:
    """Máscara en Z_k. Potencia de dos: bits exactos; si no, palabras de 32 bits mod k."""
    if modulus < 1:
        raise DimensionError(f"módulo inválido: {modulus}")
    bits = (modulus - 1).bit_length()
    if modulus == 1:
        return np.zeros(length, dtype=np.uint64)
    if modulus == 1 << bits:
        return expand_mask(seed, length, bits).values
    # sesgo de módulo < k / 2^32
    return expand_mask(seed, length, 32).values % np.uint64(modulus)


# ── Empaquetado ───────────────────────────────────────────────────────────────

def packed_size(length: int, p: int) -> int:
    return (length * p + 7) // 8


def pack(v: GroupVector) -> bytes:
    if len(v) == 0:
        return b""
    if v.p in _WORD_DTYPES:
        return v.values.astype(_WORD_DTYPES[v.p]).tobytes()
    shifts = np.arange(v.p, dtype=np.uint64)
    bits = ((v.values[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def padding_is_zero(data: bytes, length: int, p: int) -> bool:
    """Bits altos del último byte parcial a cero."""
    used = (length * p) % 8
    return used == 0 or not data or data[-1] >> used == 0


def unpack(data: bytes, length: int, p: int, strict: bool = True) -> GroupVector:
    """strict=False acepta relleno arbitrario (flujo PRF)."""
    _check_bits(p)
    expected = packed_size(length, p)
    if len(data) != expected:
        raise FramingError(f"{len(data)} bytes para {length} valores de {p} bits, esperado {expected}")
    if strict and not padding_is_zero(data, length, p):
        raise FramingError(f"bits de relleno distintos de cero en el último byte ({length}×{p} bits)")
    if length == 0:
        return zeros(0, p)
    if p in _WORD_DTYPES:
        values = np.frombuffer(data, dtype=_WORD_DTYPES[p]).astype(np.uint64)
        return GroupVector.trusted(values, p)
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, count=length * p, bitorder="little").reshape(length, p)
    weights = np.uint64(1) << np.arange(p, dtype=np.uint64)
    values = (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
    return GroupVector.trusted(values, p)
