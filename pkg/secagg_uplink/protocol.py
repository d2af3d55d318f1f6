"""
Protocolo de ronda con tres roles (clientes, servidor, TEE) para SecAgg
(sumas enmascaradas) y SecInd (histogramas de asignaciones PQ).

Frame: cabecera de 16 bytes little-endian
  round_id u32 | client_id u32 | scheme_tag u8 | p u8 | reserved u16 | body_len u32
seguida del body empaquetado.

El servidor nunca desenmascara un payload individual: solo suma bodies
enmascarados y resta la suma de máscaras que le da el TEE. Todo lo que lee
texto en claro vive en PlaintextOracle, que solo usa el simulador.
"""

import logging
import struct
import threading
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .codec_pq import merge_blocks
from .errors import DimensionError, FramingError, ProtocolError
from .finite_group import (
    add_mod,
    expand_mask,
    expand_mask_mod,
    pack,
    packed_size,
    padding_is_zero,
    scale_mod,
    sub_mod,
    sum_mod,
    to_signed,
    unpack,
)
from .models import (
    MAX_BITS,
    AssignmentHistogram,
    Assignments,
    Codebook,
    GroupVector,
    MaskedPayload,
    MaskSeed,
    SchemeTag,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IIBBHI")
HEADER_SIZE = HEADER.size  # 16

MaskSource = Callable[[MaskSeed, int, int], GroupVector]


# ── Frames ────────────────────────────────────────────────────────────────────

def encode_frame(payload: MaskedPayload) -> bytes:
    header = HEADER.pack(payload.round_id, payload.client_id, int(payload.scheme_tag),
                         payload.p, 0, len(payload.body))
    return header + payload.body


def decode_frame(data: bytes, element_count: int) -> MaskedPayload:
    """Frame → payload. element_count lo fija el plan de ronda, no viaja en la cabecera."""
    if len(data) < HEADER_SIZE:
        raise FramingError(f"frame de {len(data)} bytes, la cabecera ocupa {HEADER_SIZE}")
    round_id, client_id, tag, p, reserved, body_len = HEADER.unpack_from(data)
    if tag not in SchemeTag._value2member_map_:
        raise FramingError(f"scheme_tag desconocido: {tag}")
    if not 1 <= p <= MAX_BITS:
        raise FramingError(f"p={p} fuera de [1, {MAX_BITS}]")
    if reserved != 0:
        raise FramingError("campo reservado distinto de cero")
    body = data[HEADER_SIZE:]
    if len(body) != body_len:
        raise FramingError(f"body de {len(body)} bytes, la cabecera dice {body_len}")
    if body_len != packed_size(element_count, p):
        raise FramingError(f"body de {body_len} bytes para {element_count} elementos a {p} bits")
    if not padding_is_zero(body, element_count, p):
        raise FramingError(f"cliente {client_id}: bits de relleno distintos de cero")
    return MaskedPayload(round_id=round_id, client_id=client_id, scheme_tag=SchemeTag(tag),
                         p=p, body=body, element_count=element_count)


# ── Cliente ───────────────────────────────────────────────────────────────────

def client_encrypt(q_update: GroupVector, seed: MaskSeed, round_id: int, client_id: int,
                   scheme_tag: SchemeTag = SchemeTag.SQ,
                   mask_source: MaskSource = expand_mask) -> MaskedPayload:
    mask = mask_source(seed, len(q_update), q_update.p)
    return MaskedPayload(round_id=round_id, client_id=client_id, scheme_tag=scheme_tag,
                         p=q_update.p, body=pack(add_mod(q_update, mask)),
                         element_count=len(q_update))


def weighted_client_encrypt(q_update: GroupVector, weight: int, seed: MaskSeed,
                            round_id: int, client_id: int,
                            scheme_tag: SchemeTag = SchemeTag.PLAIN,
                            mask_source: MaskSource = expand_mask) -> MaskedPayload:
    """h = q·ω + m. Los segmentos SQ no se ponderan."""
    if weight < 1:
        raise ValueError(f"peso ω={weight} debe ser ≥ 1")
    if scheme_tag == SchemeTag.PQ_ASSIGN:
        raise ProtocolError("las asignaciones PQ no se ponderan; usa client_encrypt_assignments")
    if scheme_tag == SchemeTag.SQ or weight == 1:
        return client_encrypt(q_update, seed, round_id, client_id, scheme_tag, mask_source)

    if len(q_update):
        peak = int(np.abs(to_signed(q_update)).max())
        if peak * weight >= 1 << (q_update.p - 1):
            log.warning(f"⚠️ cliente {client_id}: ω={weight} desborda {q_update.p} bits "
                        f"(|valor| máximo {peak})")
    return client_encrypt(scale_mod(q_update, weight), seed, round_id, client_id,
                          scheme_tag, mask_source)


def assignment_mask(seed: MaskSeed, length: int, k: int) -> np.ndarray:
    return expand_mask_mod(seed, length, k)


def client_encrypt_assignments(assignments: Assignments, seed: MaskSeed,
                               round_id: int, client_id: int) -> MaskedPayload:
    """Enmascara los índices en Z_k y los empaqueta a ⌈log2 k⌉ bits."""
    k = assignments.k
    bits = max((k - 1).bit_length(), 1)
    flat = assignments.flat().astype(np.uint64)
    masked = (flat + assignment_mask(seed, flat.size, k)) % np.uint64(k)
    return MaskedPayload(round_id=round_id, client_id=client_id,
                         scheme_tag=SchemeTag.PQ_ASSIGN, p=bits,
                         body=pack(GroupVector.trusted(masked, bits)),
                         element_count=int(flat.size))


# ── TEE ───────────────────────────────────────────────────────────────────────

def tee_mask_sum(seeds: Sequence[MaskSeed], length: int, p: int,
                 mask_source: MaskSource = expand_mask) -> GroupVector:
    if not seeds:
        raise ProtocolError("tee_mask_sum necesita al menos una semilla")
    return sum_mod([mask_source(s, length, p) for s in seeds])


def tee_histograms(masked_assignments: Sequence[MaskedPayload], seeds: Sequence[MaskSeed],
                   k: int, blocks: int) -> AssignmentHistogram:
    """Descifra cada matriz de asignaciones y cuenta por bloque (bloques × k)."""
    if not masked_assignments:
        raise ProtocolError("tee_histograms necesita al menos un cliente")
    if len(masked_assignments) != len(seeds):
        raise ProtocolError(f"{len(masked_assignments)} payloads y {len(seeds)} semillas")
    bits = max((k - 1).bit_length(), 1)
    counts = np.zeros(blocks * k, dtype=np.int64)
    offsets = np.arange(blocks, dtype=np.int64) * k
    for payload, seed in zip(masked_assignments, seeds):
        if payload.scheme_tag != SchemeTag.PQ_ASSIGN:
            raise ProtocolError(f"cliente {payload.client_id}: tag {payload.scheme_tag.name}")
        if payload.p != bits or payload.element_count != blocks:
            raise ProtocolError(f"cliente {payload.client_id}: {payload.element_count} índices a "
                                f"{payload.p} bits, esperado {blocks} a {bits}")
        masked = unpack(payload.body, blocks, bits).values
        if masked.size and int(masked.max()) >= k:
            raise ProtocolError(f"cliente {payload.client_id}: índice enmascarado ≥ k={k}")
        mask = assignment_mask(seed, blocks, k)
        plain = ((masked + np.uint64(k) - mask) % np.uint64(k)).astype(np.int64)
        counts += np.bincount(offsets + plain, minlength=blocks * k)
    return AssignmentHistogram(counts=counts.reshape(blocks, k), n_clients=len(masked_assignments))


class TrustedExecutor:
    """
    Rol TEE en proceso. Recibe semillas y frames, deriva las semillas hijas por
    tag y devuelve solo agregados (suma de máscaras, histogramas).
    Procesa los mensajes en serie.
    """

    def __init__(self, mask_source: MaskSource = expand_mask):
        self._mask_source = mask_source
        self._lock = threading.Lock()

    def secagg_mask_sum(self, round_id: int, seeds: Mapping[int, MaskSeed],
                        scheme_tag: SchemeTag, length: int, p: int) -> GroupVector:
        with self._lock:
            children = [seeds[c].child(int(scheme_tag)) for c in sorted(seeds)]
            log.debug(f"🔄 TEE ronda {round_id}: suma de {len(children)} máscaras "
                      f"({SchemeTag(scheme_tag).name}, {length}×{p} bits)")
            return tee_mask_sum(children, length, p, self._mask_source)

    def secind_histograms(self, round_id: int, frames: Sequence[bytes],
                          seeds: Mapping[int, MaskSeed], k: int, blocks: int) -> AssignmentHistogram:
        with self._lock:
            payloads = [decode_frame(f, blocks) for f in frames]
            ids = [pl.client_id for pl in payloads]
            if sorted(ids) != sorted(seeds) or len(set(ids)) != len(ids):
                raise ProtocolError(f"ronda {round_id}: clientes {sorted(ids)} sin semilla exacta")
            if any(pl.round_id != round_id for pl in payloads):
                raise ProtocolError(f"frame de otra ronda (esperada {round_id})")
            child = [seeds[pl.client_id].child(int(SchemeTag.PQ_ASSIGN)) for pl in payloads]
            log.debug(f"🔄 TEE ronda {round_id}: histogramas de {len(payloads)} clientes, "
                      f"{blocks} bloques, k={k}")
            return tee_histograms(payloads, child, k, blocks)


# ── Servidor ──────────────────────────────────────────────────────────────────

def server_aggregate_secagg(payloads: Sequence[MaskedPayload], mask_sum: GroupVector,
                            expected_clients: Optional[Sequence[int]] = None) -> GroupVector:
    """Σ h_i − Σ m_i: suma modular exacta de las actualizaciones comprimidas."""
    if not payloads:
        raise ProtocolError("no hay payloads que agregar")
    first = payloads[0]
    for pl in payloads[1:]:
        if (pl.round_id, pl.scheme_tag, pl.p, pl.element_count) != \
                (first.round_id, first.scheme_tag, first.p, first.element_count):
            raise ProtocolError(f"payload heterogéneo del cliente {pl.client_id}")
    ids = [pl.client_id for pl in payloads]
    if len(set(ids)) != len(ids):
        raise ProtocolError("cliente duplicado en la ronda")
    if expected_clients is not None and set(ids) != set(expected_clients):
        missing = sorted(set(expected_clients) - set(ids))
        raise ProtocolError(f"faltan clientes {missing} (sin manejo de abandonos)")
    if mask_sum.p != first.p or len(mask_sum) != first.element_count:
        raise DimensionError(f"suma de máscaras {len(mask_sum)}×{mask_sum.p} bits, "
                             f"payloads {first.element_count}×{first.p} bits")

    total = sum_mod([unpack(pl.body, pl.element_count, pl.p) for pl in payloads])
    log.debug(f"🔄 servidor ronda {first.round_id}: {len(payloads)} payloads "
              f"{first.scheme_tag.name} agregados")
    return sub_mod(total, mask_sum)


def server_reconstruct_secind(histograms: AssignmentHistogram, codebook: Codebook,
                              shape: tuple[int, int]) -> np.ndarray:
    """Σ_r H[r]·C[r] por bloque, recompuesto con el layout de split_blocks."""
    if histograms.k != codebook.k:
        raise DimensionError(f"histograma con k={histograms.k}, codebook con k={codebook.k}")
    c_in, c_out = shape
    if histograms.n_blocks * codebook.d != c_in * c_out:
        raise DimensionError(f"{histograms.n_blocks} bloques de {codebook.d} no forman {c_in}×{c_out}")
    blocks = histograms.counts.astype(np.float64) @ codebook.codewords.astype(np.float64)
    return merge_blocks(blocks, shape)


# ── Oráculo (solo simulador) ──────────────────────────────────────────────────

class PlaintextOracle:
    """Acceso a las actualizaciones en claro. Nunca forma parte del camino del servidor."""

    @staticmethod
    def plaintext_sum(updates: Sequence[GroupVector], p: int) -> GroupVector:
        return sum_mod([GroupVector.trusted(u.values, p) for u in updates])

    @staticmethod
    def detect_overflows(updates: Sequence[GroupVector], p: int,
                         center: Optional[int] = None) -> float:
        """
        Fracción de posiciones cuya suma entera real se sale del grupo.
        Sin center: suma ≥ 2^p. Con center = 2^{b−1} (lift centrado):
        Σ(q − center) fuera de [−2^{p−1}, 2^{p−1}).
        """
        if not updates or len(updates[0]) == 0:
            return 0.0
        total = np.zeros(len(updates[0]), dtype=np.int64)
        for u in updates:
            total += u.values.astype(np.int64)
        if center is None:
            wrapped = total >= (1 << p)
        else:
            centered = total - len(updates) * center
            wrapped = (centered < -(1 << (p - 1))) | (centered >= (1 << (p - 1)))
        return float(np.mean(wrapped))

    @staticmethod
    def detect_signed_overflows(signed_sum: np.ndarray, p: int) -> float:
        """Fracción de sumas con signo (ya ponderadas) fuera de [−2^{p−1}, 2^{p−1})."""
        total = np.asarray(signed_sum, dtype=np.int64)
        if total.size == 0:
            return 0.0
        half = 1 << (p - 1)
        return float(np.mean((total < -half) | (total >= half)))
