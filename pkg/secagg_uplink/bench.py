"""
Micro-bench de codecs sobre tensores sintéticos: tiempo de codificación y
decodificación (incluido enmascarado y empaquetado) y bits por peso medidos
sobre el body serializado real.
"""

import logging
import time
from typing import Callable

import numpy as np
from pydantic import BaseModel

from .codec_pq import adapt_block_size, encode_matrix, split_blocks, train_codebook
from .codec_prune import compact, expand
from .codec_scalar import (
    calibrate_minmax,
    decode_fixed,
    default_frac_bits,
    dequantize_aggregate,
    encode_fixed,
    quantize,
)
from .finite_group import widen
from .models import MaskedPayload, MaskSeed, PruneSpec, SchemeTag
from .protocol import (
    client_encrypt,
    client_encrypt_assignments,
    server_aggregate_secagg,
    server_reconstruct_secind,
    tee_histograms,
    tee_mask_sum,
)
from .schemas import BenchConfig, SchemeConfig

log = logging.getLogger(__name__)

BENCH_COLUMNS = ["codec", "params", "bits_per_weight", "encode_ms", "decode_ms", "encode_mweights_s"]


class BenchRow(BaseModel):
    codec: str
    params: str
    bits_per_weight: float
    encode_ms: float
    decode_ms: float
    encode_mweights_s: float


def _best_of(fn: Callable[[], object], repeats: int) -> tuple[float, object]:
    best, result = float("inf"), None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - start)
    return best, result


def _codec_pair(scheme: SchemeConfig, W: np.ndarray, seed: MaskSeed):
    """(encode, decode) para un esquema: encode devuelve el payload enmascarado."""
    if scheme.kind == "sq":
        qp = calibrate_minmax(W, scheme.b, scheme.scheme)
        p = scheme.p or scheme.b

        def encode() -> MaskedPayload:
            return client_encrypt(widen(quantize(W, qp), p), seed, 0, 0, SchemeTag.SQ)

        def decode(payload: MaskedPayload):
            total = server_aggregate_secagg([payload], tee_mask_sum([seed], payload.element_count, p))
            return dequantize_aggregate(total, qp, 1).reshape(W.shape)

        return encode, decode

    if scheme.kind == "prune":
        spec = PruneSpec(mask_seed=seed.child(1), sparsity=scheme.sparsity, shape=W.shape)
        p = scheme.p or 32
        frac = default_frac_bits(p)

        def encode() -> MaskedPayload:
            return client_encrypt(encode_fixed(compact(W, spec), p, frac), seed, 0, 0, SchemeTag.PRUNE)

        def decode(payload: MaskedPayload):
            total = server_aggregate_secagg([payload], tee_mask_sum([seed], payload.element_count, p))
            return expand(decode_fixed(total, frac), spec)

        return encode, decode

    if scheme.kind == "pq":
        d = adapt_block_size(W.shape[0], scheme.d)
        codebook = train_codebook(split_blocks(W, d), scheme.k, scheme.kmeans_iters, seed=seed.child(2))

        def encode() -> MaskedPayload:
            return client_encrypt_assignments(encode_matrix(W, codebook), seed, 0, 0)

        def decode(payload: MaskedPayload):
            hist = tee_histograms([payload], [seed], codebook.k, payload.element_count)
            return server_reconstruct_secind(hist, codebook, W.shape)

        return encode, decode

    def encode() -> MaskedPayload:
        return client_encrypt(encode_fixed(W, 32, 16), seed, 0, 0, SchemeTag.PLAIN)

    def decode(payload: MaskedPayload):
        total = server_aggregate_secagg([payload], tee_mask_sum([seed], payload.element_count, 32))
        return decode_fixed(total, 16).reshape(W.shape)

    return encode, decode


def bench_label(scheme: SchemeConfig) -> str:
    if scheme.kind == "sq":
        return f"b={scheme.b} p={scheme.p or scheme.b}"
    if scheme.kind == "prune":
        return f"sparsity={scheme.sparsity} p={scheme.p or 32}"
    if scheme.kind == "pq":
        return f"k={scheme.k} d={scheme.d}"
    return "fp32"


def run_bench(config: BenchConfig) -> list[BenchRow]:
    rng = np.random.default_rng(config.seed)
    W = rng.standard_normal((config.rows, config.cols)) * 0.05
    seed = MaskSeed.from_int(config.seed)
    rows = []
    for scheme in (c for s in config.codecs for c in s.expand()):
        encode, decode = _codec_pair(scheme, W, seed)
        encode_s, payload = _best_of(encode, config.repeats)
        decode_s, _ = _best_of(lambda: decode(payload), config.repeats)
        row = BenchRow(
            codec=scheme.kind,
            params=bench_label(scheme),
            bits_per_weight=len(payload.body) * 8 / W.size,
            encode_ms=encode_s * 1e3,
            decode_ms=decode_s * 1e3,
            encode_mweights_s=W.size / encode_s / 1e6 if encode_s > 0 else float("inf"),
        )
        log.info(f"✅  {row.codec:<6} {row.params:<24} {row.bits_per_weight:.4f} bits/peso")
        rows.append(row)
    return rows
