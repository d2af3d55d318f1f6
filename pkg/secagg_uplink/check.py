"""
Verificación rápida de las invariantes del protocolo, sin pytest.
Ejecutar con: python -m secagg_uplink check

Cada comprobación usa una semilla fija; si falla, se imprime la invariante
violada y la semilla para reproducirla.
"""

from typing import Callable

import numpy as np
from pydantic import BaseModel

from .bench import run_bench
from .codec_pq import decompress
from .codec_prune import compact, derive_keep_indices, expand
from .codec_scalar import (
    calibrate_minmax,
    decode_fixed,
    dequantize,
    dequantize_aggregate,
    encode_fixed,
    min_safe_bitwidth,
    quantize,
)
from .finite_group import add_mod, expand_mask, pack, sub_mod, unpack, widen
from .models import Assignments, Codebook, GroupVector, MaskedPayload, MaskSeed, PruneSpec, SchemeTag
from .protocol import (
    PlaintextOracle,
    client_encrypt,
    client_encrypt_assignments,
    decode_frame,
    encode_frame,
    server_aggregate_secagg,
    server_reconstruct_secind,
    tee_histograms,
    tee_mask_sum,
)
from .schemas import BenchConfig, SchemeConfig

GOLDEN_SEED = MaskSeed(seed=bytes(range(16)))
GOLDEN_MASK_P32 = [0xDDF673CD, 0x52544B2A, 0xAA926CBA, 0x3FA91B31]
GOLDEN_PACK_P5 = bytes.fromhex("410c52cc41")
GOLDEN_FRAME = bytes.fromhex("07000000030000000008000003000000010203")


class CheckResult(BaseModel):
    name: str
    ok: bool
    seed: int
    detail: str = ""


def _random_vector(rng: np.random.Generator, n: int, p: int) -> GroupVector:
    return GroupVector.trusted(rng.integers(0, 1 << p, size=n, dtype=np.uint64), p)


# ── Comprobaciones ────────────────────────────────────────────────────────────

def check_group_laws(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for p in (1, 3, 8, 16, 32):
        for _ in range(50):
            a, b, c = (_random_vector(rng, 32, p) for _ in range(3))
            if add_mod(add_mod(a, b), c) != add_mod(a, add_mod(b, c)):
                return f"asociatividad, p={p}"
            if add_mod(a, b) != add_mod(b, a):
                return f"conmutatividad, p={p}"
            if sub_mod(add_mod(a, b), b) != a:
                return f"inverso, p={p}"
    return ""


def check_mask_cancellation(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for p in range(1, 33):
        x = _random_vector(rng, 100, p)
        m = expand_mask(MaskSeed.from_int(int(rng.integers(1 << 62))), 100, p)
        if sub_mod(add_mod(x, m), m) != x:
            return f"p={p}"
    return ""


def check_pack_roundtrip(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for p in range(1, 33):
        for n in (0, 1, 7, 64, 129):
            v = _random_vector(rng, n, p)
            data = pack(v)
            if len(data) != (n * p + 7) // 8 or unpack(data, n, p) != v:
                return f"p={p}, n={n}"
    return ""


def check_wire_golden(seed: int, **_) -> str:
    if expand_mask(GOLDEN_SEED, 4, 32).values.tolist() != GOLDEN_MASK_P32:
        return "expand_mask no coincide con el vector de referencia"
    if pack(GroupVector(values=list(range(1, 9)), p=5)) != GOLDEN_PACK_P5:
        return "pack p=5 no coincide con el vector de referencia"
    payload = MaskedPayload(round_id=7, client_id=3, scheme_tag=SchemeTag.SQ, p=8,
                            body=b"\x01\x02\x03", element_count=3)
    if encode_frame(payload) != GOLDEN_FRAME or decode_frame(GOLDEN_FRAME, 3) != payload:
        return "frame no coincide con el vector de referencia"
    return ""


def check_secagg_exactness(seed: int, inject_fault: bool = False, **_) -> str:
    rng = np.random.default_rng(seed)
    for p in (1, 4, 8, 16, 32):
        for n_clients in (1, 2, 10, 100):
            for trial in range(5):
                updates = [_random_vector(rng, 48, p) for _ in range(n_clients)]
                seeds = [MaskSeed.from_int(int(rng.integers(1 << 62))) for _ in range(n_clients)]
                payloads = [client_encrypt(u, s, trial, i) for i, (u, s) in enumerate(zip(updates, seeds))]
                if inject_fault:
                    body = bytearray(payloads[0].body)
                    body[0] ^= 0x01
                    payloads[0] = payloads[0].model_copy(update={"body": bytes(body)})
                total = server_aggregate_secagg(payloads, tee_mask_sum(seeds, 48, p))
                if total != PlaintextOracle.plaintext_sum(updates, p):
                    return f"p={p}, N={n_clients}, intento {trial}"
    return ""


def check_sq_linearity(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for b in (1, 4, 8):
        for n_clients in (2, 10, 100):
            tensors = [rng.standard_normal(10_000) for _ in range(n_clients)]
            qp = calibrate_minmax(tensors[0], b)
            p = min_safe_bitwidth(b, n_clients)
            q = [widen(quantize(t, qp), p) for t in tensors]
            seeds = [MaskSeed.from_int(int(rng.integers(1 << 62))) for _ in range(n_clients)]
            payloads = [client_encrypt(v, s, 0, i) for i, (v, s) in enumerate(zip(q, seeds))]
            total = server_aggregate_secagg(payloads, tee_mask_sum(seeds, 10_000, p))
            secure = dequantize_aggregate(total, qp, n_clients)
            direct = sum(dequantize(quantize(t, qp), qp) for t in tensors)
            if not np.allclose(secure, direct, rtol=1e-6, atol=1e-6 * n_clients * qp.scale):
                return f"b={b}, N={n_clients}"
    return ""


def check_prune_linearity(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for sparsity in (0.0, 0.5, 0.9):
        spec = PruneSpec(mask_seed=MaskSeed.from_int(int(rng.integers(1 << 62))),
                         sparsity=sparsity, shape=(40, 25))
        grads = [rng.standard_normal((40, 25)) for _ in range(10)]
        summed = expand(sum(compact(g, spec) for g in grads), spec)
        if not np.allclose(summed, sum(expand(compact(g, spec), spec) for g in grads), atol=1e-12):
            return f"sparsity={sparsity}: Σ expand ≠ expand Σ"
        encoded = [encode_fixed(compact(g, spec), 32, 16) for g in grads]
        seeds = [MaskSeed.from_int(int(rng.integers(1 << 62))) for _ in grads]
        payloads = [client_encrypt(v, s, 0, i, SchemeTag.PRUNE) for i, (v, s) in enumerate(zip(encoded, seeds))]
        total = server_aggregate_secagg(payloads, tee_mask_sum(seeds, spec.kept_count, 32))
        secure = expand(decode_fixed(total, 16), spec)
        direct = sum(expand(decode_fixed(v, 16), spec) for v in encoded)
        if not np.allclose(secure, direct, rtol=1e-6, atol=1e-9):
            return f"sparsity={sparsity}: agregado seguro en punto fijo"
        pruned = np.setdiff1d(np.arange(spec.size), derive_keep_indices(spec))
        if np.any(secure.ravel()[pruned] != 0):
            return f"sparsity={sparsity}: coordenadas podadas no nulas"
    return ""


def check_secind_equivalence(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    for k in (8, 16, 32, 64):
        n_clients, rows, cols, d = 16, 32, 40, 4
        codebook = Codebook(codewords=rng.standard_normal((k, d)))
        grid = (rows // d, cols)
        assignments = [Assignments(indices=rng.integers(0, k, size=grid), k=k) for _ in range(n_clients)]
        seeds = [MaskSeed.from_int(int(rng.integers(1 << 62))) for _ in range(n_clients)]
        payloads = [client_encrypt_assignments(a, s, 0, i) for i, (a, s) in enumerate(zip(assignments, seeds))]
        hist = tee_histograms(payloads, seeds, k, grid[0] * grid[1])
        if np.any(hist.counts.sum(axis=1) != n_clients):
            return f"k={k}: histograma no conserva N"
        secure = server_reconstruct_secind(hist, codebook, (rows, cols))
        direct = sum(decompress(codebook, a) for a in assignments)
        if not np.allclose(secure, direct, rtol=1e-5, atol=1e-9):
            return f"k={k}: Σ H·C ≠ Σ C[A]"
    return ""


def check_overflow_margin(seed: int, **_) -> str:
    for b in range(1, 5):
        for n_clients in range(1, 65):
            p = min_safe_bitwidth(b, n_clients)
            worst = [GroupVector.trusted(np.full(4, (1 << b) - 1, dtype=np.uint64), b)] * n_clients
            if PlaintextOracle.detect_overflows(worst, p) != 0.0:
                return f"b={b}, N={n_clients}: desborde sin signo"
            center = 1 << (b - 1)
            lowest = [GroupVector.trusted(np.zeros(4, dtype=np.uint64), b)] * n_clients
            for inputs in (worst, lowest):
                if PlaintextOracle.detect_overflows(inputs, p, center) != 0.0:
                    return f"b={b}, N={n_clients}: desborde centrado"
    return ""


def check_overflow_monotone(seed: int, **_) -> str:
    rng = np.random.default_rng(seed)
    updates = [GroupVector.trusted(np.clip(np.rint(rng.normal(8, 3, 2000)), 0, 15).astype(np.uint64), 4)
               for _ in range(100)]
    for center in (None, 8):
        fractions = [PlaintextOracle.detect_overflows(updates, p, center) for p in range(4, 12)]
        if any(later > earlier for earlier, later in zip(fractions, fractions[1:])):
            return f"center={center}: {fractions}"
    return ""


def check_bits_per_weight(seed: int, **_) -> str:
    config = BenchConfig(repeats=1, seed=seed, codecs=[
        SchemeConfig(kind="pq", k=32, d=8, kmeans_iters=5),
        SchemeConfig(kind="sq", b=8, p=8),
        SchemeConfig(kind="prune", sparsity=0.9, p=32),
    ])
    measured = [row.bits_per_weight for row in run_bench(config)]
    if measured != [0.625, 8.0, 3.2]:
        return f"bits/peso {measured}, esperado [0.625, 8.0, 3.2]"
    return ""


CHECKS: list[tuple[str, Callable[..., str], int]] = [
    ("grupo abeliano Z_2^p", check_group_laws, 1),
    ("cancelación de máscaras", check_mask_cancellation, 2),
    ("pack/unpack biyectivo (p=1..32)", check_pack_roundtrip, 3),
    ("vectores de referencia del wire format", check_wire_golden, 0),
    ("exactitud SecAgg", check_secagg_exactness, 4),
    ("linealidad SQ", check_sq_linearity, 5),
    ("linealidad de la poda", check_prune_linearity, 6),
    ("equivalencia SecInd", check_secind_equivalence, 7),
    ("margen de overflow b + ⌈log2 N⌉", check_overflow_margin, 0),
    ("overflow monótono en p", check_overflow_monotone, 8),
    ("bits por peso", check_bits_per_weight, 9),
]


def run_checks(inject_fault: bool = False) -> list[CheckResult]:
    results = []
    for name, fn, seed in CHECKS:
        try:
            detail = fn(seed, inject_fault=inject_fault)
        except Exception as exc:
            detail = f"excepción: {exc!r}"
        results.append(CheckResult(name=name, ok=not detail, seed=seed, detail=detail))
    return results


def print_report(results: list[CheckResult]) -> None:
    print("=" * 50)
    print("  secagg-uplink — Check")
    print("=" * 50)
    for r in results:
        if r.ok:
            print(f"✅  {r.name}")
        else:
            print(f"❌  {r.name}: {r.detail} (seed={r.seed})")
    failed = sum(not r.ok for r in results)
    print("=" * 50)
    print("  Todo listo 🚀" if not failed else f"  {failed} comprobaciones fallidas")
    print("=" * 50)
