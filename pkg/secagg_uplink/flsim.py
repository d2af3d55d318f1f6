"""
Simulador FedAvg con compresión compatible con SecAgg.

Una ronda:
  1. El servidor difunde un RoundPlan (θ, codecs por tensor, p, semillas).
  2. Cada cliente entrena, comprime según el plan y cifra un payload por tag.
  3. El TEE devuelve la suma de máscaras (SecAgg) o los histogramas (SecInd).
  4. El servidor descomprime el agregado con el operador lineal de cada codec,
     divide por Σω (o por N) y aplica θ ← θ + η·Δ.

Los segmentos de un mismo tag se concatenan en el orden de los tensores de θ.
"""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .codec_pq import (
    adapt_block_size,
    codebook_downlink_bytes,
    encode_matrix,
    split_blocks,
    train_codebook,
)
from .codec_prune import compact, expand
from .codec_scalar import (
    calibrate_minmax,
    decode_fixed,
    default_frac_bits,
    dequantize_aggregate,
    encode_fixed,
    min_safe_bitwidth,
    quantize,
)
from .errors import ConfigError, ProtocolError
from .finite_group import concat, scale_mod, to_signed, widen
from .models import (
    AssignmentHistogram,
    Assignments,
    ClientShard,
    GroupVector,
    MaskSeed,
    PlainCodec,
    PQCodec,
    PQConfig,
    PruneCodec,
    PruneSpec,
    RefreshPolicy,
    RoundMetrics,
    RoundPlan,
    SchemeTag,
    SQCodec,
    TensorCodec,
)
from .protocol import (
    HEADER_SIZE,
    PlaintextOracle,
    TrustedExecutor,
    client_encrypt_assignments,
    decode_frame,
    encode_frame,
    server_aggregate_secagg,
    server_reconstruct_secind,
    weighted_client_encrypt,
)
from .schemas import ExperimentConfig, SchemeConfig, TrainConfig
from .toy_task import Params, ToyTask, evaluate, init_params, local_train, make_toy_task

log = logging.getLogger(__name__)

# Espacios de semillas derivados de la semilla raíz
_MASK_NS, _PRUNE_NS, _KMEANS_NS = 1, 2, 3

BASELINE_BITS = 32
CSV_COLUMNS = ["scheme", "params", "uplink_kb", "compression_factor",
               "overflow_pct", "accuracy_mean", "accuracy_std"]


def tensor_tag(codec: TensorCodec) -> SchemeTag:
    if isinstance(codec, SQCodec):
        return SchemeTag.SQ
    if isinstance(codec, PruneCodec):
        return SchemeTag.PRUNE
    if isinstance(codec, PQCodec):
        return SchemeTag.PQ_ASSIGN
    return SchemeTag.PLAIN


def _segment_length(codec: TensorCodec, tensor: np.ndarray) -> int:
    if isinstance(codec, PruneCodec):
        return codec.spec.kept_count
    if isinstance(codec, PQCodec):
        return tensor.size // codec.block_size
    return int(tensor.size)


def tag_bits(plan: RoundPlan, tag: SchemeTag) -> int:
    if tag == SchemeTag.PLAIN:
        return plan.plain_p
    if tag == SchemeTag.PQ_ASSIGN:
        k = next(c.codebook.k for c in plan.codecs.values() if isinstance(c, PQCodec))
        return max((k - 1).bit_length(), 1)
    return plan.p


def frac_bits_for(plan: RoundPlan, tag: SchemeTag) -> int:
    if tag == SchemeTag.PLAIN:
        return plan.frac_bits
    return min(plan.frac_bits, default_frac_bits(plan.p))


def layout(plan: RoundPlan) -> dict[SchemeTag, list[tuple[str, int, int]]]:
    """Por tag: (tensor, offset, longitud) en el orden de θ."""
    out: dict[SchemeTag, list[tuple[str, int, int]]] = {}
    for name, tensor in plan.theta.items():
        codec = plan.codecs[name]
        tag = tensor_tag(codec)
        entries = out.setdefault(tag, [])
        offset = entries[-1][1] + entries[-1][2] if entries else 0
        entries.append((name, offset, _segment_length(codec, tensor)))
    return out


# ── Cliente ───────────────────────────────────────────────────────────────────

class ClientMessage(BaseModel):
    """Lo que produce un cliente. `plain_*` solo lo lee el oráculo del simulador."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    client_id: int
    weight: int
    frames: dict[SchemeTag, bytes]
    plain_segments: dict[SchemeTag, GroupVector]   # lo que va dentro de la máscara
    plain_signed: dict[SchemeTag, np.ndarray]      # enteros con signo ya ponderados (PLAIN, PRUNE)
    plain_assignments: dict[str, Assignments]
    delta: Params


def encode_client(plan: RoundPlan, client_id: int, delta: Params, sample_count: int) -> ClientMessage:
    weight = sample_count if plan.weighted else 1
    segments: dict[SchemeTag, list[GroupVector]] = {}
    assignments: dict[str, Assignments] = {}

    for name, tensor in plan.theta.items():
        codec = plan.codecs[name]
        g = delta[name]
        tag = tensor_tag(codec)
        if isinstance(codec, SQCodec):
            segments.setdefault(tag, []).append(widen(quantize(g, codec.qparams), plan.p))
        elif isinstance(codec, PruneCodec):
            segments.setdefault(tag, []).append(
                encode_fixed(compact(g, codec.spec), plan.p, frac_bits_for(plan, tag)))
        elif isinstance(codec, PQCodec):
            assignments[name] = encode_matrix(g, codec.codebook)
        else:
            segments.setdefault(tag, []).append(
                encode_fixed(g, plan.plain_p, frac_bits_for(plan, tag)))

    seed = plan.seeds[client_id]
    frames: dict[SchemeTag, bytes] = {}
    plain_segments: dict[SchemeTag, GroupVector] = {}
    plain_signed: dict[SchemeTag, np.ndarray] = {}
    for tag, parts in segments.items():
        vector = concat(parts, tag_bits(plan, tag))
        payload = weighted_client_encrypt(vector, weight, seed.child(int(tag)),
                                          plan.round_id, client_id, tag)
        frames[tag] = encode_frame(payload)
        plain_segments[tag] = vector if tag == SchemeTag.SQ else scale_mod(vector, weight)
        if tag != SchemeTag.SQ:
            plain_signed[tag] = to_signed(vector) * weight

    if assignments:
        k = next(iter(assignments.values())).k
        flat = np.concatenate([a.flat() for a in assignments.values()])
        stacked = Assignments.from_flat(flat, k, (flat.size, 1))
        payload = client_encrypt_assignments(stacked, seed.child(int(SchemeTag.PQ_ASSIGN)),
                                             plan.round_id, client_id)
        frames[SchemeTag.PQ_ASSIGN] = encode_frame(payload)

    return ClientMessage(client_id=client_id, weight=weight, frames=frames,
                         plain_segments=plain_segments, plain_signed=plain_signed,
                         plain_assignments=assignments, delta=delta)


# ── Servidor ──────────────────────────────────────────────────────────────────

class RoundAggregate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    average: Params                               # Δ media ya descomprimida
    group_sums: dict[SchemeTag, GroupVector]      # agregados seguros en el grupo
    histograms: Optional[AssignmentHistogram]


def aggregate_round(plan: RoundPlan, messages: Sequence[ClientMessage], tee) -> RoundAggregate:
    n = len(messages)
    ids = [m.client_id for m in messages]
    if sorted(ids) != sorted(plan.clients):
        raise ProtocolError(f"ronda {plan.round_id}: mensajes de {sorted(ids)}, plan {sorted(plan.clients)}")
    total_weight = sum(m.weight for m in messages)
    seeds = {c: plan.seeds[c] for c in plan.clients}
    average: Params = {}
    group_sums: dict[SchemeTag, GroupVector] = {}
    histograms = None

    for tag, entries in layout(plan).items():
        length = entries[-1][1] + entries[-1][2]
        bits = tag_bits(plan, tag)

        if tag == SchemeTag.PQ_ASSIGN:
            k = next(c.codebook.k for c in plan.codecs.values() if isinstance(c, PQCodec))
            histograms = tee.secind_histograms(plan.round_id, [m.frames[tag] for m in messages],
                                               seeds, k, length)
            for name, offset, count in entries:
                codec = plan.codecs[name]
                part = AssignmentHistogram(counts=histograms.counts[offset:offset + count], n_clients=n)
                average[name] = server_reconstruct_secind(part, codec.codebook,
                                                          plan.theta[name].shape) / n
            continue

        mask_sum = tee.secagg_mask_sum(plan.round_id, seeds, tag, length, bits)
        payloads = [decode_frame(m.frames[tag], length) for m in messages]
        total = server_aggregate_secagg(payloads, mask_sum, plan.clients)
        group_sums[tag] = total
        denom = total_weight if plan.weighted else n

        for name, offset, count in entries:
            codec = plan.codecs[name]
            part = GroupVector.trusted(total.values[offset:offset + count], bits)
            shape = plan.theta[name].shape
            if isinstance(codec, SQCodec):
                average[name] = (dequantize_aggregate(part, codec.qparams, n, plan.lift) / n).reshape(shape)
            elif isinstance(codec, PruneCodec):
                average[name] = expand(decode_fixed(part, frac_bits_for(plan, tag)), codec.spec) / denom
            else:
                average[name] = decode_fixed(part, frac_bits_for(plan, tag)).reshape(shape) / denom

    return RoundAggregate(average=average, group_sums=group_sums, histograms=histograms)


# ── Oráculo de la ronda ───────────────────────────────────────────────────────

def _plaintext_average(plan: RoundPlan, messages: Sequence[ClientMessage]) -> Params:
    """Media FedAvg sin comprimir con las mismas reglas de ponderación."""
    n = len(messages)
    total_weight = sum(m.weight for m in messages)
    out: Params = {}
    for name, codec in plan.codecs.items():
        if isinstance(codec, (SQCodec, PQCodec)):
            out[name] = sum(m.delta[name] for m in messages) / n
        else:
            denom = total_weight if plan.weighted else n
            out[name] = sum(m.weight * m.delta[name] for m in messages) / denom
    return out


def _overflow_fraction(plan: RoundPlan, messages: Sequence[ClientMessage]) -> float:
    overflowed, positions = 0.0, 0
    for tag, entries in layout(plan).items():
        if tag == SchemeTag.PQ_ASSIGN:
            continue
        bits = tag_bits(plan, tag)
        for name, offset, count in entries:
            if tag == SchemeTag.SQ:
                qp = plan.codecs[name].qparams
                center = 1 << (qp.bits - 1) if plan.lift == "centered" else None
                parts = [GroupVector.trusted(m.plain_segments[tag].values[offset:offset + count], bits)
                         for m in messages]
                fraction = PlaintextOracle.detect_overflows(parts, bits, center)
            else:
                signed = sum(m.plain_signed[tag][offset:offset + count] for m in messages)
                fraction = PlaintextOracle.detect_signed_overflows(signed, bits)
            overflowed += fraction * count
            positions += count
    return overflowed / positions if positions else 0.0


def _secure_matches_plaintext(plan: RoundPlan, messages: Sequence[ClientMessage],
                              aggregate: RoundAggregate) -> bool:
    for tag, secure in aggregate.group_sums.items():
        if PlaintextOracle.plaintext_sum([m.plain_segments[tag] for m in messages], secure.p) != secure:
            return False
    if aggregate.histograms is not None:
        flat = [np.concatenate([a.flat() for a in m.plain_assignments.values()]) for m in messages]
        expected = np.zeros_like(aggregate.histograms.counts)
        rows = np.arange(expected.shape[0])
        for f in flat:
            np.add.at(expected, (rows, f), 1)
        if not np.array_equal(expected, aggregate.histograms.counts):
            return False
    return True


def _relative_error(secure: Params, reference: Params) -> float:
    diff = math.sqrt(sum(float(np.sum((secure[n] - reference[n]) ** 2)) for n in reference))
    norm = math.sqrt(sum(float(np.sum(reference[n] ** 2)) for n in reference))
    return diff / norm if norm > 0 else diff


# ── Ronda ─────────────────────────────────────────────────────────────────────

def run_round(plan: RoundPlan, shards: Mapping[int, ClientShard], server_lr: float,
              train: TrainConfig, tee=None, evaluation: Optional[tuple[np.ndarray, np.ndarray]] = None,
              train_seed: int = 0, threads: int = 1) -> tuple[Params, RoundMetrics]:
    tee = tee or TrustedExecutor()

    def work(client_id: int) -> ClientMessage:
        shard = shards[client_id]
        delta = local_train(plan.theta, shard, train.local_epochs, train.client_lr,
                            train.batch_size, seed=_client_seed(train_seed, plan.round_id, client_id))
        return encode_client(plan, client_id, delta, shard.sample_count)

    clients = sorted(plan.clients)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            messages = list(pool.map(work, clients))
    else:
        messages = [work(c) for c in clients]

    aggregate = aggregate_round(plan, messages, tee)
    new_theta = {name: plan.theta[name] + server_lr * aggregate.average[name] for name in plan.theta}

    loss, accuracy = evaluate(new_theta, *evaluation) if evaluation else (float("nan"), float("nan"))
    uplink = np.mean([sum(len(f) - HEADER_SIZE for f in m.frames.values()) for m in messages])
    metrics = RoundMetrics(
        round_id=plan.round_id,
        accuracy=accuracy,
        loss=loss,
        uplink_bytes=float(uplink),
        overflow_fraction=_overflow_fraction(plan, messages),
        compression_error=_relative_error(aggregate.average, _plaintext_average(plan, messages)),
        secure_matches_plaintext=_secure_matches_plaintext(plan, messages, aggregate),
    )
    log.debug(f"🔄 ronda {plan.round_id}: acc={accuracy:.4f} uplink={uplink:.0f} B "
              f"overflow={metrics.overflow_fraction:.4%}")
    return new_theta, metrics


def _client_seed(train_seed: int, round_id: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([train_seed, round_id, client_id])


# ── Refresco de codecs ────────────────────────────────────────────────────────

def _compresses(scheme: SchemeConfig, tensor: np.ndarray) -> bool:
    if scheme.kind == "none":
        return False
    if scheme.kind == "pq":
        return tensor.ndim == 2
    return tensor.ndim == 2 or scheme.compress_vectors


def refresh_codecs(policy: RefreshPolicy, scheme: SchemeConfig, round_id: int, theta: Params,
                   aggregate_update: Optional[Params], proxy_update: Optional[Params],
                   previous: Optional[dict[str, TensorCodec]], root_seed: MaskSeed) -> dict[str, TensorCodec]:
    """
    Parámetros de los codecs para esta ronda. Fuera de las rondas de refresco
    (round_id mod R ≠ 0) se devuelven los anteriores. SQ recalibra MinMax, PQ
    reentrena codebooks y la poda saca una semilla nueva.
    """
    if previous is not None and not policy.is_refresh_round(round_id):
        return previous

    if policy.source == "aggregate_update" and aggregate_update is not None:
        source = aggregate_update
    elif policy.source == "public_proxy" or round_id == 0:
        source = proxy_update
    else:
        source = None

    if scheme.kind in ("sq", "pq") and source is None:
        if previous is not None:
            log.debug(f"⚠️ ronda {round_id}: sin fuente de calibración, se mantienen los codecs")
            return previous
        raise ConfigError(f"el esquema {scheme.kind} necesita un proxy público para la ronda 0")

    codecs: dict[str, TensorCodec] = {}
    for index, (name, tensor) in enumerate(theta.items()):
        if not _compresses(scheme, tensor):
            codecs[name] = PlainCodec()
        elif scheme.kind == "sq":
            codecs[name] = SQCodec(qparams=calibrate_minmax(source[name], scheme.b, scheme.scheme))
        elif scheme.kind == "prune":
            seed = root_seed.child(_PRUNE_NS).child(round_id).child(index)
            codecs[name] = PruneCodec(spec=PruneSpec(mask_seed=seed, sparsity=scheme.sparsity,
                                                     shape=tensor.shape))
        else:
            d = adapt_block_size(tensor.shape[0], scheme.d)
            codebook = train_codebook(split_blocks(source[name], d), scheme.k, scheme.kmeans_iters,
                                      seed=root_seed.child(_KMEANS_NS).child(round_id).child(index))
            if codebook.degenerate:
                log.debug(f"⚠️ ronda {round_id}: codebook degenerado en '{name}'")
            codecs[name] = PQCodec(config=PQConfig(k=scheme.k, d=scheme.d), block_size=d,
                                   codebook=codebook)
    return codecs


def proxy_update(theta: Params, task: ToyTask, train: TrainConfig, seed: int,
                 round_id: int) -> Optional[Params]:
    """Emula la actualización de un cliente típico sobre datos públicos del servidor."""
    if task.proxy is None:
        return None
    rng = np.random.default_rng([seed, round_id, 0xBEEF])
    size = min(int(np.median([s.sample_count for s in task.shards])), task.proxy.sample_count)
    pick = np.sort(rng.choice(task.proxy.sample_count, size=max(size, 1), replace=False))
    shard = ClientShard(client_id=task.proxy.client_id, features=task.proxy.features[pick],
                        labels=task.proxy.labels[pick])
    return local_train(theta, shard, train.local_epochs, train.client_lr, train.batch_size,
                       seed=_client_seed(seed, round_id, 0xFFFF))


# ── Experimentos ──────────────────────────────────────────────────────────────

def secagg_bits(scheme: SchemeConfig, clients_per_round: int, plain_bits: int) -> int:
    if scheme.kind == "sq":
        if scheme.p is not None:
            return scheme.p
        if scheme.margin is not None:
            return scheme.b + scheme.margin
        return min_safe_bitwidth(scheme.b, clients_per_round)
    if scheme.kind == "prune":
        return scheme.p or 32
    return plain_bits


class RunTrace(BaseModel):
    scheme: str
    params: str
    seed: int
    rounds: list[RoundMetrics]

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].accuracy


class MetricsRow(BaseModel):
    scheme: str
    params: str
    uplink_kb: float
    compression_factor: float
    overflow_pct: float
    accuracy_mean: float
    accuracy_std: float


class ExperimentResult(BaseModel):
    rows: list[MetricsRow]
    traces: list[RunTrace]


def train_once(config: ExperimentConfig, scheme: SchemeConfig, seed: int, tee=None,
               threads: int = 1) -> RunTrace:
    """Un entrenamiento completo (todas las rondas) de un esquema con una semilla."""
    task = make_toy_task(config.task, seed)
    shards = {s.client_id: s for s in task.shards}
    theta = init_params(config.task, seed)
    root = MaskSeed.from_int(seed)
    policy = RefreshPolicy(period=scheme.refresh_period, source=scheme.refresh_source)
    p = secagg_bits(scheme, config.train.clients_per_round, config.plain_bits)

    codecs, last_average = None, None
    rounds: list[RoundMetrics] = []
    for round_id in range(config.train.rounds):
        needs_proxy = (scheme.kind in ("sq", "pq") and policy.is_refresh_round(round_id)
                       and (policy.source == "public_proxy" or last_average is None))
        proxy = proxy_update(theta, task, config.train, seed, round_id) if needs_proxy else None
        codecs = refresh_codecs(policy, scheme, round_id, theta, last_average, proxy, codecs, root)

        rng = np.random.default_rng([seed, round_id, 0x5E1])
        clients = sorted(int(c) for c in rng.choice(config.task.n_clients,
                                                    config.train.clients_per_round, replace=False))
        mask_root = root.child(_MASK_NS).child(round_id)
        plan = RoundPlan(round_id=round_id, theta=theta, codecs=codecs, p=p,
                         plain_p=config.plain_bits, frac_bits=config.frac_bits, clients=clients,
                         seeds={c: mask_root.child(c) for c in clients},
                         weighted=config.weighted, lift=scheme.lift)
        new_theta, metrics = run_round(plan, shards, config.train.server_lr, config.train, tee,
                                       (task.test_x, task.test_y), seed, threads)
        last_average = {n: (new_theta[n] - theta[n]) / config.train.server_lr for n in theta}
        theta = new_theta
        rounds.append(metrics)

    trace = RunTrace(scheme=scheme.kind, params=scheme.label(), seed=seed, rounds=rounds)
    log.info(f"✅  {scheme.kind} [{scheme.label()}] seed={seed}: acc={trace.final_accuracy:.4f}")
    return trace


def _schemes(config: ExperimentConfig) -> list[SchemeConfig]:
    schemes = [concrete for s in config.schemes for concrete in s.expand()]
    if config.include_baseline and not any(s.kind == "none" for s in schemes):
        schemes.insert(0, SchemeConfig(kind="none"))
    return schemes


def n_params(config: ExperimentConfig) -> int:
    return sum(t.size for t in init_params(config.task, 0).values())


def run_experiment(config: ExperimentConfig, threads: int = 1, tee=None) -> ExperimentResult:
    """Barre las configuraciones, n_seeds entrenamientos por cada una."""
    schemes = _schemes(config)
    jobs = [(scheme, config.seed + s) for scheme in schemes for s in range(config.n_seeds)]
    log.info(f"🔄 {config.name}: {len(schemes)} configuraciones × {config.n_seeds} semillas")

    def job(args) -> RunTrace:
        scheme, seed = args
        return train_once(config, scheme, seed, tee)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(job, jobs))
    else:
        traces = [job(j) for j in jobs]

    baseline_bytes = n_params(config) * BASELINE_BITS / 8
    rows = []
    for i, scheme in enumerate(schemes):
        runs = traces[i * config.n_seeds:(i + 1) * config.n_seeds]
        uplink = float(np.mean([r.uplink_bytes for t in runs for r in t.rounds]))
        accuracies = np.array([t.final_accuracy for t in runs])
        rows.append(MetricsRow(
            scheme=scheme.kind,
            params=scheme.label(),
            uplink_kb=uplink / 1024,
            compression_factor=baseline_bytes / uplink,
            overflow_pct=100 * float(np.mean([r.overflow_fraction for t in runs for r in t.rounds])),
            accuracy_mean=float(accuracies.mean()),
            accuracy_std=float(accuracies.std(ddof=1)) if accuracies.size > 1 else 0.0,
        ))
    return ExperimentResult(rows=rows, traces=traces)


# ── Salidas ───────────────────────────────────────────────────────────────────

def write_metrics_csv(rows: Sequence[MetricsRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            values = row.model_dump()
            for key in ("uplink_kb", "compression_factor", "overflow_pct",
                        "accuracy_mean", "accuracy_std"):
                values[key] = f"{values[key]:.6f}"
            writer.writerow(values)


def write_trace_json(config: ExperimentConfig, traces: Sequence[RunTrace], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": config.model_dump(mode="json"),
           "runs": [t.model_dump(mode="json") for t in traces]}
    path.write_text(json.dumps(doc, indent=2, allow_nan=True), encoding="utf-8")


def codebook_overhead_rows(config: ExperimentConfig) -> list[dict]:
    """Coste de difundir los codebooks, por capa y total, frente al tamaño fp32 del modelo."""
    params = init_params(config.task, 0)
    model_bytes = sum(t.size for t in params.values()) * 4
    rows = []
    for scheme in _schemes(config):
        if scheme.kind != "pq":
            continue
        pq = PQConfig(k=scheme.k, d=scheme.d)
        total = 0
        for name, tensor in params.items():
            if tensor.ndim != 2:
                continue
            size = codebook_downlink_bytes([tensor.shape], pq)
            total += size
            rows.append({"params": scheme.label(), "layer": name, "bytes": size,
                         "pct_model": f"{100 * size / model_bytes:.4f}"})
        rows.append({"params": scheme.label(), "layer": "total", "bytes": total,
                     "pct_model": f"{100 * total / model_bytes:.4f}"})
    return rows
