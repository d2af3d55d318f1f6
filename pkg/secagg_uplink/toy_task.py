"""
Tarea de juguete para el simulador: mezcla de gaussianas repartida entre
clientes con sesgo de etiquetas Dirichlet, modelos logístico y MLP en numpy,
y SGD local por mini-batches.
"""

import logging
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ConfigError
from .models import ClientShard
from .schemas import TaskConfig

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]

PROXY_CLIENT_ID = -1


class ToyTask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    shards: list[ClientShard]
    proxy: Optional[ClientShard]   # datos públicos del servidor (None si proxy_fraction=0)
    test_x: np.ndarray
    test_y: np.ndarray
    config: TaskConfig

    @property
    def n_train(self) -> int:
        return sum(s.sample_count for s in self.shards)


# ── Datos ─────────────────────────────────────────────────────────────────────

def _sample(rng: np.random.Generator, means: np.ndarray, n: int, noise: float):
    labels = rng.integers(0, means.shape[0], size=n)
    features = means[labels] + noise * rng.standard_normal((n, means.shape[1]))
    return features, labels


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def _partition(labels: np.ndarray, n_clients: int, alpha: Optional[float],
               rng: np.random.Generator) -> list[np.ndarray]:
    """Reparto por clase: proporciones Dirichlet(α) o a partes iguales si α es None."""
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if alpha is None:
            chunks = np.array_split(idx, n_clients)
        else:
            counts = _largest_remainder(rng.dirichlet(np.full(n_clients, alpha)), idx.size)
            chunks = np.split(idx, np.cumsum(counts)[:-1])
        order = rng.permutation(n_clients)
        for client, chunk in zip(order, chunks):
            parts[client].append(chunk)
    shards = [np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts]

    # ningún cliente vacío: el mayor cede muestras
    for i in range(n_clients):
        while shards[i].size == 0:
            donor = int(np.argmax([s.size for s in shards]))
            shards[i], shards[donor] = shards[donor][-1:], shards[donor][:-1]
    return shards


def make_toy_task(config: TaskConfig, seed: int) -> ToyTask:
    rng = np.random.default_rng(seed)
    means = config.class_sep * rng.standard_normal((config.n_classes, config.n_features))
    x, y = _sample(rng, means, config.n_samples, config.noise)
    test_x, test_y = _sample(rng, means, config.n_test, config.noise)

    order = rng.permutation(config.n_samples)
    n_proxy = int(round(config.proxy_fraction * config.n_samples))
    if config.n_samples - n_proxy < config.n_clients:
        raise ConfigError(f"{config.n_clients} clientes para {config.n_samples - n_proxy} muestras")
    proxy_idx, pool_idx = order[:n_proxy], np.sort(order[n_proxy:])
    pool_x, pool_y = x[pool_idx], y[pool_idx]

    shards = [
        ClientShard(client_id=i, features=pool_x[idx], labels=pool_y[idx])
        for i, idx in enumerate(_partition(pool_y, config.n_clients, config.label_skew, rng))
    ]
    proxy = (ClientShard(client_id=PROXY_CLIENT_ID, features=x[proxy_idx], labels=y[proxy_idx])
             if n_proxy else None)
    log.debug(f"🔄 tarea: {len(shards)} clientes, {pool_idx.size} muestras, proxy {n_proxy}")
    return ToyTask(shards=shards, proxy=proxy, test_x=test_x, test_y=test_y, config=config)


# ── Modelos ───────────────────────────────────────────────────────────────────

def init_params(config: TaskConfig, seed: int) -> Params:
    """Pesos iniciales. Las matrices tienen forma (C_in, C_out)."""
    rng = np.random.default_rng(seed)
    f, c = config.n_features, config.n_classes
    if config.model == "logistic":
        return {"W": np.zeros((f, c)), "b": np.zeros(c)}
    h = config.hidden
    return {
        "W1": rng.standard_normal((f, h)) / np.sqrt(f),
        "b1": np.zeros(h),
        "W2": rng.standard_normal((h, c)) / np.sqrt(h),
        "b2": np.zeros(c),
    }


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: Params, x: np.ndarray) -> np.ndarray:
    if "W" in params:
        return x @ params["W"] + params["b"]
    hidden = np.maximum(x @ params["W1"] + params["b1"], 0.0)
    return hidden @ params["W2"] + params["b2"]


def loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    """Entropía cruzada media y su gradiente."""
    n = x.shape[0]
    onehot = np.zeros((n, _n_classes(params)))
    onehot[np.arange(n), y] = 1.0

    if "W" in params:
        probs = _softmax(x @ params["W"] + params["b"])
        delta = (probs - onehot) / n
        loss = -np.log(probs[np.arange(n), y] + 1e-12).mean()
        return float(loss), {"W": x.T @ delta, "b": delta.sum(axis=0)}

    pre = x @ params["W1"] + params["b1"]
    hidden = np.maximum(pre, 0.0)
    probs = _softmax(hidden @ params["W2"] + params["b2"])
    delta = (probs - onehot) / n
    loss = -np.log(probs[np.arange(n), y] + 1e-12).mean()
    back = (delta @ params["W2"].T) * (pre > 0)
    return float(loss), {
        "W1": x.T @ back,
        "b1": back.sum(axis=0),
        "W2": hidden.T @ delta,
        "b2": delta.sum(axis=0),
    }


def _n_classes(params: Params) -> int:
    return int(params["b"].shape[0] if "b" in params else params["b2"].shape[0])


def evaluate(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(loss, accuracy)"""
    loss, _ = loss_and_grads(params, x, y)
    accuracy = float(np.mean(forward(params, x).argmax(axis=1) == y))
    return loss, accuracy


# ── Entrenamiento local ───────────────────────────────────────────────────────

def local_train(theta: Params, shard: ClientShard, epochs: int, lr: float,
                batch_size: int = 32, seed: Union[int, np.random.SeedSequence] = 0) -> Params:
    """g_i = θ_local − θ tras `epochs` pasadas de SGD por mini-batches."""
    rng = np.random.default_rng(seed)
    params = {name: value.copy() for name, value in theta.items()}
    n = shard.sample_count
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            _, grads = loss_and_grads(params, shard.features[batch], shard.labels[batch])
            for name in params:
                params[name] -= lr * grads[name]
    return {name: params[name] - theta[name] for name in theta}
