"""
Product quantization de matrices de actualización.

Orden de bloques: recorrido por columnas, trozos consecutivos de d filas dentro
de cada columna. El bloque (m, n) (m-ésimo trozo de la columna n) tiene índice
plano n·(C_in/d) + m.
"""

import logging
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionError, ShapeError
from .finite_group import expand_mask
from .models import Assignments, Codebook, MaskSeed, PQConfig

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERS = 50
DEFAULT_TOLERANCE = 1e-6
_DISTANCE_CHUNK = 2048


# ── Bloques ───────────────────────────────────────────────────────────────────

def split_blocks(matrix, d: int) -> np.ndarray:
    W = np.asarray(matrix, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"PQ necesita una matriz, recibido forma {W.shape}")
    c_in, c_out = W.shape
    if d < 1 or c_in % d:
        raise ShapeError(f"d={d} no divide C_in={c_in}")
    return W.T.reshape(c_out * (c_in // d), d).copy()


def merge_blocks(blocks: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    c_in, c_out = shape
    B = np.asarray(blocks)
    if B.size != c_in * c_out:
        raise ShapeError(f"{B.size} valores para una matriz {c_in}×{c_out}")
    return B.reshape(c_out, c_in).T.copy()


def adapt_block_size(layer_input_dim: int, requested_d: int) -> int:
    """Mayor d' ≤ d que divide C_in."""
    for d in range(min(requested_d, layer_input_dim), 0, -1):
        if layer_input_dim % d == 0:
            return d
    return 1


# ── k-means ───────────────────────────────────────────────────────────────────

def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    out = np.empty((X.shape[0], C.shape[0]), dtype=np.float64)
    for start in range(0, X.shape[0], _DISTANCE_CHUNK):
        chunk = X[start:start + _DISTANCE_CHUNK]
        diff = chunk[:, None, :] - C[None, :, :]
        out[start:start + _DISTANCE_CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, float]:
    dist = _sq_distances(X, C)
    idx = dist.argmin(axis=1)   # argmin devuelve el primer mínimo: empate → índice menor
    return idx, float(dist[np.arange(X.shape[0]), idx].sum())


def _uniforms(seed: MaskSeed, count: int) -> np.ndarray:
    return expand_mask(seed, count, 32).values.astype(np.float64) / float(1 << 32)


def _kmeans_pp(X: np.ndarray, k: int, seed: MaskSeed) -> np.ndarray:
    n = X.shape[0]
    u = _uniforms(seed, k)
    centroids = [X[min(int(u[0] * n), n - 1)]]
    closest = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids.append(centroids[0])
            continue
        cumulative = np.cumsum(closest) / total
        pick = min(int(np.searchsorted(cumulative, u[j], side="right")), n - 1)
        centroids.append(X[pick])
        closest = np.minimum(closest, ((X - X[pick]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=np.float64)


def _reseed_empty(X: np.ndarray, C: np.ndarray, idx: np.ndarray) -> None:
    """Cada cluster vacío toma el punto más lejano del cluster más grande."""
    counts = np.bincount(idx, minlength=C.shape[0])
    for j in np.flatnonzero(counts == 0):
        largest = int(counts.argmax())
        if counts[largest] < 2:
            return
        members = np.flatnonzero(idx == largest)
        far = members[((X[members] - C[largest]) ** 2).sum(axis=1).argmax()]
        C[j] = X[far]
        idx[far] = j
        counts[largest] -= 1
        counts[j] = 1


def train_codebook(blocks, k: int, max_iters: int = DEFAULT_MAX_ITERS,
                   seed: Optional[MaskSeed] = None,
                   tolerance: float = DEFAULT_TOLERANCE) -> Codebook:
    """k-means (k-means++ con semilla) bajo distancia euclídea al cuadrado."""
    X = np.asarray(blocks, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError("train_codebook necesita al menos un bloque")
    if k < 1:
        raise ValueError(f"k={k} inválido")
    seed = seed or MaskSeed.from_int(0)

    degenerate = np.unique(X, axis=0).shape[0] < k
    if degenerate:
        log.debug(f"⚠️ k={k} mayor que bloques distintos: codebook degenerado")

    C = _kmeans_pp(X, k, seed)
    history: list[float] = []
    for _ in range(max(max_iters, 1)):
        idx, distortion = _nearest(X, C)
        history.append(distortion)
        if len(history) > 1:
            previous = history[-2]
            if distortion == 0.0 or (previous - distortion) <= tolerance * max(previous, 1e-300):
                break
        _reseed_empty(X, C, idx)
        sums = np.zeros_like(C)
        np.add.at(sums, idx, X)
        counts = np.bincount(idx, minlength=k)
        filled = counts > 0
        C[filled] = sums[filled] / counts[filled, None]

    codewords = C.astype(np.float32)
    _, final = _nearest(X, codewords.astype(np.float64))
    return Codebook(codewords=codewords, degenerate=bool(degenerate),
                    distortion=final, history=tuple(history))


# ── Asignación y reconstrucción ───────────────────────────────────────────────

def assign(blocks, codebook: Codebook, grid: Optional[tuple[int, int]] = None) -> Assignments:
    """Codeword más cercano por bloque. grid = (C_in/d, C_out); por defecto una columna."""
    X = np.asarray(blocks, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != codebook.d:
        raise DimensionError(f"bloques de dimensión {X.shape[-1]}, codewords de {codebook.d}")
    idx, _ = _nearest(X, codebook.codewords.astype(np.float64))
    grid = grid or (X.shape[0], 1)
    if grid[0] * grid[1] != X.shape[0]:
        raise ShapeError(f"grid {grid} no cubre {X.shape[0]} bloques")
    return Assignments.from_flat(idx, codebook.k, grid)


def encode_matrix(matrix, codebook: Codebook) -> Assignments:
    W = np.asarray(matrix, dtype=np.float64)
    blocks = split_blocks(W, codebook.d)
    return assign(blocks, codebook, (W.shape[0] // codebook.d, W.shape[1]))


def decompress(codebook: Codebook, a: Assignments) -> np.ndarray:
    """Ŵ = C[A], deshaciendo el orden de split_blocks."""
    flat = a.flat()
    if flat.size and flat.max() >= codebook.k:
        raise DimensionError(f"índice {int(flat.max())} fuera de un codebook con k={codebook.k}")
    rows, cols = a.indices.shape
    blocks = codebook.codewords.astype(np.float64)[flat]
    return merge_blocks(blocks, (rows * codebook.d, cols))


# ── Contabilidad ──────────────────────────────────────────────────────────────

def _matrix_shapes(layer_shapes: Iterable[tuple[int, ...]]) -> list[tuple[int, int]]:
    return [tuple(s) for s in layer_shapes if len(s) == 2]


def pq_uplink_bits(layer_shapes: Iterable[tuple[int, ...]], config: PQConfig) -> int:
    """Bloques · ⌈log2 k⌉ sobre las capas comprimidas (solo matrices)."""
    total = 0
    for c_in, c_out in _matrix_shapes(layer_shapes):
        d = adapt_block_size(c_in, config.d)
        total += (c_in // d) * c_out * config.bits_per_index
    return total


def codebook_downlink_bytes(layer_shapes: Iterable[tuple[int, ...]], config: PQConfig) -> int:
    return sum(config.k * adapt_block_size(c_in, config.d) * 4
               for c_in, _ in _matrix_shapes(layer_shapes))
