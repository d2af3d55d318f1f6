"""
Poda aleatoria con máscara compartida. La semilla de la ronda fija qué índices
se conservan, así que solo viajan los valores (nunca coordenadas).
"""

from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .finite_group import expand_mask
from .models import MaskSeed, PruneSpec


@lru_cache(maxsize=256)
def _keep_indices(seed: bytes, n: int, kept: int) -> np.ndarray:
    if kept == n:
        indices = np.arange(n, dtype=np.int64)
    else:
        # Fisher–Yates parcial; palabras de 64 bits → sesgo de módulo < n / 2^64
        words = expand_mask(MaskSeed(seed=seed), 2 * kept, 32).values
        draws = ((words[1::2] << np.uint64(32)) | words[0::2]).tolist()
        perm = list(range(n))
        for i in range(kept):
            j = i + draws[i] % (n - i)
            perm[i], perm[j] = perm[j], perm[i]
        indices = np.sort(np.asarray(perm[:kept], dtype=np.int64))
    indices.flags.writeable = False
    return indices


def derive_keep_indices(spec: PruneSpec) -> np.ndarray:
    """Índices conservados, ordenados, deterministas dada la semilla."""
    return _keep_indices(spec.mask_seed.seed, spec.size, spec.kept_count)


def _flat(tensor, spec: PruneSpec) -> np.ndarray:
    x = np.asarray(tensor, dtype=np.float64)
    if x.shape != spec.shape and x.shape != (spec.size,):
        raise ShapeError(f"tensor con forma {x.shape}, la máscara espera {spec.shape}")
    return x.ravel()


def compact(tensor, spec: PruneSpec) -> np.ndarray:
    return _flat(tensor, spec)[derive_keep_indices(spec)]


def expand(compacted, spec: PruneSpec) -> np.ndarray:
    """El operador lineal P: scatter de los valores conservados sobre ceros."""
    values = np.asarray(compacted, dtype=np.float64).ravel()
    if values.shape[0] != spec.kept_count:
        raise ShapeError(f"{values.shape[0]} valores, la máscara conserva {spec.kept_count}")
    out = np.zeros(spec.size, dtype=np.float64)
    out[derive_keep_indices(spec)] = values
    return out.reshape(spec.shape)


def pruned_uplink_bits(spec: PruneSpec, p: int) -> int:
    return spec.kept_count * p
