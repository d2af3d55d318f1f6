"""
Cliente HTTP del TEE remoto (ver tee_service.py). Misma interfaz que
protocol.TrustedExecutor, así que el simulador no distingue uno de otro.
"""

import logging
from typing import Mapping, Optional, Sequence, Union

import httpx
import numpy as np

from .config import TEE_TIMEOUT_SECONDS, TEE_URL
from .errors import ProtocolError
from .finite_group import unpack
from .models import (
    AssignmentHistogram,
    GroupVector,
    HistogramRequest,
    HistogramResponse,
    MaskSeed,
    MaskSumRequest,
    MaskSumResponse,
    SchemeTag,
)
from .protocol import TrustedExecutor

log = logging.getLogger(__name__)


class RemoteTEE:
    def __init__(self, base_url: str, timeout: float = TEE_TIMEOUT_SECONDS,
                 client: Optional[httpx.Client] = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._client = client   # inyectable (TestClient en los tests)

    def _post(self, path: str, body: dict) -> dict:
        if self._client is not None:
            response = self._client.post(f"{self.base_url}{path}", json=body)
        else:
            with httpx.Client(timeout=self.timeout) as client:
                response = client.post(f"{self.base_url}{path}", json=body)
        if response.status_code == 422:
            raise ProtocolError(f"TEE rechazó la petición: {response.json().get('detail')}")
        response.raise_for_status()
        return response.json()

    def is_running(self) -> bool:
        try:
            if self._client is not None:
                return self._client.get(f"{self.base_url}/health").status_code == 200
            with httpx.Client(timeout=5) as client:
                return client.get(f"{self.base_url}/health").status_code == 200
        except Exception:
            return False

    def secagg_mask_sum(self, round_id: int, seeds: Mapping[int, MaskSeed],
                        scheme_tag: SchemeTag, length: int, p: int) -> GroupVector:
        request = MaskSumRequest(round_id=round_id, seeds={c: s.hex() for c, s in seeds.items()},
                                 scheme_tag=scheme_tag, length=length, p=p)
        data = MaskSumResponse.model_validate(
            self._post("/secagg/mask-sum", request.model_dump(mode="json")))
        if data.length != length or data.p != p:
            raise ProtocolError(f"TEE devolvió {data.length}×{data.p} bits, esperado {length}×{p}")
        return unpack(bytes.fromhex(data.body), data.length, data.p)

    def secind_histograms(self, round_id: int, frames: Sequence[bytes],
                          seeds: Mapping[int, MaskSeed], k: int, blocks: int) -> AssignmentHistogram:
        request = HistogramRequest(round_id=round_id, frames=[f.hex() for f in frames],
                                   seeds={c: s.hex() for c, s in seeds.items()}, k=k, blocks=blocks)
        data = HistogramResponse.model_validate(
            self._post("/secind/histograms", request.model_dump(mode="json")))
        counts = np.asarray(data.counts, dtype=np.int64).reshape(blocks, k)
        return AssignmentHistogram(counts=counts, n_clients=data.n_clients)


TEE = Union[TrustedExecutor, RemoteTEE]


def get_tee(url: str = TEE_URL) -> TEE:
    """TEE remoto si hay URL configurada; si no, el rol en proceso."""
    if not url:
        return TrustedExecutor()
    remote = RemoteTEE(url)
    if remote.is_running():
        log.info(f"✅  TEE remoto activo en {url}")
    else:
        log.warning(f"⚠️  TEE remoto en {url} no responde a /health")
    return remote
