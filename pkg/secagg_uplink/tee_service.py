"""
TEE simulado como servicio HTTP
===============================
Endpoints:
  GET  /health              → Estado del servicio
  POST /secagg/mask-sum     → Suma de máscaras de una ronda (SecAgg)
  POST /secind/histograms   → Histogramas de asignaciones por bloque (SecInd)

Arranque:  python -m secagg_uplink.tee_service
Los bytes (semillas, frames, sumas empaquetadas) viajan en hex dentro del JSON,
con el mismo wire format que usa el simulador en proceso.
"""

import logging

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .config import LOG_LEVEL, TEE_HOST, TEE_PORT
from .errors import DimensionError, FramingError, ProtocolError
from .finite_group import pack
from .models import (
    ErrorResponse,
    HistogramRequest,
    HistogramResponse,
    MaskSeed,
    MaskSumRequest,
    MaskSumResponse,
)
from .protocol import TrustedExecutor

log = logging.getLogger(__name__)

_REJECTED = (ProtocolError, FramingError, DimensionError)


def _parse_seeds(raw: dict[int, str]) -> dict[int, MaskSeed]:
    try:
        return {int(c): MaskSeed.from_hex(s) for c, s in raw.items()}
    except ValueError as exc:
        raise ProtocolError(f"semilla inválida: {exc}") from exc


def _error(status_code: int, error: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status_code,
                        content=ErrorResponse(error=error, detail=detail).model_dump())


_ERROR_RESPONSES = {422: {"model": ErrorResponse}, 500: {"model": ErrorResponse}}


def create_app(tee: TrustedExecutor | None = None) -> FastAPI:
    executor = tee or TrustedExecutor()
    app = FastAPI(
        title="secagg-uplink — TEE",
        description="Rol TEE del protocolo: suma de máscaras SecAgg e histogramas SecInd.",
        version="1.0.0",
    )

    @app.exception_handler(RequestValidationError)
    async def invalid_request(request: Request, exc: RequestValidationError):
        return _error(422, "RequestValidationError", str(exc.errors()))

    @app.get("/health", tags=["Sistema"])
    def health():
        return {"status": "ok", "role": "tee"}

    @app.post("/secagg/mask-sum", response_model=MaskSumResponse,
              responses=_ERROR_RESPONSES, tags=["SecAgg"])
    def mask_sum(request: MaskSumRequest):
        """Devuelve Σ m_i empaquetado. Nunca ve las actualizaciones."""
        try:
            seeds = _parse_seeds(request.seeds)
            total = executor.secagg_mask_sum(request.round_id, seeds, request.scheme_tag,
                                             request.length, request.p)
            return MaskSumResponse(length=len(total), p=total.p, body=pack(total).hex())
        except _REJECTED as exc:
            log.warning(f"⚠️  Ronda {request.round_id} rechazada: {exc}")
            return _error(422, type(exc).__name__, str(exc))
        except Exception as exc:
            log.error(f"❌  Error en mask-sum: {exc}", exc_info=True)
            return _error(500, type(exc).__name__, str(exc))

    @app.post("/secind/histograms", response_model=HistogramResponse,
              responses=_ERROR_RESPONSES, tags=["SecInd"])
    def histograms(request: HistogramRequest):
        """Descifra las asignaciones de cada cliente y devuelve solo los conteos."""
        try:
            seeds = _parse_seeds(request.seeds)
            frames = [bytes.fromhex(f) for f in request.frames]
            hist = executor.secind_histograms(request.round_id, frames, seeds,
                                              request.k, request.blocks)
            return HistogramResponse(n_clients=hist.n_clients, counts=hist.counts.tolist())
        except _REJECTED as exc:
            log.warning(f"⚠️  Ronda {request.round_id} rechazada: {exc}")
            return _error(422, type(exc).__name__, str(exc))
        except ValueError as exc:
            return _error(422, type(exc).__name__, str(exc))
        except Exception as exc:
            log.error(f"❌  Error en histograms: {exc}", exc_info=True)
            return _error(500, type(exc).__name__, str(exc))

    return app


app = create_app()


if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s  %(levelname)-8s  %(message)s")
    uvicorn.run(app, host=TEE_HOST, port=TEE_PORT)
