"""
Configuración del simulador por variables de entorno.
Se lee un fichero .env si existe (python-dotenv) y después el entorno real.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# ── Logging ───────────────────────────────────────────────────────────────────

LOG_LEVEL = os.getenv("SECAGG_LOG_LEVEL", "INFO")

# ── Simulación ────────────────────────────────────────────────────────────────

# Hilos para simular clientes en paralelo (y para barridos de configuraciones)
THREADS = int(os.getenv("SECAGG_THREADS", "1"))
OUT_DIR = os.getenv("SECAGG_OUT_DIR", "results")

# Parámetros uncompressed (biases, normas, baseline): punto fijo con signo
PLAIN_BITS = int(os.getenv("SECAGG_PLAIN_BITS", "32"))
FIXED_FRAC_BITS = int(os.getenv("SECAGG_FIXED_FRAC_BITS", "16"))

# ── TEE ───────────────────────────────────────────────────────────────────────

# Vacío → TEE en proceso. Ejemplo: SECAGG_TEE_URL=http://localhost:8001
TEE_URL = os.getenv("SECAGG_TEE_URL", "")
TEE_TIMEOUT_SECONDS = float(os.getenv("SECAGG_TEE_TIMEOUT", "30"))
TEE_HOST = os.getenv("SECAGG_TEE_HOST", "0.0.0.0")
TEE_PORT = int(os.getenv("SECAGG_TEE_PORT", "8001"))
