"""
Línea de comandos: python -m secagg_uplink {run,bench,check,report}

  run     → ejecuta un experimento (metrics.csv + trace.json)
  bench   → micro-bench de codecs (bench.csv)
  check   → invariantes del protocolo con semillas fijas
  report  → coste de difundir los codebooks PQ (codebooks.csv)

Códigos de salida: 0 éxito, 1 invariante violada, 2 configuración inválida.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .bench import BENCH_COLUMNS, run_bench
from .check import print_report, run_checks
from .config import LOG_LEVEL, OUT_DIR, THREADS
from .errors import CapacityError, ConfigError
from .flsim import codebook_overhead_rows, run_experiment, write_metrics_csv, write_trace_json
from .schemas import BenchConfig, ExperimentConfig, load_config
from .tee_bridge import get_tee

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secagg_uplink",
                                     description="Compresión de uplink compatible con Secure Aggregation")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument("--config", type=Path, required=config_required)
        p.add_argument("--out", type=Path, default=Path(OUT_DIR))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=THREADS)

    common(sub.add_parser("run", help="ejecuta un experimento"), True)
    common(sub.add_parser("bench", help="micro-bench de codecs"), False)
    check = sub.add_parser("check", help="invariantes del protocolo")
    check.add_argument("--inject-fault", action="store_true",
                       help="voltea un bit enmascarado antes de agregar")
    common(sub.add_parser("report", help="coste de los codebooks"), True)
    return parser


def cmd_run(args) -> int:
    config = load_config(args.config, ExperimentConfig)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    result = run_experiment(config, threads=max(args.threads, 1), tee=get_tee())
    write_metrics_csv(result.rows, args.out / "metrics.csv")
    write_trace_json(config, result.traces, args.out / "trace.json")
    log.info(f"✅  {len(result.rows)} filas en {args.out / 'metrics.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args.config, BenchConfig) if args.config else BenchConfig()
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    rows = run_bench(config)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(row.model_dump() for row in rows)
    print(f"{'codec':<7}{'params':<26}{'bits/peso':>10}{'enc ms':>10}{'dec ms':>10}")
    for row in rows:
        print(f"{row.codec:<7}{row.params:<26}{row.bits_per_weight:>10.4f}"
              f"{row.encode_ms:>10.2f}{row.decode_ms:>10.2f}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_checks(inject_fault=args.inject_fault)
    print_report(results)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILED


def cmd_report(args) -> int:
    config = load_config(args.config, ExperimentConfig)
    rows = codebook_overhead_rows(config)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "codebooks.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["params", "layer", "bytes", "pct_model"])
        writer.writeheader()
        writer.writerows(rows)
    log.info(f"✅  {len(rows)} filas en {args.out / 'codebooks.csv'}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "check": cmd_check, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s  %(levelname)-8s  %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, CapacityError, ValidationError) as exc:
        log.error(f"❌  {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
