"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .core import Frequency, Series, frequency_config
from .dtw import DEFAULT_TOP_K, retrieve_top_k
from .errors import BackendError, DataError
from .evaluation import (
    evaluate,
    format_table,
    generate_synthetic_corpus,
    load_m4_csv,
    read_m4_rows,
    save_report,
    write_m4_csv,
)
from .forecasting import BackendConfig, Forecaster, ForecastTask
from .knowledge_base import KBConfig, build_kb, load_kb, save_kb

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("tsrag")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_query(text: str) -> list[float]:
    path = Path(text)
    if path.exists():
        rows = read_m4_rows(path)
        if not rows:
            raise DataError(f"{path}: no series found")
        return rows[0][1]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise DataError(f"query {text!r} is neither a file nor a comma-separated list") from None


def _backend_config(args) -> BackendConfig:
    opts = {}
    if getattr(args, "backend_config", None):
        try:
            opts.update(json.loads(Path(args.backend_config).read_text()))
        except (OSError, ValueError) as exc:
            raise DataError(f"{args.backend_config}: {exc}") from None
        unknown = set(opts) - ({f.name for f in fields(BackendConfig)} - {"kind"})
        if unknown:
            raise DataError(f"{args.backend_config}: unknown keys {sorted(unknown)}")
    for key, attr in (("endpoint", "endpoint"), ("model_name", "model"), ("timeout", "timeout"),
                      ("max_retries", "max_retries"), ("max_in_flight", "max_in_flight")):
        value = getattr(args, attr, None)
        if value is not None:
            opts[key] = value
    opts["audit"] = bool(getattr(args, "audit", False))
    return BackendConfig(kind=args.backend, **opts)


def cmd_build_kb(args) -> int:
    freq = Frequency.parse(args.freq)
    corpus = load_m4_csv(args.train, None, freq)
    cfg = KBConfig.for_frequency(frequency_config(freq), window_length=args.window,
                                 step=args.step, horizon=args.horizon, k=args.k,
                                 seed=args.seed, max_iter=args.max_iter, init=args.init)
    kb = build_kb(corpus.train, cfg)
    save_kb(kb, args.out)
    print(f"wrote {len(kb)} segments ({kb.frequency.value}, L={kb.window_length}, "
          f"S={kb.step}, H={kb.horizon}, k={kb.build_meta.k}, "
          f"iterations={kb.build_meta.iterations_run}) to {args.out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    kb = load_kb(args.kb)
    query = _parse_query(args.query)[-kb.window_length:]
    results = retrieve_top_k(query, kb, args.top_k, band=args.band)
    if args.json:
        print(json.dumps([{"rank": r.rank, "kb_id": r.kb_id, "similarity": r.similarity,
                           "path_length": r.path_length,
                           "source": kb.get(r.kb_id).source_series_id,
                           "offset": kb.get(r.kb_id).start_offset} for r in results], indent=2))
    else:
        print(f"{'rank':>4} {'kb_id':>6} {'similarity':>12} {'M':>4}  source@offset")
        for r in results:
            seg = kb.get(r.kb_id)
            print(f"{r.rank:>4} {r.kb_id:>6} {r.similarity:>12.6g} {r.path_length:>4}  "
                  f"{seg.source_series_id}@{seg.start_offset}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    kb = load_kb(args.kb) if args.kb else None
    freq = Frequency.parse(args.freq) if args.freq else (kb.frequency if kb else None)
    if freq is None:
        raise DataError("--freq is required when no --kb is given")
    series = Series("query", freq, tuple(_parse_query(args.query)))
    task = ForecastTask(series, frequency_config(freq), args.top_k)
    with Forecaster(_backend_config(args), kb, band=args.band) as forecaster:
        if args.show_prompt:
            print(forecaster.prompt(task).text)
        fc = forecaster.forecast(task)
    print(", ".join(repr(v) for v in fc.values))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    freq = Frequency.parse(args.freq)
    corpus = load_m4_csv(args.train, args.test, freq)
    kb = load_kb(args.kb) if args.kb else None
    report = evaluate(corpus, kb, _backend_config(args), frequency_config(freq),
                      limit=args.limit, k=args.top_k, workers=args.workers, band=args.band,
                      reproducible=args.reproducible,
                      config_extra={"train": Path(args.train).name, "test": Path(args.test).name,
                                    "kb": Path(args.kb).name if args.kb else None})
    save_report(report, args.out)
    print(format_table(report))
    if report.aggregate is None and report.per_series:
        return EXIT_BACKEND
    return EXIT_OK


def cmd_synth(args) -> int:
    corpus = generate_synthetic_corpus(args.n, args.length, args.seed, args.noise,
                                       period=args.period, frequency=args.freq)
    write_m4_csv(args.out_train, [(s.id, s.values) for s in corpus.train])
    write_m4_csv(args.out_test, [(s.id, corpus.test[s.id]) for s in corpus.train])
    print(f"wrote {len(corpus.train)} series to {args.out_train} and {args.out_test}")
    return EXIT_OK


def _add_backend_args(p: argparse.ArgumentParser):
    p.add_argument("--backend", required=True,
                   choices=["http", "mock", "retrieval-average", "naive", "seasonal-naive"])
    p.add_argument("--endpoint", help="chat-completion URL for the http backend")
    p.add_argument("--model", help="model name for the http backend")
    p.add_argument("--backend-config", help="JSON file with endpoint/model_name/timeout/... keys")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--max-in-flight", type=int)
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K,
                   help="retrieval depth; 0 gives the no-retrieval ablation")
    p.add_argument("--band", type=int, help="Sakoe-Chiba half-width for DTW")
    p.add_argument("--audit", action="store_true", help="log request/response bodies")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsrag", description="Retrieval-augmented time series forecasting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-kb", help="build a knowledge base from an M4 train csv")
    p.add_argument("--train", required=True)
    p.add_argument("--freq", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--init", choices=["random", "kmeans++"], default="random")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_kb)

    p = sub.add_parser("retrieve", help="top-K DTW neighbours of a query")
    p.add_argument("--kb", required=True)
    p.add_argument("--query", required=True, help="csv file (first row used) or comma list")
    p.add_argument("--top-k", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--band", type=int)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("forecast", help="forecast one query series")
    p.add_argument("--kb")
    p.add_argument("--query", required=True)
    p.add_argument("--freq")
    p.add_argument("--show-prompt", action="store_true")
    _add_backend_args(p)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score a backend on M4 train/test files")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--freq", required=True)
    p.add_argument("--kb")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--reproducible", action="store_true", help="omit the report timestamp")
    p.add_argument("--out", required=True)
    _add_backend_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a seeded sinusoid corpus as M4 csv files")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--length", type=int, default=192)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--period", type=float, default=24.0)
    p.add_argument("--freq", default="Hourly")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _setup_logging(audit: bool):
    level = os.environ.get("TSRAG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if audit:
        logging.getLogger("tsrag.audit").setLevel(logging.INFO)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "audit", False))
    try:
        return args.func(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
