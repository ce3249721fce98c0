"""M4-style data loading, synthetic corpora and the evaluation harness."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import (
    Frequency,
    FrequencyConfig,
    MetricTriple,
    Series,
    frequency_config,
    mase,
    naive2_forecast,
    owa,
    smape,
)
from .dtw import DEFAULT_TOP_K
from .errors import BackendError, DataError
from .forecasting import BackendConfig, Forecaster, ForecastTask
from .knowledge_base import KnowledgeBase

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1


@dataclass
class Corpus:
    frequency: Frequency
    train: list[Series]
    test: dict[str, tuple[float, ...]]
    missing_test: int = 0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in self.train:
            h.update(s.id.encode() + b"\0")
            h.update(np.asarray(s.values, dtype="<f8").tobytes())
            if s.id in self.test:
                h.update(b"\1" + np.asarray(self.test[s.id], dtype="<f8").tobytes())
            h.update(b"\2")
        return h.hexdigest()


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_m4_rows(path: str | Path) -> list[tuple[str, list[float]]]:
    """Rows of an M4 csv as ``(id, values)``; trailing empty cells are dropped.

    A first row whose value cells are all non-numeric (``"V1","V2",...``) is
    treated as a header.
    """
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for rowno, cells in enumerate(csv.reader(fh), start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if rowno == 1 and not any(_is_number(c) for c in cells[1:] if c.strip()):
                continue
            while cells and not cells[-1].strip():
                cells.pop()
            sid = cells[0].strip()
            values = []
            for col, cell in enumerate(cells[1:], start=2):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {rowno}, column {col}: "
                                    f"non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {rowno}, column {col}: non-finite value")
                values.append(v)
            if not values:
                raise DataError(f"{path}: row {rowno}: series {sid!r} is empty")
            rows.append((sid, values))
    return rows


def load_m4_csv(train_path: str | Path, test_path: str | Path | None,
                frequency: str | Frequency, horizon: int | None = None) -> Corpus:
    """Join M4 train/test files on series id.

    Train series without a test row stay in ``train`` (usable for the KB) but
    are not evaluated; they are counted in ``missing_test``.
    """
    freq = Frequency.parse(frequency)
    horizon = horizon or frequency_config(freq).horizon
    train, seen = [], set()
    for sid, values in read_m4_rows(train_path):
        if sid in seen:
            raise DataError(f"{train_path}: duplicate series id {sid!r}")
        seen.add(sid)
        train.append(Series(sid, freq, tuple(values)))
    test: dict[str, tuple[float, ...]] = {}
    if test_path is not None:
        for sid, values in read_m4_rows(test_path):
            if sid not in seen:
                raise DataError(f"{test_path}: test series {sid!r} is absent from {train_path}")
            if len(values) != horizon:
                raise DataError(f"{test_path}: series {sid!r} has {len(values)} test values, "
                                f"horizon is {horizon}")
            test[sid] = tuple(values)
    missing = sum(1 for s in train if s.id not in test)
    if test_path is not None and missing:
        log.warning("%d train series have no test values and will not be evaluated", missing)
    return Corpus(frequency=freq, train=train, test=test, missing_test=missing)


def write_m4_csv(path: str | Path, rows: Sequence[tuple[str, Sequence[float]]]) -> None:
    width = max(len(v) for _, v in rows)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"V{i}" for i in range(1, width + 2)])
        for sid, values in rows:
            cells = [repr(float(v)) for v in values]
            w.writerow([sid] + cells + [""] * (width - len(cells)))


def generate_synthetic_corpus(n_series: int = 200, length: int = 192, seed: int = 1,
                              noise_std: float = 0.05, period: float = 24.0,
                              amplitude: float = 1.0,
                              frequency: str | Frequency = Frequency.HOURLY,
                              phase: float | None = None) -> Corpus:
    """Noisy sinusoids with per-series phase and level; the last ``horizon``
    points of each series form the test set.

    Passing ``phase`` pins every series to that phase (levels still vary).
    """
    freq = Frequency.parse(frequency)
    cfg = frequency_config(freq)
    if n_series < 1:
        raise DataError("n_series must be positive")
    if length <= cfg.input_length + cfg.horizon:
        raise DataError(f"length must exceed input_length + horizon "
                        f"({cfg.input_length + cfg.horizon})")
    if noise_std < 0 or period <= 0 or amplitude <= 0:
        raise DataError("noise_std must be >= 0, period and amplitude > 0")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, period, size=n_series)
    if phase is not None:
        phases[:] = phase
    levels = rng.uniform(5.0, 15.0, size=n_series)
    t = np.arange(length, dtype=np.float64)
    train, test = [], {}
    for i in range(n_series):
        y = amplitude * np.sin(2 * np.pi * (t + phases[i]) / period) + levels[i]
        y = y + rng.normal(0.0, noise_std, size=length) if noise_std > 0 else y
        sid = f"S{i + 1}"
        train.append(Series(sid, freq, tuple(y[:-cfg.horizon].tolist())))
        test[sid] = tuple(y[-cfg.horizon:].tolist())
    return Corpus(frequency=freq, train=train, test=test)


@dataclass
class EvaluationReport:
    per_series: list[dict[str, Any]]
    aggregate: MetricTriple | None
    baseline_aggregate: MetricTriple | None
    config_echo: dict[str, Any]
    failures: int = 0
    generated_at: str | None = None

    @property
    def flagged(self) -> bool:
        return self.failures > 0


def aggregate_rows(rows: Sequence[dict[str, Any]]) -> tuple[MetricTriple | None, MetricTriple | None]:
    """Simple means of per-series sMAPE/MASE; OWA from the aggregate ratios."""
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return None, None
    s = float(np.mean([r["smape"] for r in ok]))
    m = float(np.mean([r["mase"] for r in ok]))
    s2 = float(np.mean([r["naive2_smape"] for r in ok]))
    m2 = float(np.mean([r["naive2_mase"] for r in ok]))
    return MetricTriple(s, m, owa(s, m, s2, m2)), MetricTriple(s2, m2, 1.0)


def _evaluate_one(forecaster: Forecaster, series: Series, actual: Sequence[float],
                  config: FrequencyConfig, k: int) -> dict[str, Any]:
    row: dict[str, Any] = {"id": series.id}
    try:
        task = ForecastTask(series, config, k)
        fc = forecaster.forecast(task)
        baseline = naive2_forecast(series.values, config.horizon, config.seasonality)
        row.update(
            status="ok",
            smape=smape(actual, fc.values),
            mase=mase(actual, fc.values, series.values, config.seasonality),
            naive2_smape=smape(actual, baseline),
            naive2_mase=mase(actual, baseline, series.values, config.seasonality),
            forecast=list(fc.values),
        )
        if fc.prompt_fingerprint:
            row["prompt_fingerprint"] = fc.prompt_fingerprint
        if fc.references:
            row["references"] = [kb_id for kb_id, _ in fc.references]
    except (BackendError, DataError) as exc:
        log.warning("series %s failed: %s", series.id, exc)
        row.update(status="failed", error=str(exc))
    return row


def evaluate(corpus: Corpus, kb: KnowledgeBase | None, backend: BackendConfig | Forecaster,
             config: FrequencyConfig | None = None, limit: int | None = None,
             k: int = DEFAULT_TOP_K, workers: int = 1, band: int | None = None,
             reproducible: bool = False, config_extra: dict[str, Any] | None = None
             ) -> EvaluationReport:
    """Forecast every test series (the first ``limit`` in file order) and score it.

    Failed series are reported and excluded from the aggregates.
    """
    config = config or frequency_config(corpus.frequency)
    if kb is not None and kb.frequency != corpus.frequency:
        raise DataError(f"knowledge base frequency {kb.frequency.value} does not match corpus "
                        f"frequency {corpus.frequency.value}")
    if limit is not None and limit < 0:
        raise DataError("limit must be non-negative")
    forecaster = backend if isinstance(backend, Forecaster) else Forecaster(backend, kb, band=band)
    targets = [s for s in corpus.train if s.id in corpus.test]
    if limit is not None:
        targets = targets[:limit]
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(
                    lambda s: _evaluate_one(forecaster, s, corpus.test[s.id], config, k), targets))
        else:
            rows = [_evaluate_one(forecaster, s, corpus.test[s.id], config, k) for s in targets]
    finally:
        if forecaster is not backend:
            forecaster.close()

    agg, base = aggregate_rows(rows)
    bcfg = forecaster.backend
    echo = {
        "frequency": config.frequency.value,
        "input_length": config.input_length,
        "horizon": config.horizon,
        "seasonality": config.seasonality,
        "backend": bcfg.kind.value,
        "endpoint": bcfg.endpoint,
        "model": bcfg.model_name,
        "top_k": k,
        "band": band,
        "limit": limit,
        "corpus_fingerprint": corpus.fingerprint(),
        "kb_corpus_fingerprint": kb.build_meta.corpus_fingerprint if kb is not None else None,
        "kb_entries": len(kb) if kb is not None else None,
    }
    echo.update(config_extra or {})
    failures = sum(1 for r in rows if r["status"] != "ok")
    stamp = None if reproducible else datetime.now(timezone.utc).isoformat(timespec="seconds")
    return EvaluationReport(per_series=rows, aggregate=agg, baseline_aggregate=base,
                            config_echo=echo, failures=failures, generated_at=stamp)


def _triple(t: MetricTriple | None):
    return None if t is None else {"smape": t.smape, "mase": t.mase, "owa": t.owa}


def dump_report(report: EvaluationReport) -> str:
    header = {
        "format_version": REPORT_FORMAT_VERSION,
        "kind": "evaluation_report",
        "config": report.config_echo,
        "evaluated": len(report.per_series),
        "failures": report.failures,
        "flagged": report.flagged,
        "aggregate": _triple(report.aggregate),
        "baseline_aggregate": _triple(report.baseline_aggregate),
        "generated_at": report.generated_at,
    }
    lines = [json.dumps(header, separators=(",", ":"), allow_nan=False)]
    lines += [json.dumps(r, separators=(",", ":"), allow_nan=False) for r in report.per_series]
    return "\n".join(lines) + "\n"


def save_report(report: EvaluationReport, path: str | Path) -> None:
    Path(path).write_text(dump_report(report), encoding="utf-8")


def load_report(path: str | Path) -> EvaluationReport:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: empty report")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed report ({exc})") from None
    if header.get("format_version") != REPORT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported report version {header.get('format_version')}")

    def triple(d):
        return None if d is None else MetricTriple(d["smape"], d["mase"], d["owa"])

    return EvaluationReport(per_series=rows, aggregate=triple(header["aggregate"]),
                            baseline_aggregate=triple(header["baseline_aggregate"]),
                            config_echo=header["config"], failures=header["failures"],
                            generated_at=header.get("generated_at"))


def format_table(report: EvaluationReport) -> str:
    cfg = report.config_echo
    lines = [f"{cfg['frequency']}  backend={cfg['backend']}  top_k={cfg['top_k']}  "
             f"series={len(report.per_series)}  failures={report.failures}",
             f"{'model':<20}{'SMAPE':>10}{'MASE':>10}{'OWA':>10}"]
    for name, t in ((cfg["backend"], report.aggregate), ("naive2", report.baseline_aggregate)):
        if t is None:
            lines.append(f"{name:<20}{'-':>10}{'-':>10}{'-':>10}")
        else:
            lines.append(f"{name:<20}{t.smape:>10.3f}{t.mase:>10.3f}{t.owa:>10.3f}")
    if report.flagged:
        lines.append(f"WARNING: {report.failures} series failed and are excluded from the aggregate")
    return "\n".join(lines)
