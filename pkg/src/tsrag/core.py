"""Value types, z-normalization and the M4 accuracy metrics (sMAPE, MASE, OWA)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DataError


class Frequency(str, Enum):
    YEARLY = "Yearly"
    QUARTERLY = "Quarterly"
    MONTHLY = "Monthly"
    WEEKLY = "Weekly"
    DAILY = "Daily"
    HOURLY = "Hourly"

    @classmethod
    def parse(cls, name: str | Frequency) -> Frequency:
        if isinstance(name, Frequency):
            return name
        for member in cls:
            if member.value.lower() == str(name).strip().lower():
                return member
        raise DataError(f"unknown frequency {name!r}; expected one of "
                        f"{', '.join(m.value for m in cls)}")


@dataclass(frozen=True)
class FrequencyConfig:
    frequency: Frequency
    input_length: int
    horizon: int
    seasonality: int

    def __post_init__(self):
        if self.input_length < 1 or self.horizon < 1 or self.seasonality < 1:
            raise ValueError("input_length, horizon and seasonality must be positive")


# Input/prediction lengths follow the M4 setup; seasonalities are the usual M4 periods.
FREQUENCY_CONFIGS: dict[Frequency, FrequencyConfig] = {
    Frequency.YEARLY: FrequencyConfig(Frequency.YEARLY, 12, 6, 1),
    Frequency.QUARTERLY: FrequencyConfig(Frequency.QUARTERLY, 16, 8, 4),
    Frequency.MONTHLY: FrequencyConfig(Frequency.MONTHLY, 36, 18, 12),
    Frequency.WEEKLY: FrequencyConfig(Frequency.WEEKLY, 26, 13, 1),
    Frequency.DAILY: FrequencyConfig(Frequency.DAILY, 28, 14, 1),
    Frequency.HOURLY: FrequencyConfig(Frequency.HOURLY, 96, 48, 24),
}


def frequency_config(frequency: str | Frequency) -> FrequencyConfig:
    return FREQUENCY_CONFIGS[Frequency.parse(frequency)]


@dataclass(frozen=True)
class Series:
    """A univariate series with an identifier and a sampling frequency."""

    id: str
    frequency: Frequency
    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise DataError(f"series {self.id!r} is empty")
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"series {self.id!r} contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frequency", Frequency.parse(self.frequency))

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class MetricTriple:
    smape: float
    mase: float
    owa: float

    def __post_init__(self):
        for name in ("smape", "mase", "owa"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _as_vector(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def _paired(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    a = _as_vector(actual, "actual")
    f = _as_vector(forecast, "forecast")
    if a.shape != f.shape:
        raise DataError(f"length mismatch: actual has {a.size} values, forecast {f.size}")
    return a, f


def smape(actual: Sequence[float], forecast: Sequence[float]) -> float:
    """Symmetric MAPE in percent, ``200/h * sum(|a-f| / (|a|+|f|))``.

    Terms whose denominator is zero (both values zero) contribute 0.
    """
    a, f = _paired(actual, forecast)
    denom = np.abs(a) + np.abs(f)
    num = np.abs(a - f)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(200.0 * terms.sum() / a.size)


def seasonal_naive_mae(insample: Sequence[float], seasonality: int) -> float:
    y = _as_vector(insample, "insample")
    if seasonality < 1:
        raise DataError("seasonality must be >= 1")
    if y.size <= seasonality:
        raise DataError(f"insample length {y.size} must exceed seasonality {seasonality}")
    return float(np.mean(np.abs(y[seasonality:] - y[:-seasonality])))


def mase(actual: Sequence[float], forecast: Sequence[float],
         insample: Sequence[float], seasonality: int) -> float:
    """Mean absolute scaled error against the in-sample seasonal-naive MAE."""
    a, f = _paired(actual, forecast)
    scale = seasonal_naive_mae(insample, seasonality)
    if scale == 0:
        raise DataError("degenerate in-sample: seasonal-naive MAE is zero")
    return float(np.mean(np.abs(a - f)) / scale)


def naive2_forecast(insample: Sequence[float], horizon: int, seasonality: int) -> list[float]:
    """Seasonal-naive forecast: repeat the last full season of the history.

    With ``seasonality == 1`` this is the last value repeated ``horizon`` times.
    """
    y = _as_vector(insample, "insample")
    if horizon < 1:
        raise DataError("horizon must be positive")
    if seasonality < 1 or y.size < seasonality:
        raise DataError(f"insample length {y.size} shorter than seasonality {seasonality}")
    base = y.size - seasonality
    return [float(y[base + (h % seasonality)]) for h in range(horizon)]


def owa(smape_model: float, mase_model: float,
        smape_baseline: float, mase_baseline: float) -> float:
    """Overall weighted average relative to a Naive2 baseline (1.0 = parity)."""
    if not (smape_baseline > 0 and mase_baseline > 0):
        raise DataError("degenerate baseline: Naive2 sMAPE and MASE must be positive")
    return 0.5 * (smape_model / smape_baseline + mase_model / mase_baseline)


def znormalize(values: Sequence[float]) -> tuple[np.ndarray, float, float]:
    """Return ``(normalized, mean, std)`` using the population standard deviation.

    A constant input maps to all zeros with ``std = 0``.
    """
    x = _as_vector(values, "values")
    mean = float(np.mean(x))
    if np.all(x == x[0]):
        return np.zeros_like(x), float(x[0]), 0.0
    std = float(np.std(x))
    if std == 0:  # spread underflowed
        return np.zeros_like(x), mean, 0.0
    return (x - mean) / std, mean, std


def denormalize(normalized: Sequence[float], mean: float, std: float) -> np.ndarray:
    x = np.asarray(normalized, dtype=np.float64)
    if std == 0:
        return np.full_like(x, mean)
    return x * std + mean
