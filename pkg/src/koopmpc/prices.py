"""Hourly electricity price series: CSV persistence, forecast windows, and
a statistics-preserving synthetic generator.

The generator builds a fresh series with a day-night pattern plus
autocorrelated noise and then rescales it so that sample mean and variance
match the reference series exactly. That satisfies "preserve mean and
variance" without copying any stretch of the reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

CSV_HEADER = "timestamp,price_eur_mwh"


@dataclass
class PriceSeries:
    prices: np.ndarray                      # hourly, currency/MWh
    start: datetime = field(
        default_factory=lambda: datetime(2024, 1, 1, 0, 0))

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float).reshape(-1)
        if self.prices.size == 0:
            raise ValueError("price series must be nonempty")
        if not np.all(np.isfinite(self.prices)):
            raise ValueError("price series contains non-finite entries")

    @property
    def n_hours(self) -> int:
        return self.prices.shape[0]

    def forecast(self, hour: int, window: int = 9) -> np.ndarray:
        """Prices for hours [hour, hour+window); never reads past the end."""
        if hour < 0 or hour + window > self.n_hours:
            raise IndexError(
                f"forecast window [{hour}, {hour + window}) exceeds series "
                f"of {self.n_hours} hours")
        return self.prices[hour:hour + window].copy()

    def mean(self) -> float:
        return float(self.prices.mean())

    def var(self) -> float:
        return float(self.prices.var())


def expand_to_steps(hourly: np.ndarray, steps_per_hour: int,
                    n_steps: int) -> np.ndarray:
    """Repeat each hourly price for the control steps inside that hour."""
    expanded = np.repeat(np.asarray(hourly, dtype=float), steps_per_hour)
    if n_steps > expanded.shape[0]:
        raise ValueError("forecast too short for the requested horizon")
    return expanded[:n_steps]


def save_prices(path, series: PriceSeries) -> None:
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for i, p in enumerate(series.prices):
            ts = series.start + timedelta(hours=i)
            f.write(f"{ts.isoformat()},{p:.10g}\n")


def load_prices(path) -> PriceSeries:
    prices = []
    start = None
    prev_ts = None
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ValueError(
                f"{path}:1: expected header {CSV_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, "
                                 f"got {len(parts)}")
            try:
                ts = datetime.fromisoformat(parts[0])
                price = float(parts[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if prev_ts is not None and ts - prev_ts != timedelta(hours=1):
                raise ValueError(
                    f"{path}:{lineno}: timestamps must advance hourly "
                    f"(got {ts} after {prev_ts})")
            if start is None:
                start = ts
            prev_ts = ts
            prices.append(price)
    if not prices:
        raise ValueError(f"{path}: no price rows")
    return PriceSeries(np.array(prices), start)


def _shaped_noise(n_hours: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean-ish raw profile: daily cycle plus AR(1) noise."""
    hours = np.arange(n_hours)
    phase = rng.uniform(0, 2 * np.pi)
    daily = -np.cos(2 * np.pi * (hours % 24 - 4) / 24.0 + 0.15 * phase)
    ar = np.empty(n_hours)
    ar[0] = rng.standard_normal()
    eps = rng.standard_normal(n_hours)
    for t in range(1, n_hours):
        ar[t] = 0.8 * ar[t - 1] + 0.6 * eps[t]
    return daily + 0.5 * ar


def gen_prices(reference: PriceSeries, n_hours: int,
               seed: int, start: datetime | None = None) -> PriceSeries:
    """Fresh series whose sample mean and variance equal the reference's."""
    if n_hours < 1:
        raise ValueError("n_hours must be >= 1")
    rng = np.random.default_rng(seed)
    target_mean = reference.mean()
    target_std = float(np.sqrt(reference.var()))
    if start is None:
        start = reference.start
    if n_hours == 1 or target_std == 0.0:
        return PriceSeries(np.full(n_hours, target_mean), start)
    raw = _shaped_noise(n_hours, rng)
    raw = (raw - raw.mean()) / raw.std()
    return PriceSeries(target_mean + target_std * raw, start)


def synthetic_reference(n_hours: int = 24 * 28, seed: int = 0,
                        mean: float = 50.0, std: float = 12.0,
                        start: datetime | None = None) -> PriceSeries:
    """A reference profile for running without an external price file."""
    if start is None:
        start = datetime(2024, 1, 1, 0, 0)
    if n_hours == 1 or std == 0.0:
        return PriceSeries(np.full(n_hours, mean), start)
    rng = np.random.default_rng(seed)
    raw = _shaped_noise(n_hours, rng)
    raw = (raw - raw.mean()) / raw.std()
    return PriceSeries(mean + std * raw, start)
