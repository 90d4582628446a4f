"""Daily transaction-volume series, percent-change windows and pattern
extraction around insider-learning dates."""
from __future__ import annotations

import bisect
import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

WINDOW_SIZE = 50


class SeriesError(Exception):
    pass


@dataclass
class VolumeSeries:
    ticker: str
    dates: list[dt.date]
    volumes: np.ndarray
    warnings: list[str] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.int64)
        if len(self.dates) != len(self.volumes):
            raise SeriesError("dates and volumes differ in length")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise SeriesError(f"{self.ticker}: dates must be strictly increasing")
        if (self.volumes < 0).any():
            raise SeriesError(f"{self.ticker}: negative volume")

    def __len__(self) -> int:
        return len(self.volumes)

    def __eq__(self, other):
        if not isinstance(other, VolumeSeries):
            return NotImplemented
        return (self.ticker == other.ticker and self.dates == other.dates
                and np.array_equal(self.volumes, other.volumes))


@dataclass(frozen=True)
class Window:
    ticker: str
    start_index: int
    values: np.ndarray

    @property
    def size(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class NormalizedWindow:
    base: float
    deltas: np.ndarray

    @property
    def size(self) -> int:
        return len(self.deltas)

    def levels(self) -> np.ndarray:
        return self.base * (1.0 + self.deltas)

    def __eq__(self, other):
        if not isinstance(other, NormalizedWindow):
            return NotImplemented
        return self.base == other.base and np.array_equal(self.deltas, other.deltas)


@dataclass(frozen=True)
class Pattern:
    id: int
    source_case: str
    ticker: str
    learn_date: dt.date
    window: NormalizedWindow

    @property
    def deltas(self) -> np.ndarray:
        return self.window.deltas

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source_case": self.source_case,
            "ticker": self.ticker,
            "learn_date": self.learn_date.isoformat(),
            "base": float(self.window.base),
            "deltas": [float(x) for x in self.window.deltas],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pattern":
        return cls(
            id=int(obj["id"]),
            source_case=obj.get("source_case", ""),
            ticker=obj["ticker"],
            learn_date=dt.date.fromisoformat(obj["learn_date"]),
            window=NormalizedWindow(float(obj["base"]), np.asarray(obj["deltas"], dtype=float)),
        )


def _parse_volume(text: str) -> int:
    v = float(text.replace(",", ""))
    if not np.isfinite(v) or v < 0:
        raise ValueError(f"bad volume {text!r}")
    return int(round(v))


def load_volume_csv(path: str | Path, ticker: str | None = None,
                    start: dt.date | None = None, end: dt.date | None = None) -> VolumeSeries:
    """Read a Yahoo-style OHLCV download; only ``Date`` and ``Volume`` are used.

    Rows outside ``[start, end]`` are dropped. Unparsable rows are skipped
    and recorded in ``VolumeSeries.warnings``; a duplicated date is fatal.
    """
    path = Path(path)
    ticker = ticker or path.stem
    rows: dict[dt.date, int] = {}
    warnings = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        if "Date" not in cols or "Volume" not in cols:
            raise SeriesError(f"{path}: header must contain Date and Volume columns, got {cols}")
        reader.fieldnames = cols
        for lineno, row in enumerate(reader, start=2):
            try:
                day = dt.date.fromisoformat(row["Date"].strip()[:10])
                vol = _parse_volume(row["Volume"].strip())
            except (ValueError, AttributeError) as exc:
                warnings.append(f"{path.name}:{lineno}: skipped ({exc})")
                continue
            if day in rows:
                raise SeriesError(f"{path}:{lineno}: duplicate date {day}")
            if (start and day < start) or (end and day > end):
                continue
            rows[day] = vol
    for w in warnings:
        log.warning(w)
    dates = sorted(rows)
    return VolumeSeries(ticker, dates, np.array([rows[d] for d in dates], dtype=np.int64), warnings)


def write_volume_csv(series: VolumeSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Date", "Volume"])
        for d, v in zip(series.dates, series.volumes):
            w.writerow([d.isoformat(), int(v)])


def load_volume_dir(volume_dir: str | Path) -> dict[str, VolumeSeries]:
    return {p.stem: load_volume_csv(p) for p in sorted(Path(volume_dir).glob("*.csv"))}


def pct_change(window: Window | np.ndarray | Iterable[float], epsilon_base: bool = False
               ) -> NormalizedWindow:
    """Fractional change of every day relative to the first day of the window.

    >>> pct_change([100, 120, 115]).deltas.tolist()
    [0.0, 0.2, 0.15]
    """
    values = np.asarray(window.values if isinstance(window, Window) else window, dtype=float)
    if values.size == 0:
        raise SeriesError("empty window")
    base = values[0]
    if base == 0:
        if not epsilon_base:
            raise SeriesError("base volume is zero; percent change undefined (see epsilon_base)")
        base = 1.0
    # (v - v0) / b keeps exact decimal ratios exact, unlike v / b - 1
    deltas = (values - values[0]) / base
    return NormalizedWindow(float(base), deltas)


def make_windows(series: VolumeSeries | np.ndarray, size: int = WINDOW_SIZE,
                 stride: int | None = None, offset: int = 0) -> list[Window]:
    """Tile ``series`` into windows of ``size`` days starting at ``offset``.

    The trailing partial window is dropped; ``stride`` defaults to ``size``.
    """
    if size < 2:
        raise SeriesError("window size must be >= 2")
    stride = size if stride is None else stride
    if stride < 1:
        raise SeriesError("stride must be >= 1")
    if isinstance(series, VolumeSeries):
        ticker, values = series.ticker, series.volumes
    else:
        ticker, values = "", np.asarray(series)
    return [Window(ticker, s, values[s:s + size])
            for s in range(offset, len(values) - size + 1, stride)]


def locate_day(series: VolumeSeries, day: dt.date) -> int:
    """Index of ``day``, or of the next trading day when ``day`` is not traded."""
    i = bisect.bisect_left(series.dates, day)
    if i >= len(series.dates):
        raise SeriesError(f"{series.ticker}: {day} is after the last trading day {series.dates[-1]}")
    return i


def extract_pattern(series: VolumeSeries, event, size: int = WINDOW_SIZE, pattern_id: int = 1,
                    epsilon_base: bool = False) -> Pattern:
    """Cut a ``size``-day window with the learn date at index ``size // 2``."""
    center = locate_day(series, event.learn_date)
    before = size // 2
    after = size - before - 1
    start = center - before
    if start < 0:
        raise SeriesError(
            f"{series.ticker}: need {before} trading days before {event.learn_date}, "
            f"have {center} (deficit {-start})")
    if center + after >= len(series):
        have = len(series) - 1 - center
        raise SeriesError(
            f"{series.ticker}: need {after} trading days after {event.learn_date}, "
            f"have {have} (deficit {after - have})")
    nw = pct_change(series.volumes[start:start + size], epsilon_base=epsilon_base)
    return Pattern(pattern_id, event.case_id, series.ticker, series.dates[center], nw)


def save_patterns(patterns: Iterable[Pattern], path: str | Path) -> None:
    payload = {"patterns": [p.to_json() for p in patterns]}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_patterns(path: str | Path) -> list[Pattern]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return [Pattern.from_json(p) for p in obj["patterns"]]
