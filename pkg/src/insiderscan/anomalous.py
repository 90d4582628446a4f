"""Pattern matching of volume signals by normalized cross-correlation.

Every signal (the actual volume series and each predicted series) is cut
into windows expressed as percent change from the window's first day.
Each window is correlated with every anomalous pattern over all day lags;
a window whose best correlation reaches the threshold is reported as a hit
and mapped back to a day index of the full series.

Lag convention: the raw correlation at lag ``k`` is ``sum_n x[n+k] * y[n]``
(zero outside the signals), so a positive lag means the candidate ``x``
reproduces the pattern ``y`` ``k`` days later.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .timeseries import WINDOW_SIZE, Pattern, VolumeSeries, make_windows, pct_change

log = logging.getLogger(__name__)

ACTUAL = "actual"
WINDOW_BASED = "window_based"
DAY_BASED = "day_based"
WHOLE_HISTORY = "whole_history"
PREDICTION_METHODS = (WINDOW_BASED, DAY_BASED, WHOLE_HISTORY)
ALL_METHODS = PREDICTION_METHODS + (ACTUAL,)

DEFAULT_THRESHOLD = 0.80
STRICT_THRESHOLD = 0.94

REPORT_COLUMNS = ("Pattern", "%Companies", "Total hit", "Window", "Day", "History", "Actual")


class ScanError(Exception):
    pass


@dataclass(frozen=True)
class NccCurve:
    lags: np.ndarray
    values: np.ndarray

    def at(self, lag: int) -> float:
        return float(self.values[lag - self.lags[0]])


def ncc(x: Sequence[float], y: Sequence[float]) -> NccCurve:
    """Cross-correlation at every lag, scaled by one global energy factor.

    Both signals are zero-padded to the longer length ``N``; the curve covers
    lags ``-(N-1) .. N-1`` and every value is divided by
    ``sqrt(sum(x**2) * sum(y**2))``.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size == 0 or y.size == 0:
        raise ScanError("ncc needs two nonempty signals")
    n = max(x.size, y.size)
    if x.size < n:
        x = np.concatenate([x, np.zeros(n - x.size)])
    if y.size < n:
        y = np.concatenate([y, np.zeros(n - y.size)])
    energy = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if energy == 0:
        raise ScanError("ncc undefined for an all-zero signal")
    raw = np.correlate(x, y, mode="full")
    return NccCurve(np.arange(-(n - 1), n), raw / energy)


def best_lag(curve: NccCurve, tol: float = 1e-12) -> tuple[int, float]:
    """Lag of the maximum value; ties go to the smallest |lag|, then the negative lag."""
    peak = curve.values.max()
    candidates = curve.lags[curve.values >= peak - tol]
    lag = min(candidates.tolist(), key=lambda k: (abs(k), k))
    return int(lag), float(curve.values[lag - curve.lags[0]])


def lag_to_day(w: int, d: int, window_size: int = WINDOW_SIZE) -> int:
    """Day index in the full series of offset ``d`` inside predicted window ``w``.

    Window 0 is the first predicted window, which follows the seed window,
    hence the leading ``window_size``.
    """
    if w < 0:
        raise ScanError(f"window index must be >= 0, got {w}")
    if not 0 <= d < window_size:
        raise ScanError(f"day offset {d} outside [0, {window_size})")
    return window_size + w * window_size + d


@dataclass(frozen=True)
class Hit:
    company: str
    method: str
    window_index: int
    pattern_id: int
    lag: int
    day_offset: int
    value: float
    absolute_day: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "Hit":
        return cls(**obj)

    def sort_key(self):
        return (self.company, ALL_METHODS.index(self.method) if self.method in ALL_METHODS else 99,
                self.method, self.window_index, self.pattern_id)


@dataclass
class PatternRow:
    pattern_id: int
    pct_companies_hit: float
    hits_by_method: dict[str, int]
    actual_hits: int = 0

    @property
    def total_hits(self) -> int:
        return sum(self.hits_by_method.values())


@dataclass
class HitReport:
    rows: list[PatternRow]
    threshold: float
    window_size: int
    n_companies: int
    warnings: list[str] = field(default_factory=list)

    def row(self, pattern_id: int) -> PatternRow:
        for r in self.rows:
            if r.pattern_id == pattern_id:
                return r
        raise KeyError(pattern_id)


def signal_windows(levels: np.ndarray, window_size: int = WINDOW_SIZE,
                   stride: int | None = None, offset: int | None = None,
                   epsilon_base: bool = False) -> list[np.ndarray]:
    """Percent-change windows of a raw level signal, aligned with predicted windows.

    By default the first window starts at ``offset = window_size`` so that
    window ``w`` covers the same days as predicted window ``w``.
    """
    offset = window_size if offset is None else offset
    wins = make_windows(np.asarray(levels, dtype=float), window_size, stride, offset)
    return [pct_change(w.values, epsilon_base=epsilon_base).deltas for w in wins]


def actual_windows(series: VolumeSeries, window_size: int = WINDOW_SIZE,
                   stride: int | None = None, epsilon_base: bool = False) -> list[np.ndarray]:
    return signal_windows(series.volumes.astype(float), window_size, stride,
                          epsilon_base=epsilon_base)


def _scan_signal(company: str, method: str, windows: Sequence[np.ndarray],
                 patterns: Sequence[Pattern], threshold: float, window_size: int,
                 stride: int) -> list[Hit]:
    hits = []
    for w, win in enumerate(windows):
        win = np.asarray(win, dtype=float)
        if len(win) != window_size:
            raise ScanError(f"{company}/{method}: window {w} has {len(win)} days, expected {window_size}")
        if not np.any(win):
            continue
        for p in patterns:
            lag, value = best_lag(ncc(win, p.deltas))
            if value >= threshold:
                d = max(lag, 0)
                start = window_size + w * stride
                hits.append(Hit(company, method, w, p.id, lag, d, value, start + d))
    return hits


def scan(signals: Mapping[str, Mapping[str, Sequence[np.ndarray]]], patterns: Sequence[Pattern],
         threshold: float = DEFAULT_THRESHOLD, window_size: int = WINDOW_SIZE,
         methods: Iterable[str] = ALL_METHODS, stride: int | Mapping[str, int] | None = None,
         n_jobs: int = 1) -> tuple[HitReport, list[Hit]]:
    """Run the pattern scan over every (company, method, window, pattern).

    ``signals[company][method]`` is that signal's list of percent-change
    windows; window ``w`` starts at series day ``window_size + w * stride``.
    ``stride`` defaults to ``window_size`` and may be given per method.
    """
    if not patterns:
        raise ScanError("no patterns to scan for")
    if not 0 < threshold <= 1:
        raise ScanError(f"threshold must be in (0, 1], got {threshold}")
    for p in patterns:
        if len(p.deltas) != window_size:
            raise ScanError(f"pattern {p.id} has {len(p.deltas)} days, expected {window_size}")
        if not np.any(p.deltas):
            raise ScanError(f"pattern {p.id} is flat; correlation is undefined")
    if stride is None or isinstance(stride, int):
        strides = {m: stride or window_size for m in ALL_METHODS}
    else:
        strides = {m: stride.get(m, window_size) for m in ALL_METHODS}
    methods = list(methods)
    warnings = []
    jobs = []
    for company in sorted(signals):
        for m in methods:
            if m not in signals[company]:
                warnings.append(f"{company}: no {m} signal; skipped")
                continue
            jobs.append((company, m, signals[company][m], strides.get(m, window_size)))
    for w in warnings:
        log.warning(w)

    def run(job):
        company, m, windows, step = job
        return _scan_signal(company, m, windows, patterns, threshold, window_size, step)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    hits = sorted((h for part in parts for h in part), key=Hit.sort_key)
    report = aggregate(hits, patterns, len(signals), threshold, window_size)
    report.warnings = warnings
    return report, hits


def aggregate(hits: Iterable[Hit], patterns: Sequence[Pattern], n_companies: int,
              threshold: float, window_size: int) -> HitReport:
    hits = list(hits)
    rows = []
    for p in sorted(patterns, key=lambda p: p.id):
        mine = [h for h in hits if h.pattern_id == p.id]
        by_method = {m: sum(h.method == m for h in mine) for m in PREDICTION_METHODS}
        companies = {h.company for h in mine}
        pct = 100.0 * len(companies) / n_companies if n_companies else 0.0
        rows.append(PatternRow(p.id, pct, by_method, sum(h.method == ACTUAL for h in mine)))
    return HitReport(rows, threshold, window_size, n_companies)


def _report_rows(report: HitReport) -> list[list[str]]:
    return [[
        str(r.pattern_id),
        f"{r.pct_companies_hit:.2f}%",
        str(r.total_hits),
        str(r.hits_by_method[WINDOW_BASED]),
        str(r.hits_by_method[DAY_BASED]),
        str(r.hits_by_method[WHOLE_HISTORY]),
        str(r.actual_hits),
    ] for r in report.rows]


def summarize(report: HitReport) -> tuple[str, str]:
    """Render the per-pattern hit table as aligned text and as CSV."""
    rows = _report_rows(report)
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c)
              for i, c in enumerate(REPORT_COLUMNS)]
    lines = [
        f"threshold={report.threshold:g} window_size={report.window_size} companies={report.n_companies}",
        " | ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths)),
        "-+-".join("-" * w for w in widths),
    ]
    lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    return "\n".join(lines) + "\n", buf.getvalue()


def write_hits_jsonl(hits: Iterable[Hit], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in hits:
            fh.write(json.dumps(h.to_json()) + "\n")


def read_hits_jsonl(path: str | Path) -> list[Hit]:
    with open(path, encoding="utf-8") as fh:
        return [Hit.from_json(json.loads(line)) for line in fh if line.strip()]


def write_curve_csv(curve: NccCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "value"])
        for k, v in zip(curve.lags, curve.values):
            w.writerow([int(k), repr(float(v))])


def read_curve_csv(path: str | Path) -> NccCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return NccCurve(np.array([int(r["lag"]) for r in rows]),
                    np.array([float(r["value"]) for r in rows]))
