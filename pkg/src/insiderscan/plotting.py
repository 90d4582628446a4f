"""SVG figures for analysts: actual vs predicted windows and lag-vs-NCC curves.

Every figure embeds the series it draws as JSON in the SVG ``dc:description``
metadata, so the numbers can be recovered without re-running the pipeline.
"""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .anomalous import NccCurve, best_lag  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "svg.hashsalt": "insiderscan",
    "svg.fonttype": "none",
}

_DC = "{http://purl.org/dc/elements/1.1/}"


def _save(fig, path: Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={
        "Date": None,
        "Title": payload.get("title", ""),
        "Description": json.dumps(payload, sort_keys=True),
    })
    plt.close(fig)
    return path


def plot_windows(series: Mapping[str, Sequence[float]], path: str | Path, title: str = "",
                 start_day: int = 0) -> Path:
    """Line chart of several same-span signals in percent-change form."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in series.items():
            values = np.asarray(values, dtype=float)
            ax.plot(np.arange(start_day, start_day + len(values)), values, label=name, linewidth=1.2)
        ax.set_xlabel("day")
        ax.set_ylabel("change from window start")
        ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        payload = {
            "kind": "windows",
            "title": title,
            "start_day": start_day,
            "series": {k: [float(v) for v in vals] for k, vals in series.items()},
        }
        return _save(fig, path, payload)


def plot_ncc(curve: NccCurve, path: str | Path, title: str = "") -> Path:
    """Lag-vs-correlation stem plot with the best lag marked."""
    lag, value = best_lag(curve)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(curve.lags, curve.values, linewidth=1.0, color="tab:blue")
        ax.axvline(lag, color="tab:red", linestyle="--", linewidth=0.8)
        ax.annotate(f"lag {lag}: {value:.3f}", (lag, value), textcoords="offset points",
                    xytext=(6, -12), fontsize=8)
        ax.set_xlabel("day lag")
        ax.set_ylabel("normalized cross-correlation")
        ax.set_ylim(-1.05, 1.05)
        ax.set_title(title)
        fig.tight_layout()
        payload = {
            "kind": "ncc",
            "title": title,
            "best_lag": lag,
            "best_value": value,
            "lags": [int(k) for k in curve.lags],
            "values": [float(v) for v in curve.values],
        }
        return _save(fig, path, payload)


def read_svg_payload(path: str | Path) -> dict:
    """Recover the JSON payload embedded by :func:`plot_windows` / :func:`plot_ncc`."""
    root = ET.parse(path).getroot()
    node = root.find(f".//{_DC}description")
    if node is None or not node.text:
        raise ValueError(f"{path}: no embedded series")
    return json.loads(node.text)
