"""Synthetic corpora, volume histories and patterns shared by the tests."""
from __future__ import annotations

import datetime as dt
import functools
from pathlib import Path

import numpy as np

from insiderscan.timeseries import NormalizedWindow, Pattern, VolumeSeries, write_volume_csv

WS = 50
INJECT_DAY = 160
BASE_VOLUME = 1_000_000
N_DAYS = 400


def trading_days(n: int, start: dt.date = dt.date(2015, 1, 5)) -> list[dt.date]:
    days, d = [], start
    while len(days) < n:
        if d.weekday() < 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


def bump_pattern(ws: int = WS) -> np.ndarray:
    """Percent-change shape: flat, a sharp volume surge past mid-window, then decay."""
    k = np.arange(ws, dtype=float)
    shape = 3.0 * np.exp(-((k - 25.0) / 2.5) ** 2) + 0.8 * np.exp(-((k - 32.0) / 3.0) ** 2)
    return shape - shape[0]


def noise_levels(rng: np.random.Generator, n: int = N_DAYS, scale: float = 0.05) -> np.ndarray:
    return np.round(BASE_VOLUME * (1.0 + scale * rng.standard_normal(n))).astype(np.int64)


def injected_series(seed: int = 7) -> tuple[dict[str, VolumeSeries], Pattern]:
    """Three companies; the pattern is injected at twice its amplitude into ``inj`` only."""
    rng = np.random.default_rng(seed)
    days = trading_days(N_DAYS)
    deltas = bump_pattern()
    series = {}
    for name in ("ctla", "ctlb", "inj"):
        levels = noise_levels(rng)
        if name == "inj":
            seg = np.round(BASE_VOLUME * (1.0 + 2.0 * deltas)).astype(np.int64)
            levels[INJECT_DAY:INJECT_DAY + WS] = seg
        series[name] = VolumeSeries(name, days, levels)
    pattern = Pattern(1, "case-inj", "src", days[INJECT_DAY + WS // 2], NormalizedWindow(1.0, deltas))
    return series, pattern


def write_volume_dir(series: dict[str, VolumeSeries], root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for name, s in series.items():
        write_volume_csv(s, root / f"{name}.csv")
    return root


def four_case_releases() -> dict[str, str]:
    """Keyword in title+body, title only, body only, neither: either=3 = 2 + 2 - 1."""
    days = trading_days(N_DAYS)
    learn = days[INJECT_DAY + WS // 2]
    public = days[INJECT_DAY + WS // 2 + 5]
    return {
        "lr-0001": (
            "SEC Charges Trader With Insider Trading Ahead of Acquisition\n\n"
            f"The complaint alleges the defendant learned on {learn:%B} {learn.day}, {learn.year} "
            "that Inj Corp would be acquired. He bought shares before the deal was announced "
            f"on {public:%B} {public.day}, {public.year}, an illegal insider scheme that yielded "
            "illicit profits of $125,000.\n"),
        "lr-0002": (
            "Former Director Settles Insider Trading Charges\n\n"
            "The defendant agreed to pay a civil penalty without admitting or denying the allegations.\n"),
        "lr-0003": (
            "Court Enters Final Judgment Against Consultant\n\n"
            "The complaint alleged that the consultant traded on material non-public information "
            "as an insider of Ctla Holdings and tipped a relative.\n"),
        "lr-0004": (
            "SEC Obtains Asset Freeze in Offering Fraud\n\n"
            "The complaint alleges the promoters misappropriated investor funds raised in an "
            "unregistered offering.\n"),
    }


def write_corpus(releases: dict[str, str], root: Path) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for cid, text in releases.items():
        (root / f"{cid}.txt").write_text(text, encoding="utf-8")
    return root


def pipeline_workspace(root: Path, epochs: int = 1) -> Path:
    """Corpus, volumes, overrides and an INI config under ``root``; returns the config path."""
    series, _ = injected_series()
    write_corpus(four_case_releases(), root / "corpus")
    write_volume_dir(series, root / "volumes")
    days = trading_days(N_DAYS)
    (root / "overrides.csv").write_text(
        "case_id,company,ticker,learn_date\n"
        f"lr-0003,Ctla Holdings,ctla,{days[300].isoformat()}\n", encoding="utf-8")
    cfg = root / "run.ini"
    cfg.write_text(
        "[pipeline]\n"
        "corpus_dir = corpus\n"
        "volume_dir = volumes\n"
        "overrides_path = overrides.csv\n"
        "output_dir = out\n"
        "seed = 3\n"
        "\n[net]\n"
        f"epochs = {epochs}\n"
        "batch_size = 512\n"
        "\n[classify]\n"
        "n_trees = 20\n", encoding="utf-8")
    return cfg


SINE_PERIOD = 23  # does not divide the window, so training targets vary


def sinusoid_levels(n: int = 700) -> np.ndarray:
    t = np.arange(n)
    return BASE_VOLUME * (1.0 + 0.5 * np.sin(2 * np.pi * t / SINE_PERIOD))


@functools.lru_cache(maxsize=None)
def trained_sinusoid(seed: int = 0, epochs: int = 120):
    """Desk-scale training run shared across tests; returns (initial, trained, X, y, trace)."""
    from insiderscan.predictor import NetConfig, init_model, train, training_set

    lv = sinusoid_levels()
    X, y = training_set(lv[:450], WS)
    cfg = NetConfig(epochs=epochs, batch_size=64, seed=seed)
    model = init_model(cfg)
    trained, trace = train(model, X, y, cfg)
    return model, trained, X, y, trace
