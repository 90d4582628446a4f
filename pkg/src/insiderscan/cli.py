"""Command-line driver for the detection pipeline.

Each subcommand reads the artifacts of the stage before it from the output
directory and writes its own there, so any stage can be re-run on its own::

    insiderscan ingest --corpus-dir releases/ --output out/
    insiderscan classify --output out/
    insiderscan extract-patterns --volume-dir volumes/ --overrides overrides.csv --output out/
    insiderscan train --volume-dir volumes/ --output out/
    insiderscan predict --volume-dir volumes/ --output out/
    insiderscan detect --volume-dir volumes/ --output out/
    insiderscan plot --volume-dir volumes/ --output out/
    insiderscan pipeline --config run.ini

Progress and timings go to stderr; stdout gets one JSON line per stage
listing the artifacts written.  Failures print ``{"error": ..., "stage": ...}``
on stderr and exit 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import anomalous, corpus, predictor, textmodel, timeseries
from .config import ConfigError, PipelineConfig, load_config

log = logging.getLogger("insiderscan")

STAGES = ("ingest", "classify", "extract-patterns", "train", "predict", "detect", "plot")

CASES = "cases.jsonl"
STATS_JSON = "stats.json"
STATS_CSV = "stats.csv"
RANKING = "ranking.csv"
TFIDF_TOP = "tfidf_top.csv"
TREE_JSON = "tree.json"
TREE_DOT = "tree.dot"
METRICS = "metrics.json"
CLASSIFIED = "classified.jsonl"
EVENTS = "events.csv"
PATTERNS = "patterns.json"
MODEL = "model.json"
TRAIN_LOG = "training_log.csv"
PREDICTIONS = "predictions.csv"
HITS = "hits.jsonl"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
REPORT_JSON = "report.json"


class StageError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _need(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise StageError(f"missing {path.name} in {path.parent}; run `{producer}` first")
    return path


def _load_volumes(cfg: PipelineConfig) -> dict[str, timeseries.VolumeSeries]:
    volumes = timeseries.load_volume_dir(cfg.volume_dir)
    if not volumes:
        raise StageError(f"no volume CSVs in {cfg.volume_dir}")
    for ticker, series in volumes.items():
        for w in series.warnings:
            log.warning("%s: %s", ticker, w)
    return volumes


# --- stages -------------------------------------------------------------------

def stage_ingest(cfg: PipelineConfig) -> list[Path]:
    out = cfg.output_dir
    case_set = corpus.load_cases(cfg.corpus_dir)
    for w in case_set.warnings:
        log.warning(w)
    labeled = corpus.label_cases(case_set.cases, cfg.keyword, cfg.label_rule, cfg.stem)
    stats = corpus.corpus_stats(labeled)
    corpus.write_labeled_jsonl(labeled, out / CASES)
    _dump_json(stats.as_dict(), out / STATS_JSON)
    with open(out / STATS_CSV, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["statistic", "count"])
        for key, value in stats.as_dict().items():
            writer.writerow([key, value])
    log.info("ingest: %d cases, %d labeled %s", stats.total,
             sum(c.is_insider for c in labeled), corpus.INSIDER)
    return [out / CASES, out / STATS_JSON, out / STATS_CSV]


def _read_cases_for_apply(path: Path) -> list[corpus.LabeledCase]:
    if path.is_dir():
        case_set = corpus.load_cases(path)
        for w in case_set.warnings:
            log.warning(w)
        return corpus.label_cases(case_set.cases)
    return corpus.read_labeled_jsonl(path)


def stage_classify(cfg: PipelineConfig, highlight: str | None = None,
                   apply: Path | None = None) -> list[Path]:
    out = cfg.output_dir
    cc = cfg.classify
    labeled = corpus.read_labeled_jsonl(_need(out / CASES, "ingest"))
    labels = textmodel.labels_of(labeled)
    counts = textmodel.build_term_matrix(labeled)

    weighted = textmodel.apply_tfidf(counts)
    with open(out / TFIDF_TOP, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["term", "tfidf"])
        for term, score in textmodel.top_tfidf_terms(weighted, cc.tfidf_top):
            writer.writerow([term, f"{score:.10g}"])

    ranking = textmodel.rank_features(counts, labels, n_trees=cc.n_trees, k_candidates=cc.k_candidates,
                                      class_weights=cc.class_weights, seed=cfg.seed)
    textmodel.write_ranking_csv(ranking, out / RANKING)
    reduced = textmodel.reduce_features(counts, ranking)
    tree = textmodel.train_decision_tree(reduced, labels, max_depth=cc.max_depth, min_leaf=cc.min_leaf,
                                         class_weights=cc.tree_class_weights, seed=cfg.seed)
    tree.save(out / TREE_JSON)

    vector = None
    if highlight is not None:
        by_id = {c.case.id: c for c in labeled}
        if highlight not in by_id:
            raise StageError(f"--highlight: no case {highlight!r}")
        vector = textmodel.vectorize(by_id[highlight].text, tree.vocabulary)
    (out / TREE_DOT).write_text(textmodel.export_tree_dot(tree, highlight=vector), encoding="utf-8")

    metrics = textmodel.training_metrics(tree, reduced, labels)
    metrics["vocabulary_size"] = len(counts.vocabulary)
    _dump_json(metrics, out / METRICS)
    written = [out / TFIDF_TOP, out / RANKING, out / TREE_JSON, out / TREE_DOT, out / METRICS]

    if apply is not None:
        rows = []
        for case in _read_cases_for_apply(Path(apply)):
            label, path = textmodel.classify_case(tree, textmodel.vectorize(case.text, tree.vocabulary))
            rows.append({"id": case.case.id, "label": label,
                         "path": [[s.node, s.term, s.threshold, s.branch] for s in path]})
        with open(out / CLASSIFIED, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        written.append(out / CLASSIFIED)
    log.info("classify: %d terms, %d kept, tree depth %d, training accuracy %.4f",
             len(counts.vocabulary), len(reduced.vocabulary), tree.depth, metrics["accuracy"])
    return written


def _ticker_for(event: corpus.EventRecord, tickers: list[str]) -> str | None:
    if event.ticker:
        return event.ticker
    name = event.company.lower()
    for t in tickers:
        if t.lower() == name or t.lower() in name.split():
            return t
    return None


def stage_extract_patterns(cfg: PipelineConfig) -> list[Path]:
    out = cfg.output_dir
    labeled = corpus.read_labeled_jsonl(_need(out / CASES, "ingest"))
    overrides = corpus.load_overrides(cfg.overrides_path)
    volumes = _load_volumes(cfg)
    tickers = sorted(volumes)
    events, patterns = [], []
    for case in labeled:
        if not case.is_insider and case.case.id not in overrides:
            continue
        event = corpus.extract_event_record(case, overrides)
        if event is None:
            log.warning("case %s: no learning date found", case.case.id)
            continue
        ticker = _ticker_for(event, tickers)
        if ticker is None or ticker not in volumes:
            log.warning("case %s: no volume series for %r", case.case.id, event.ticker or event.company)
            continue
        try:
            pattern = timeseries.extract_pattern(volumes[ticker], event, cfg.window_size,
                                                 pattern_id=len(patterns) + 1,
                                                 epsilon_base=cfg.epsilon_base)
        except timeseries.SeriesError as exc:
            log.warning("case %s: %s", case.case.id, exc)
            continue
        events.append(event)
        patterns.append(pattern)
    if not patterns:
        raise StageError("no anomalous patterns could be extracted")
    corpus.write_events_csv(events, out / EVENTS)
    timeseries.save_patterns(patterns, out / PATTERNS)
    log.info("extract-patterns: %d patterns", len(patterns))
    return [out / EVENTS, out / PATTERNS]


def stage_train(cfg: PipelineConfig) -> list[Path]:
    out = cfg.output_dir
    volumes = _load_volumes(cfg)
    xs, ys = [], []
    for ticker in sorted(volumes):
        try:
            X, y = predictor.training_set(volumes[ticker].volumes.astype(float), cfg.window_size,
                                          epsilon_base=cfg.epsilon_base)
        except ValueError as exc:
            log.warning("%s: %s", ticker, exc)
            continue
        xs.append(X)
        ys.append(y)
    if not xs:
        raise StageError("no ticker has enough history to train on")
    X, y = np.concatenate(xs), np.concatenate(ys)
    model, trace = predictor.train(predictor.init_model(cfg.net), X, y, cfg.net)
    predictor.save_model(model, out / MODEL)
    predictor.write_loss_csv(trace, out / TRAIN_LOG)
    log.info("train: %d samples, loss %.6g -> %.6g", len(X), trace[0], trace[-1])
    return [out / MODEL, out / TRAIN_LOG]


def stage_predict(cfg: PipelineConfig) -> list[Path]:
    out = cfg.output_dir
    model = predictor.load_model(_need(out / MODEL, "train"))
    volumes = _load_volumes(cfg)
    methods = [m for m in anomalous.PREDICTION_METHODS if m in cfg.methods]
    series = []
    for ticker in sorted(volumes):
        levels = volumes[ticker].volumes.astype(float)
        for method in methods:
            ps = predictor.predict_series(model, levels, method, ticker, cfg.window_size)
            if len(ps.values) == 0:
                log.warning("%s: fewer than two windows, nothing to predict", ticker)
                break
            series.append(ps)
    predictor.write_predictions_csv(series, out / PREDICTIONS)
    log.info("predict: %d series", len(series))
    return [out / PREDICTIONS]


def _signals(cfg: PipelineConfig, volumes) -> dict[str, dict[str, list[np.ndarray]]]:
    signals: dict[str, dict[str, list[np.ndarray]]] = {t: {} for t in volumes}
    if anomalous.ACTUAL in cfg.methods:
        for ticker, series in volumes.items():
            signals[ticker][anomalous.ACTUAL] = anomalous.actual_windows(
                series, cfg.window_size, cfg.stride, cfg.epsilon_base)
    if any(m in cfg.methods for m in anomalous.PREDICTION_METHODS):
        path = cfg.output_dir / PREDICTIONS
        if path.is_file():
            for ps in predictor.read_predictions_csv(path, cfg.window_size):
                if ps.ticker in signals and ps.method in cfg.methods:
                    signals[ps.ticker][ps.method] = ps.windows()
        else:
            log.warning("no %s; scanning the actual signal only", PREDICTIONS)
    return signals


def _curve_name(hit: anomalous.Hit) -> str:
    return f"{hit.company}_{hit.method}_w{hit.window_index}_p{hit.pattern_id}"


def stage_detect(cfg: PipelineConfig) -> list[Path]:
    out = cfg.output_dir
    patterns = timeseries.load_patterns(_need(out / PATTERNS, "extract-patterns"))
    volumes = _load_volumes(cfg)
    signals = _signals(cfg, volumes)
    methods = [m for m in cfg.methods if any(m in s for s in signals.values())]
    stride = {anomalous.ACTUAL: cfg.stride} if cfg.stride else None
    report, hits = anomalous.scan(signals, patterns, cfg.threshold, cfg.window_size,
                                  methods=methods, stride=stride)
    for w in report.warnings:
        log.warning(w)
    text, table = anomalous.summarize(report)
    anomalous.write_hits_jsonl(hits, out / HITS)
    (out / REPORT_CSV).write_text(table, encoding="utf-8")
    (out / REPORT_TXT).write_text(text, encoding="utf-8")
    _dump_json({
        "threshold": report.threshold,
        "window_size": report.window_size,
        "n_companies": report.n_companies,
        "methods": methods,
        "rows": [{"pattern_id": r.pattern_id, "pct_companies_hit": r.pct_companies_hit,
                  "hits_by_method": r.hits_by_method, "actual_hits": r.actual_hits,
                  "total_hits": r.total_hits} for r in report.rows],
        "warnings": report.warnings,
    }, out / REPORT_JSON)

    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    by_id = {p.id: p for p in patterns}
    for hit in hits:
        win = signals[hit.company][hit.method][hit.window_index]
        anomalous.write_curve_csv(anomalous.ncc(win, by_id[hit.pattern_id].deltas),
                                  curves / f"{_curve_name(hit)}.csv")
    log.info("detect: %d hits over %d companies", len(hits), report.n_companies)
    return [out / HITS, out / REPORT_CSV, out / REPORT_TXT, out / REPORT_JSON]


def stage_plot(cfg: PipelineConfig) -> list[Path]:
    from . import plotting

    out = cfg.output_dir
    ws = cfg.window_size
    hits = anomalous.read_hits_jsonl(_need(out / HITS, "detect"))
    patterns = {p.id: p for p in timeseries.load_patterns(_need(out / PATTERNS, "extract-patterns"))}
    volumes = _load_volumes(cfg)
    signals = _signals(cfg, volumes)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    written = []

    # one overview per company: the first predicted window against the actual one
    for ticker in sorted(signals)[:cfg.max_plots]:
        sig = signals[ticker]
        drawn = {m: sig[m][0] for m in anomalous.ALL_METHODS if sig.get(m)}
        if anomalous.ACTUAL in drawn and cfg.stride and cfg.stride != ws:
            drawn[anomalous.ACTUAL] = anomalous.actual_windows(volumes[ticker], ws, None, cfg.epsilon_base)[0]
        if drawn:
            written.append(plotting.plot_windows(drawn, plots / f"{ticker}_windows.svg",
                                                 title=f"{ticker}: window 0", start_day=ws))

    for hit in hits[:cfg.max_plots]:
        name = _curve_name(hit)
        win = signals[hit.company][hit.method][hit.window_index]
        pattern = patterns[hit.pattern_id]
        start = hit.absolute_day - hit.day_offset
        written.append(plotting.plot_ncc(anomalous.ncc(win, pattern.deltas), plots / f"{name}_ncc.svg",
                                         title=f"{hit.company} {hit.method} window {hit.window_index}"
                                               f" vs pattern {hit.pattern_id}"))
        shifted = np.full(ws, np.nan)
        shifted[hit.day_offset:] = pattern.deltas[:ws - hit.day_offset]
        written.append(plotting.plot_windows({hit.method: win, f"pattern {hit.pattern_id}": shifted},
                                             plots / f"{name}_match.svg",
                                             title=f"{hit.company}: hit at day {hit.absolute_day}",
                                             start_day=start))
    log.info("plot: %d figures", len(written))
    return written


# --- argument handling -----------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--window-size", type=int)
    p.add_argument("--output", type=Path, help="output directory")
    p.add_argument("--corpus-dir", type=Path)
    p.add_argument("--volume-dir", type=Path)
    p.add_argument("--overrides", type=Path, help="CSV of case_id,learn_date[,ticker,...] overrides")
    p.add_argument("--keyword")
    p.add_argument("--stride", type=int, help="day stride of actual-signal windows")
    p.add_argument("--epsilon-base", action="store_true", default=None,
                   help="treat a zero first-day volume as 1 instead of failing")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(anomalous.ALL_METHODS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="insiderscan",
                                     description="Detect insider-trading-like volume patterns.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    helps = {
        "ingest": "label a directory of releases",
        "classify": "rank terms and train the decision tree",
        "extract-patterns": "cut anomalous volume windows around learning dates",
        "train": "fit the recurrent volume predictor",
        "predict": "predict volumes with all three regimes",
        "detect": "cross-correlate signals against the patterns",
        "plot": "render SVG figures for the hits",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("classify", "pipeline"):
            p.add_argument("--highlight", metavar="CASE_ID", help="mark this case's path in the DOT output")
        if name == "classify":
            p.add_argument("--apply", type=Path, help="classify these cases (JSONL or release directory)")
    return parser


def _config_from_args(args) -> PipelineConfig:
    overrides = {
        "seed": args.seed,
        "threshold": args.threshold,
        "window_size": args.window_size,
        "output_dir": args.output,
        "corpus_dir": args.corpus_dir,
        "volume_dir": args.volume_dir,
        "overrides_path": args.overrides,
        "keyword": args.keyword,
        "stride": args.stride,
        "epsilon_base": args.epsilon_base,
        "methods": tuple(m.strip() for m in args.methods.split(",")) if args.methods else None,
        "net.epochs": args.epochs,
        "net.batch_size": args.batch_size,
    }
    return load_config(args.config, overrides)


_NEEDS = {
    "ingest": ("corpus_dir",),
    "extract-patterns": ("volume_dir",),
    "train": ("volume_dir",),
    "predict": ("volume_dir",),
    "detect": ("volume_dir",),
    "plot": ("volume_dir",),
}


def _needs(command: str, cfg: PipelineConfig) -> tuple[str, ...]:
    stages = STAGES if command == "pipeline" else (command,)
    need = sorted({n for s in stages for n in _NEEDS.get(s, ())})
    if cfg.overrides_path is not None and "extract-patterns" in stages:
        need.append("overrides_path")
    return tuple(need)


def _run_stage(name: str, cfg: PipelineConfig, args) -> None:
    t0 = time.perf_counter()
    log.info("%s: start", name)
    if name == "ingest":
        written = stage_ingest(cfg)
    elif name == "classify":
        written = stage_classify(cfg, getattr(args, "highlight", None), getattr(args, "apply", None))
    elif name == "extract-patterns":
        written = stage_extract_patterns(cfg)
    elif name == "train":
        written = stage_train(cfg)
    elif name == "predict":
        written = stage_predict(cfg)
    elif name == "detect":
        written = stage_detect(cfg)
    else:
        written = stage_plot(cfg)
    log.info("%s: done in %.2fs", name, time.perf_counter() - t0)
    print(json.dumps({"stage": name, "artifacts": [str(p) for p in written]}), flush=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    stage = "config"
    try:
        cfg = _config_from_args(args)
        cfg.validate(need=_needs(args.command, cfg))
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        for stage in (STAGES if args.command == "pipeline" else (args.command,)):
            _run_stage(stage, cfg, args)
    except (ConfigError, StageError, corpus.CorpusError, timeseries.SeriesError, anomalous.ScanError,
            predictor.TrainingError, textmodel.ModelError, ValueError, OSError) as exc:
        print(json.dumps({"error": str(exc), "stage": stage, "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
