"""Acceptance gate: one test per criterion, summarized as PASS/FAIL lines at the end of the run.

Run just this file with ``pytest tests/test_acceptance.py -v``.  Criterion 8's
full-archive sub-check runs only when ``INSIDERSCAN_SEC_ARCHIVE`` points at a
directory of the original releases.
"""
import os
import time
from pathlib import Path

import numpy as np
import pydot
import pytest

from insiderscan.anomalous import (
    ACTUAL,
    DAY_BASED,
    WHOLE_HISTORY,
    WINDOW_BASED,
    actual_windows,
    lag_to_day,
    ncc,
    read_hits_jsonl,
    scan,
)
from insiderscan.cli import main
from insiderscan.corpus import CaseRecord, corpus_stats, label_cases, load_cases
from insiderscan.predictor import NetConfig, batch_loss, gradient_check, init_model, predict_series, prediction_mse
from insiderscan.textmodel import (
    build_term_matrix,
    export_tree_dot,
    labels_of,
    rank_features,
    train_decision_tree,
    training_metrics,
)
from insiderscan.timeseries import pct_change, save_patterns

from fixtures import INJECT_DAY, injected_series, pipeline_workspace, sinusoid_levels, trained_sinusoid, write_volume_dir
from test_anomalous import brute_ncc
from test_predictor import corrupt_forget_gate
from test_textmodel import best_single_split_gain, insider_corpus


def _detail(record_property, text):
    record_property("detail", text)


def _pairs(n_pairs, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        n = int(rng.integers(4, 65))
        yield rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n) * rng.uniform(0.1, 10), rng


@pytest.mark.criterion(1, "NCC matches the brute-force per-lag oracle")
def test_ncc_oracle(record_property):
    pairs = list(_pairs(1000, seed=101))
    t0 = time.perf_counter()
    curves = [ncc(x, y) for x, y, _ in pairs]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for (x, y, _), c in zip(pairs, curves):
        lags, ref = brute_ncc(x, y)
        assert c.lags.tolist() == lags.tolist()
        worst = max(worst, float(np.max(np.abs(c.values - ref))))
    _detail(record_property, f"max abs diff {worst:.2e}, library time {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 5.0


@pytest.mark.criterion(2, "NCC bounded and scale invariant")
def test_ncc_bounded_scale_invariant(record_property):
    worst_bound, worst_rel, worst_elem = 0.0, 0.0, 0.0
    for i, (x, y, rng) in enumerate(_pairs(1000, seed=202)):
        if i % 10 == 0:
            y = x * rng.uniform(0.1, 10)  # peaks at exactly 1 in exact arithmetic
        alpha, beta = np.exp(rng.uniform(-6, 6, size=2))
        c = ncc(x, y).values
        s = ncc(alpha * x, beta * y).values
        worst_bound = max(worst_bound, float(np.max(np.abs(c))), float(np.max(np.abs(s))))
        # relative to the curve's magnitude; see the ledger for the elementwise figure
        worst_rel = max(worst_rel, float(np.max(np.abs(s - c)) / np.max(np.abs(c))))
        worst_elem = max(worst_elem, float(np.max(np.abs(s - c) / np.maximum(np.abs(c), 1e-300))))
    _detail(record_property, f"max |value| {worst_bound:.15f}, max relative diff {worst_rel:.2e} "
                             f"(elementwise {worst_elem:.2e})")
    assert worst_bound <= 1 + 1e-12
    assert worst_rel <= 1e-12


@pytest.mark.criterion(3, "Window/offset to absolute day")
def test_lag_to_day(record_property):
    assert lag_to_day(2, 10, 50) == 160
    rng = np.random.default_rng(303)
    for _ in range(2000):
        ws = int(rng.integers(2, 200))
        w, d = int(rng.integers(0, 1000)), int(rng.integers(0, ws))
        assert lag_to_day(w, d, ws) - lag_to_day(w, 0, ws) == d
    _detail(record_property, "lag_to_day(2, 10, 50) = 160; 2000 random offsets additive")


@pytest.mark.criterion(4, "Percent-change transform")
def test_pct_change(record_property):
    assert pct_change([100, 120, 115]).deltas.tolist() == [0.0, 0.20, 0.15]
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        v = rng.uniform(1, 1e8, size=int(rng.integers(2, 60)))
        c = float(np.exp(rng.uniform(-8, 8)))
        a, b = pct_change(v).deltas, pct_change(v * c).deltas
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1.0))))
    _detail(record_property, f"exact worked example; max scale deviation {worst:.2e}")
    assert worst <= 1e-12


@pytest.mark.criterion(5, "Injected-pattern detection through the CLI")
def test_injected_detection(tmp_path, record_property):
    t0 = time.perf_counter()
    series, pattern = injected_series()
    vols = write_volume_dir(series, tmp_path / "volumes")
    found = {}
    for threshold in (0.80, 0.94):
        out = tmp_path / f"out{threshold}"
        out.mkdir()
        save_patterns([pattern], out / "patterns.json")
        assert main(["detect", "--volume-dir", str(vols), "--output", str(out), "--methods", ACTUAL,
                     "--threshold", str(threshold)]) == 0
        found[threshold] = (read_hits_jsonl(out / "hits.jsonl"), (out / "report.csv").read_text())
    elapsed = time.perf_counter() - t0
    for threshold, (hits, table) in found.items():
        mine = [h for h in hits if h.pattern_id == pattern.id and h.company == "inj"]
        assert mine and all(abs(h.absolute_day - INJECT_DAY) <= 2 for h in mine)
        assert table.splitlines()[1].split(",")[1] == "33.33%"
    controls = [h for h in found[0.94][0] if h.company != "inj"]
    assert controls == []
    best = found[0.94][0][0]
    _detail(record_property, f"hit at day {best.absolute_day} (ncc {best.value:.4f}), "
                             f"0 control hits at 0.94, {elapsed:.2f}s")
    assert elapsed < 30


@pytest.mark.criterion(6, "Predictor gradient check and mutation")
def test_gradient_check(record_property):
    t0 = time.perf_counter()
    cfg = NetConfig(input_len=12, layer1_units=4, layer2_units=8, seed=0)
    model = init_model(cfg)
    rng = np.random.default_rng(606)
    sample = (rng.normal(scale=0.3, size=(2, 12)), rng.normal(scale=0.3, size=2))
    err = gradient_check(model, sample)
    mutated = gradient_check(model, sample, grad_fn=corrupt_forget_gate)
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"max rel error {err:.2e}, mutated {mutated:.2e}, {elapsed:.1f}s")
    assert err < 1e-4
    assert mutated > 1e-2
    assert elapsed < 60


@pytest.mark.criterion(7, "Predictor learns the sinusoid; day <= window <= history")
def test_predictor_learning(record_property):
    t0 = time.perf_counter()
    initial, trained, X, y, _ = trained_sinusoid.__wrapped__(seed=0, epochs=120)
    before, after = batch_loss(initial, X, y), batch_loss(trained, X, y)
    hold = sinusoid_levels()[400:]
    mse = {k: prediction_mse(predict_series(trained, hold, k), hold)
           for k in (DAY_BASED, WINDOW_BASED, WHOLE_HISTORY)}
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"train mse {before:.4f} -> {after:.4f}; held-out day {mse[DAY_BASED]:.4f}, "
                             f"window {mse[WINDOW_BASED]:.4f}, history {mse[WHOLE_HISTORY]:.4f}; {elapsed:.0f}s")
    assert after < 0.5 * before
    assert mse[DAY_BASED] <= mse[WINDOW_BASED] <= mse[WHOLE_HISTORY]
    assert elapsed < 300


FOUR = [
    CaseRecord("t", "Insider trading charges", "A settlement was reached."),
    CaseRecord("b", "Final judgment", "He traded as an insider."),
    CaseRecord("tb", "SEC v X insider case", "The insider tipped a friend."),
    CaseRecord("n", "SEC v Y", "no relevant terms"),
]


@pytest.mark.criterion(8, "Corpus statistics identity")
def test_corpus_identity(record_property):
    rng = np.random.default_rng(808)
    vocab = ["insider", "Insider", "INSIDER", "insiders", "trading", "fraud", "tip", "non-insider"]
    for _ in range(100):
        cases = []
        for i in range(int(rng.integers(0, 60))):
            title = " ".join(rng.choice(vocab, size=int(rng.integers(0, 5))))
            body = " ".join(rng.choice(vocab, size=int(rng.integers(0, 12))))
            cases.append(CaseRecord(str(i), title, body))
        s = corpus_stats(label_cases(cases))
        assert s.either_hits == s.title_hits + s.body_hits - s.both_hits
    s = corpus_stats(label_cases(FOUR))
    assert (s.either_hits, s.title_hits, s.body_hits, s.both_hits) == (3, 2, 2, 1)
    archive = os.environ.get("INSIDERSCAN_SEC_ARCHIVE")
    if archive:
        full = corpus_stats(label_cases(load_cases(Path(archive)).cases))
        assert (full.total, full.title_hits, full.body_hits, full.either_hits, full.both_hits) == \
            (7988, 605, 1142, 1222, 525)
        _detail(record_property, "identity on 100 corpora and the 4-case fixture; archive stats reproduced")
    else:
        _detail(record_property, "identity on 100 corpora and the 4-case fixture (3 = 2 + 2 - 1); "
                                 "full-archive sub-check unavailable (INSIDERSCAN_SEC_ARCHIVE not set)")


@pytest.mark.criterion(9, "Text model ranks and splits on the label term")
def test_text_model(record_property):
    t0 = time.perf_counter()
    cases = insider_corpus(60, seed=9)
    m = build_term_matrix(cases)
    y = labels_of(cases)
    oracle = best_single_split_gain(m.rows.toarray(), y)
    assert m.vocabulary[int(np.argmax(oracle))] == "insider"
    ranking = rank_features(m, y, seed=0)
    assert ranking.order[0] == "insider"
    tree = train_decision_tree(m, y)
    metrics = training_metrics(tree, m, y)
    assert tree.depth == 1 and tree.vocabulary[tree.nodes[0].feature] == "insider"
    assert metrics["accuracy"] == 1.0
    graphs = pydot.graph_from_dot_data(export_tree_dot(tree))
    assert graphs and len(graphs[0].get_edges()) == 2
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"'insider' ranked first, depth-1 tree, accuracy 100%, DOT parses, {elapsed:.1f}s")
    assert elapsed < 10


@pytest.mark.criterion(10, "Hit count non-increasing in the threshold")
def test_threshold_monotone(record_property):
    series, pattern = injected_series()
    signals = {k: {ACTUAL: actual_windows(v)} for k, v in series.items()}
    lv = series["inj"].volumes.astype(float)
    # the same windows stand in for the predicted signals so every method column is exercised
    from insiderscan.anomalous import signal_windows
    for method in (WINDOW_BASED, DAY_BASED, WHOLE_HISTORY):
        signals["inj"][method] = signal_windows(lv)
    counts = []
    for t in (0.5, 0.6, 0.7, 0.8, 0.9, 0.94, 1.0):
        _, hits = scan(signals, [pattern], threshold=t)
        counts.append(len(hits))
    _detail(record_property, f"hit counts {counts}")
    assert all(a >= b for a, b in zip(counts, counts[1:]))


@pytest.mark.criterion(11, "Pipeline runs are byte-identical")
def test_pipeline_determinism(tmp_path, record_property):
    cfg = pipeline_workspace(tmp_path)
    assert main(["pipeline", "--config", str(cfg), "--output", str(tmp_path / "a")]) == 0
    assert main(["pipeline", "--config", str(cfg), "--output", str(tmp_path / "b")]) == 0
    for name in ("hits.jsonl", "report.csv", "model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    others = [p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()]
    assert all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in others)
    _detail(record_property, f"hits, report and model identical; all {len(others)} artifacts identical")
