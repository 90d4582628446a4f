"""Two-layer LSTM volume predictor written directly in numpy.

The network reads a sequence of percent-change values (one feature per day),
passes it through two stacked LSTM layers and a linear unit on the last
hidden state, and predicts the next day's percent change relative to the
sequence's first day.  Training uses backpropagation through time, mean
squared error and RMSprop with global-norm gradient clipping.

Three prediction regimes are provided:

* day based: each day is predicted from the true 50 preceding days;
* window based: a whole window is generated from the previous true window,
  feeding every prediction back as input;
* whole history: the recurrent state runs over the entire true history
  without resets, then generates the next window autoregressively.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anomalous import DAY_BASED, WHOLE_HISTORY, WINDOW_BASED
from .timeseries import NormalizedWindow, pct_change

log = logging.getLogger(__name__)

FORMAT = "insiderscan-lstm"
FORMAT_VERSION = 1
PARAM_NAMES = ("W1", "U1", "b1", "W2", "U2", "b2", "w_out", "b_out")


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_len: int = 50
    layer1_units: int = 50
    layer2_units: int = 100
    dropout: float = 0.2
    loss: str = "mse"
    optimizer: str = "rmsprop"
    epochs: int = 1
    batch_size: int = 512
    seed: int = 0
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("input_len", "layer1_units", "layer2_units", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss != "mse" or self.optimizer != "rmsprop":
            raise ValueError("only loss=mse with optimizer=rmsprop is supported")


@dataclass
class RecurrentModel:
    config: NetConfig
    params: dict[str, np.ndarray]
    trained: bool = False

    def copy(self) -> "RecurrentModel":
        return RecurrentModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.trained)


@dataclass
class PredictedSeries:
    """Per-day predicted percent change, each window relative to its own first day.

    ``alignment`` is the series index of the first predicted day.
    """

    method: str
    ticker: str
    values: np.ndarray
    alignment: int
    window_size: int = 50
    levels: np.ndarray | None = None

    def windows(self) -> list[np.ndarray]:
        n = len(self.values) // self.window_size
        return [self.values[i * self.window_size:(i + 1) * self.window_size] for i in range(n)]


# --- parameters ---------------------------------------------------------------

def init_model(config: NetConfig) -> RecurrentModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate bias 1."""
    rng = np.random.default_rng(config.seed)
    h1, h2 = config.layer1_units, config.layer2_units

    def lstm(n_in, h):
        lim = 1.0 / np.sqrt(n_in + h)
        W = rng.uniform(-lim, lim, size=(n_in, 4 * h))
        U = rng.uniform(-lim, lim, size=(h, 4 * h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return W, U, b

    W1, U1, b1 = lstm(1, h1)
    W2, U2, b2 = lstm(h1, h2)
    lim = 1.0 / np.sqrt(h2)
    w_out = rng.uniform(-lim, lim, size=h2)
    params = dict(W1=W1, U1=U1, b1=b1, W2=W2, U2=U2, b2=b2, w_out=w_out, b_out=np.zeros(1))
    return RecurrentModel(config, params)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_forward(xs, W, U, b, h=None, c=None):
    """Run one LSTM layer over ``xs`` of shape (B, T, In); gates ordered i, f, g, o."""
    B, T, _ = xs.shape
    H = U.shape[0]
    h = np.zeros((B, H)) if h is None else h
    c = np.zeros((B, H)) if c is None else c
    hs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        z = xs[:, t] @ W + h @ U + b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, g, o, c_prev, h_prev, tc))
    return hs, (h, c), cache


def _lstm_backward(dhs, xs, W, U, cache):
    B, T, H = dhs.shape
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * H)
    dxs = np.empty(xs.shape)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        i, f, g, o, c_prev, h_prev, tc = cache[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dW += xs[:, t].T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(axis=0)
        dxs[:, t] = dz @ W.T
        dh_next = dz @ U.T
        dc_next = dc * f
    return dxs, dW, dU, db


def _masks(rng, config, B, T):
    p = config.dropout
    if rng is None or p == 0:
        return None, None
    keep = 1.0 - p
    m1 = (rng.random((B, T, config.layer1_units)) < keep) / keep
    m2 = (rng.random((B, config.layer2_units)) < keep) / keep
    return m1, m2


def _forward(params, X, masks=(None, None)):
    xs = X[:, :, None]
    h1s, _, cache1 = _lstm_forward(xs, params["W1"], params["U1"], params["b1"])
    m1, m2 = masks
    in2 = h1s * m1 if m1 is not None else h1s
    h2s, _, cache2 = _lstm_forward(in2, params["W2"], params["U2"], params["b2"])
    last = h2s[:, -1]
    feat = last * m2 if m2 is not None else last
    yhat = feat @ params["w_out"] + params["b_out"][0]
    return yhat, (xs, in2, cache1, cache2, feat)


def loss_and_grad(model: RecurrentModel, X: np.ndarray, y: np.ndarray,
                  masks=(None, None)) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error of a batch and its gradient for every parameter."""
    p = model.params
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    yhat, (xs, in2, cache1, cache2, feat) = _forward(p, X, masks)
    err = yhat - y
    loss = float(np.mean(err ** 2))
    B, T = X.shape
    dy = 2.0 * err / B
    grads = {"w_out": feat.T @ dy, "b_out": np.array([dy.sum()])}
    dlast = dy[:, None] * p["w_out"][None, :]
    m1, m2 = masks
    if m2 is not None:
        dlast = dlast * m2
    dh2s = np.zeros((B, T, p["U2"].shape[0]))
    dh2s[:, -1] = dlast
    din2, grads["W2"], grads["U2"], grads["b2"] = _lstm_backward(dh2s, in2, p["W2"], p["U2"], cache2)
    dh1s = din2 * m1 if m1 is not None else din2
    _, grads["W1"], grads["U1"], grads["b1"] = _lstm_backward(dh1s, xs, p["W1"], p["U1"], cache1)
    return loss, grads


def batch_loss(model: RecurrentModel, X, y) -> float:
    yhat, _ = _forward(model.params, np.asarray(X, dtype=float))
    return float(np.mean((yhat - np.asarray(y, dtype=float)) ** 2))


def gradient_check(model: RecurrentModel, sample, step: float = 1e-5,
                   grad_fn: Callable | None = None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``sample`` is ``(X, y)``; dropout is disabled.  The relative error of one
    entry is ``|a - n| / max(|a|, |n|, floor)``; the floor sits above the
    central-difference roundoff (about eps * loss / step) so entries with
    vanishing gradients are compared absolutely.
    """
    X, y = sample
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if X.size == 0 or y.size == 0:
        raise TrainingError("gradient check needs a nonempty sample")
    grad_fn = grad_fn or loss_and_grad
    _, analytic = grad_fn(model, X, y)
    probe = model.copy()
    worst = 0.0
    for name in PARAM_NAMES:
        theta = probe.params[name]
        flat = theta.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = batch_loss(probe, X, y)
            flat[j] = orig - step
            lm = batch_loss(probe, X, y)
            flat[j] = orig
            num = (lp - lm) / (2 * step)
            a = analytic[name].reshape(-1)[j]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
    return worst


# --- training -----------------------------------------------------------------

def training_set(levels: np.ndarray, input_len: int = 50, stride: int = 1,
                 epsilon_base: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and next-day targets from every ``input_len + 1`` day slice.

    Each slice is expressed as percent change from its first day.
    """
    levels = np.asarray(levels, dtype=float)
    X, y = [], []
    for s in range(0, len(levels) - input_len, stride):
        sl = levels[s:s + input_len + 1]
        if sl[0] == 0 and not epsilon_base:
            continue
        d = pct_change(sl, epsilon_base=epsilon_base).deltas
        X.append(d[:-1])
        y.append(d[-1])
    if not X:
        return np.empty((0, input_len)), np.empty(0)
    return np.array(X), np.array(y)


def windows_training_set(windows: Sequence[NormalizedWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Inputs/targets from windows of ``input_len + 1`` days (last day is the target)."""
    if not windows:
        return np.empty((0, 0)), np.empty(0)
    X = np.array([w.deltas[:-1] for w in windows])
    y = np.array([w.deltas[-1] for w in windows])
    return X, y


def train(model: RecurrentModel, X, y, config: NetConfig | None = None
          ) -> tuple[RecurrentModel, list[float]]:
    """Fit a copy of ``model``; returns it with the per-batch loss trace.

    ``X`` may also be a list of :class:`NormalizedWindow` of length
    ``input_len + 1``, in which case ``y`` is ignored.
    """
    config = config or model.config
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], NormalizedWindow):
        X, y = windows_training_set(X)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise TrainingError("empty training set")
    if X.shape[1] != config.input_len or len(y) != len(X):
        raise TrainingError(f"training inputs must be (n, {config.input_len}) with n targets")
    out = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    cache = {k: np.zeros_like(v) for k, v in out.params.items()}
    trace = []
    n = len(X)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            masks = _masks(rng, config, len(idx), config.input_len)
            loss, grads = loss_and_grad(out, X[idx], y[idx], masks)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {s // config.batch_size}")
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = config.clip_norm / norm if norm > config.clip_norm else 1.0
            for k, g in grads.items():
                g = g * scale
                cache[k] = config.rho * cache[k] + (1 - config.rho) * g * g
                out.params[k] -= config.learning_rate * g / (np.sqrt(cache[k]) + config.epsilon)
            trace.append(loss)
    out.trained = True
    out.config = config
    return out, trace


# --- inference ----------------------------------------------------------------

def _predict_batch(model: RecurrentModel, X: np.ndarray) -> np.ndarray:
    yhat, _ = _forward(model.params, np.asarray(X, dtype=float))
    return yhat


def _check_len(model, deltas):
    n = model.config.input_len
    if len(deltas) != n:
        raise ValueError(f"expected a window of {n} days, got {len(deltas)}")


def _deltas(window) -> np.ndarray:
    return np.asarray(window.deltas if isinstance(window, NormalizedWindow) else window, dtype=float)


def predict_day(model: RecurrentModel, window) -> float:
    d = _deltas(window)
    _check_len(model, d)
    return float(_predict_batch(model, d[None, :])[0])


_MIN_RATIO = 1e-6


def _rollout(model: RecurrentModel, frames: np.ndarray, steps: int) -> np.ndarray:
    """Autoregressively extend each row of ``frames`` by ``steps`` predictions.

    ``frames`` holds deltas on each row's first day; so does the output.  The
    sliding input is re-based on its own first day before every step, which
    is the form the network was trained on.
    """
    ratio = 1.0 + np.asarray(frames, dtype=float)
    out = np.empty((len(ratio), steps))
    for k in range(steps):
        head = np.maximum(ratio[:, :1], _MIN_RATIO)
        nxt = head[:, 0] * (1.0 + _predict_batch(model, ratio / head - 1.0))
        nxt = np.maximum(nxt, _MIN_RATIO)
        out[:, k] = nxt - 1.0
        ratio = np.concatenate([ratio[:, 1:], nxt[:, None]], axis=1)
    return out


def predict_window(model: RecurrentModel, seed_window, steps: int | None = None) -> np.ndarray:
    """Generate the next window from ``seed_window`` alone (deltas on the seed's base)."""
    d = _deltas(seed_window)
    _check_len(model, d)
    return _rollout(model, d[None, :], steps or model.config.input_len)[0]


def _step(params, x, state):
    """Advance both layers by one day for a batch of scalar inputs ``x``."""
    h1, c1, h2, c2 = state
    _, (h1, c1), _ = _lstm_forward(x[:, None, None], params["W1"], params["U1"], params["b1"], h1, c1)
    _, (h2, c2), _ = _lstm_forward(h1[:, None, :], params["W2"], params["U2"], params["b2"], h2, c2)
    return h2 @ params["w_out"] + params["b_out"][0], (h1, c1, h2, c2)


def _zero_state(config, B):
    return (np.zeros((B, config.layer1_units)), np.zeros((B, config.layer1_units)),
            np.zeros((B, config.layer2_units)), np.zeros((B, config.layer2_units)))


def _history_rollout(model, history: np.ndarray, snapshots: Sequence[int], steps: int) -> np.ndarray:
    """Run the state over ``history`` once and, from the state after each
    index in ``snapshots``, generate ``steps`` further days."""
    p = model.params
    state = _zero_state(model.config, 1)
    saved = {}
    first = {}
    snaps = set(snapshots)
    for t, x in enumerate(history):
        yhat, state = _step(p, np.array([x]), state)
        if t + 1 in snaps:
            saved[t + 1] = state
            first[t + 1] = yhat[0]
    keys = list(snapshots)
    state = tuple(np.concatenate([saved[k][j] for k in keys]) for j in range(4))
    nxt = np.array([first[k] for k in keys])
    out = np.empty((len(keys), steps))
    for s in range(steps):
        out[:, s] = nxt
        if s + 1 < steps:
            nxt, state = _step(p, nxt, state)
    return out


def predict_full_history(model: RecurrentModel, history: Sequence[NormalizedWindow],
                         steps: int | None = None) -> np.ndarray:
    """Generate the window after ``history`` with state carried over all of it.

    The concatenated history is re-expressed relative to its first day, and
    the output is on that same base.
    """
    if not history:
        raise ValueError("empty history")
    levels = np.concatenate([w.levels() for w in history])
    d = pct_change(levels, epsilon_base=True).deltas
    return _history_rollout(model, d, [len(d)], steps or model.config.input_len)[0]


def _to_window_frame(levels: np.ndarray, ref: float) -> np.ndarray:
    """Express predicted levels relative to their first day (scale-only fallback when it is <= 0)."""
    base = levels[0] if levels[0] > 0 else abs(ref) or 1.0
    return (levels - levels[0]) / base


def predict_series(model: RecurrentModel, levels: np.ndarray, method: str, ticker: str = "",
                   window_size: int | None = None, epsilon_base: bool = True) -> PredictedSeries:
    """Predicted signal for every complete window after the first (seed) window.

    Predicted window ``w`` covers series days ``ws * (w + 1) .. ws * (w + 2) - 1``.
    """
    ws = window_size or model.config.input_len
    if ws != model.config.input_len:
        raise ValueError("window size must equal the model input length")
    levels = np.asarray(levels, dtype=float)
    n_win = len(levels) // ws - 1
    if n_win < 1:
        return PredictedSeries(method, ticker, np.empty(0), ws, ws)

    def base_of(x):
        return x if x != 0 else (1.0 if epsilon_base else np.nan)

    if method == DAY_BASED:
        frames = np.array([levels[t - ws:t] for t in range(ws, ws * (n_win + 1))])
        bases = np.array([base_of(f[0]) for f in frames])
        pred = _predict_batch(model, (frames - frames[:, :1]) / bases[:, None])
        lv = (bases * (1.0 + pred)).reshape(n_win, ws)
        refs = levels[ws:ws * (n_win + 1):ws]
    elif method == WINDOW_BASED:
        seeds = np.array([levels[w * ws:(w + 1) * ws] for w in range(n_win)])
        bases = np.array([base_of(s[0]) for s in seeds])
        pred = _rollout(model, (seeds - seeds[:, :1]) / bases[:, None], ws)
        lv = bases[:, None] * (1.0 + pred)
        refs = bases
    elif method == WHOLE_HISTORY:
        base = base_of(levels[0])
        d = (levels[:ws * n_win] - levels[0]) / base
        pred = _history_rollout(model, d, [ws * (w + 1) for w in range(n_win)], ws)
        lv = base * (1.0 + pred)
        refs = np.full(n_win, base)
    else:
        raise ValueError(f"unknown prediction method {method!r}")
    values = np.concatenate([_to_window_frame(lv[w], refs[w]) for w in range(n_win)])
    if not np.all(np.isfinite(values)):
        raise TrainingError(f"{ticker}/{method}: non-finite predictions (zero base volume?)")
    return PredictedSeries(method, ticker, values, ws, ws, lv.reshape(-1))


def prediction_mse(ps: PredictedSeries, levels: np.ndarray) -> float:
    """Mean squared error of predicted levels, each window scaled by its true first day."""
    if ps.levels is None:
        raise ValueError("predicted series carries no levels")
    levels = np.asarray(levels, dtype=float)
    n = len(ps.levels)
    true = levels[ps.alignment:ps.alignment + n]
    if len(true) != n:
        raise ValueError("true series shorter than the prediction")
    refs = np.repeat(true[::ps.window_size], ps.window_size)[:n]
    return float(np.mean(((ps.levels - true) / refs) ** 2))


# --- persistence --------------------------------------------------------------

def save_model(model: RecurrentModel, path: str | Path) -> None:
    payload = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "trained": model.trained,
        "params": {k: {"shape": list(model.params[k].shape),
                       "data": model.params[k].reshape(-1).tolist()} for k in PARAM_NAMES},
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> RecurrentModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != FORMAT or obj.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a {FORMAT} v{FORMAT_VERSION} model")
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj["params"].items()}
    return RecurrentModel(NetConfig(**obj["config"]), params, obj["trained"])


def write_loss_csv(trace: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])


def write_predictions_csv(series: Sequence[PredictedSeries], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "method", "window", "day", "absolute_day", "value"])
        for ps in series:
            for i, v in enumerate(ps.values):
                w.writerow([ps.ticker, ps.method, i // ps.window_size, i % ps.window_size,
                            ps.alignment + i, repr(float(v))])


def read_predictions_csv(path: str | Path, window_size: int = 50) -> list[PredictedSeries]:
    groups: dict[tuple[str, str], list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault((row["ticker"], row["method"]), []).append(
                (int(row["absolute_day"]), float(row["value"])))
    out = []
    for (ticker, method), rows in groups.items():
        rows.sort()
        out.append(PredictedSeries(method, ticker, np.array([v for _, v in rows]), rows[0][0], window_size))
    return out
