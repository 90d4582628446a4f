"""Term matrices, TF-IDF, extremely randomized tree feature ranking and an
interpretable CART classifier for litigation releases.

Labels are integers: 0 = non-insider, 1 = insider.
"""
from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import INSIDER, NON_INSIDER, LabeledCase

CLASSES = (NON_INSIDER, INSIDER)
INSIDER_BLUE = "#7aa6d6"
NON_INSIDER_BROWN = "#c8915a"
PATH_WHITE = "#ffffff"

_TOKEN_RE = re.compile(r"[^\W\d_]+(?:-[^\W\d_]+)*")


class ModelError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased runs of letters (hyphenated compounds kept whole), at least 2 long."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) >= 2]


@dataclass
class TermMatrix:
    vocabulary: list[str]
    rows: sp.csr_matrix
    labels: np.ndarray | None = None
    ids: list[str] | None = None

    def __post_init__(self):
        self.rows = sp.csr_matrix(self.rows, dtype=float)
        if self.rows.shape[1] != len(self.vocabulary):
            raise ModelError("row width differs from vocabulary size")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ModelError("duplicate terms in vocabulary")

    @property
    def shape(self):
        return self.rows.shape

    def column(self, term: str) -> np.ndarray:
        return self.rows[:, self.vocabulary.index(term)].toarray().ravel()


def labels_of(cases: Sequence[LabeledCase]) -> np.ndarray:
    return np.array([1 if c.is_insider else 0 for c in cases], dtype=int)


def build_term_matrix(cases: Sequence[LabeledCase | str],
                      tokenizer: Callable[[str], list[str]] = tokenize) -> TermMatrix:
    """Count matrix over the sorted union of terms (title + body for cases)."""
    if not cases:
        raise ModelError("cannot build a term matrix from zero documents")
    texts = [c.text if isinstance(c, LabeledCase) else c for c in cases]
    counts = [Counter(tokenizer(t)) for t in texts]
    vocab = sorted(set().union(*counts))
    index = {t: j for j, t in enumerate(vocab)}
    data, indices, indptr = [], [], [0]
    for cnt in counts:
        for term in sorted(cnt, key=index.__getitem__):
            indices.append(index[term])
            data.append(cnt[term])
        indptr.append(len(indices))
    rows = sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64), indptr),
                         shape=(len(texts), len(vocab)))
    labels = ids = None
    if isinstance(cases[0], LabeledCase):
        labels = labels_of(cases)
        ids = [c.case.id for c in cases]
    return TermMatrix(vocab, rows, labels, ids)


def vectorize(text: str, vocabulary: Sequence[str], tokenizer=tokenize) -> np.ndarray:
    index = {t: j for j, t in enumerate(vocabulary)}
    vec = np.zeros(len(vocabulary))
    for tok in tokenizer(text):
        j = index.get(tok)
        if j is not None:
            vec[j] += 1
    return vec


def apply_tfidf(matrix: TermMatrix, chunk_rows: int = 2048, smooth: bool = False) -> TermMatrix:
    """Weight counts by ``tf * ln(N / df)``, one block of rows at a time.

    With ``smooth`` the factor is ``ln((1 + N) / (1 + df)) + 1``.
    """
    n = matrix.rows.shape[0]
    if n == 0:
        raise ModelError("empty matrix")
    df = np.bincount(matrix.rows.indices, minlength=matrix.rows.shape[1]).astype(float)
    with np.errstate(divide="ignore"):
        if smooth:
            idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
        else:
            idf = np.where(df > 0, np.log(n / np.maximum(df, 1.0)), 0.0)
    blocks = []
    scale = sp.diags(idf)
    for s in range(0, n, chunk_rows):
        blocks.append(matrix.rows[s:s + chunk_rows] @ scale)
    weighted = sp.vstack(blocks).tocsr() if blocks else matrix.rows.copy()
    weighted.eliminate_zeros()
    return TermMatrix(list(matrix.vocabulary), weighted, matrix.labels, matrix.ids)


def top_tfidf_terms(weighted: TermMatrix, k: int = 20) -> list[tuple[str, float]]:
    """Terms with the largest single-document TF-IDF weight (diagnostic only)."""
    if weighted.rows.nnz == 0:
        return []
    peak = weighted.rows.max(axis=0).toarray().ravel()
    order = sorted(range(len(peak)), key=lambda j: (-peak[j], weighted.vocabulary[j]))[:k]
    return [(weighted.vocabulary[j], float(peak[j])) for j in order if peak[j] > 0]


# --- class weights and impurity ---------------------------------------------------

def resolve_class_weights(spec, labels: np.ndarray) -> np.ndarray:
    """Per-class weights from ``"uniform"``, ``"balanced"``, ``"maximum"`` or a mapping.

    ``maximum`` is inverse class frequency with the insider class boosted ten-fold.
    """
    labels = np.asarray(labels, dtype=int)
    if spec is None or spec == "uniform":
        return np.ones(2)
    if isinstance(spec, str):
        n = len(labels)
        counts = np.bincount(labels, minlength=2).astype(float)
        inv = np.where(counts > 0, n / (2.0 * np.maximum(counts, 1.0)), 1.0)
        if spec == "balanced":
            return inv
        if spec == "maximum":
            return inv * np.array([1.0, 10.0])
        raise ModelError(f"unknown class weight preset {spec!r}")
    if isinstance(spec, Mapping):
        w = np.ones(2)
        for key, val in spec.items():
            idx = CLASSES.index(key) if isinstance(key, str) else int(key)
            w[idx] = float(val)
        if (w <= 0).any():
            raise ModelError("class weights must be positive")
        return w
    w = np.asarray(spec, dtype=float)
    if w.shape != (2,) or (w <= 0).any():
        raise ModelError("class weights must be two positive numbers")
    return w


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.dot(p, p))


# --- extremely randomized trees ----------------------------------------------------

@dataclass
class FeatureRanking:
    vocabulary: list[str]
    importances: np.ndarray

    @property
    def order(self) -> list[str]:
        idx = sorted(range(len(self.vocabulary)), key=lambda j: (-self.importances[j], j))
        return [self.vocabulary[j] for j in idx]

    def rank_of(self, term: str) -> int:
        return self.order.index(term) + 1


def _extra_tree_importances(X: sp.csr_matrix, y: np.ndarray, sw: np.ndarray, k: int,
                            rng: np.random.Generator, min_samples_split: int = 2) -> np.ndarray:
    n_features = X.shape[1]
    imp = np.zeros(n_features)
    total_w = sw.sum()
    stack = [np.arange(X.shape[0])]
    while stack:
        idx = stack.pop()
        counts = np.bincount(y[idx], weights=sw[idx], minlength=2)
        if len(idx) < min_samples_split or np.count_nonzero(counts) < 2:
            continue
        Xn = X[idx].tocsc()
        hi = Xn.max(axis=0).toarray().ravel()
        lo = Xn.min(axis=0).toarray().ravel()
        usable = np.flatnonzero(hi > lo)
        if usable.size == 0:
            continue
        cand = rng.choice(usable, size=min(k, usable.size), replace=False)
        node_imp = counts.sum() * _gini(counts)
        best = None
        for j in cand:
            t = rng.uniform(lo[j], hi[j])
            go_left = Xn[:, j].toarray().ravel() <= t
            cl = np.bincount(y[idx][go_left], weights=sw[idx][go_left], minlength=2)
            cr = counts - cl
            gain = node_imp - cl.sum() * _gini(cl) - cr.sum() * _gini(cr)
            if best is None or gain > best[0]:
                best = (gain, j, go_left)
        gain, j, go_left = best
        imp[j] += max(gain, 0.0) / total_w
        stack.append(idx[~go_left])
        stack.append(idx[go_left])
    s = imp.sum()
    return imp / s if s > 0 else imp


def rank_features(matrix: TermMatrix, labels=None, n_trees: int = 100, k_candidates: int | None = None,
                  class_weights="maximum", seed: int = 0, n_jobs: int = 1) -> FeatureRanking:
    """Impurity-decrease importances averaged over an extremely randomized forest.

    Each split draws ``k_candidates`` non-constant terms (default
    ``sqrt(|vocabulary|)``) and a uniform threshold inside each one's range
    at the node, keeping the best; no bootstrap.  Per-tree generators are
    spawned from ``seed`` so results do not depend on ``n_jobs``.
    """
    y = np.asarray(matrix.labels if labels is None else labels, dtype=int)
    X = matrix.rows
    if len(y) != X.shape[0]:
        raise ModelError("labels must be parallel to rows")
    if n_trees < 1:
        raise ModelError("n_trees must be >= 1")
    n_features = X.shape[1]
    if len(np.unique(y)) < 2 or n_features == 0:
        return FeatureRanking(list(matrix.vocabulary), np.zeros(n_features))
    k = k_candidates or max(1, int(math.sqrt(n_features)))
    sw = resolve_class_weights(class_weights, y)[y]
    seeds = np.random.SeedSequence(seed).spawn(n_trees)

    def one(ss):
        return _extra_tree_importances(X, y, sw, k, np.random.default_rng(ss))

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            per_tree = list(pool.map(one, seeds))
    else:
        per_tree = [one(ss) for ss in seeds]
    imp = np.mean(per_tree, axis=0)
    s = imp.sum()
    return FeatureRanking(list(matrix.vocabulary), imp / s if s > 0 else imp)


def reduce_features(matrix: TermMatrix, ranking: FeatureRanking) -> TermMatrix:
    if list(ranking.vocabulary) != list(matrix.vocabulary):
        raise ModelError("ranking was computed on a different vocabulary")
    keep = np.flatnonzero(ranking.importances > 0)
    if keep.size == 0:
        raise ModelError("every feature has zero importance; nothing to keep")
    return TermMatrix([matrix.vocabulary[j] for j in keep], matrix.rows[:, keep],
                      matrix.labels, matrix.ids)


def write_ranking_csv(ranking: FeatureRanking, path: str | Path) -> None:
    pos = {t: r for r, t in enumerate(ranking.order, start=1)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "importance", "rank"])
        for term in ranking.order:
            w.writerow([term, repr(float(ranking.importances[ranking.vocabulary.index(term)])), pos[term]])


# --- decision tree ------------------------------------------------------------

@dataclass
class Node:
    id: int
    depth: int
    class_counts: list[float]
    n_samples: int
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    @property
    def label(self) -> str:
        return CLASSES[int(np.argmax(self.class_counts))]


@dataclass
class DecisionTreeModel:
    vocabulary: list[str]
    nodes: list[Node]
    class_weights: list[float]
    max_depth: int | None = None
    min_leaf: int = 1
    seed: int = 0

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    def to_json(self) -> dict:
        return {
            "format": "insiderscan-tree",
            "version": 1,
            "vocabulary": self.vocabulary,
            "class_weights": self.class_weights,
            "params": {"max_depth": self.max_depth, "min_leaf": self.min_leaf, "seed": self.seed},
            "nodes": [n.__dict__ for n in self.nodes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DecisionTreeModel":
        p = obj["params"]
        return cls(obj["vocabulary"], [Node(**n) for n in obj["nodes"]], obj["class_weights"],
                   p["max_depth"], p["min_leaf"], p["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DecisionTreeModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _best_split(X: sp.csc_matrix, y: np.ndarray, sw: np.ndarray, min_leaf: int,
                chunk: int = 256):
    """Best (feature, threshold) by weighted Gini decrease; ties go to the lowest
    feature index, then the lowest threshold.  Left branch is ``x <= threshold``."""
    n = X.shape[0]
    counts = np.bincount(y, weights=sw, minlength=2)
    parent = counts.sum() * _gini(counts)
    hi = X.max(axis=0).toarray().ravel()
    lo = X.min(axis=0).toarray().ravel()
    usable = np.flatnonzero(hi > lo)
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), y] = sw
    best_gain, best_f, best_t = -np.inf, -1, 0.0
    pos = np.arange(1, n)  # samples on the left after split position i
    for s in range(0, usable.size, chunk):
        cols = usable[s:s + chunk]
        V = X[:, cols].toarray()
        order = np.argsort(V, axis=0, kind="stable")
        Vs = np.take_along_axis(V, order, axis=0)
        cl0 = np.cumsum(onehot[order, 0], axis=0)[:-1]
        cl1 = np.cumsum(onehot[order, 1], axis=0)[:-1]
        cr0 = counts[0] - cl0
        cr1 = counts[1] - cl1
        wl = cl0 + cl1
        wr = cr0 + cr1
        with np.errstate(divide="ignore", invalid="ignore"):
            imp_l = np.where(wl > 0, wl - (cl0 ** 2 + cl1 ** 2) / wl, 0.0)
            imp_r = np.where(wr > 0, wr - (cr0 ** 2 + cr1 ** 2) / wr, 0.0)
        gain = parent - imp_l - imp_r
        valid = (Vs[:-1] < Vs[1:]) & (pos[:, None] >= min_leaf) & ((n - pos)[:, None] >= min_leaf)
        gain = np.where(valid, gain, -np.inf)
        top = gain.max() if gain.size else -np.inf
        if not np.isfinite(top):
            continue
        tol = 1e-12 * max(1.0, abs(top))
        # chunks arrive in increasing column order, so an equal gain never displaces
        if top > best_gain + tol:
            ii, jj = np.nonzero(gain >= top - tol)
            best_f, best_t = min(zip(cols[jj].tolist(), Vs[ii, jj].tolist()))
            best_gain = top
    if best_f < 0:
        return None
    return best_f, best_t, best_gain


def train_decision_tree(matrix: TermMatrix, labels=None, max_depth: int | None = None, min_leaf: int = 1,
                        class_weights="uniform", seed: int = 0) -> DecisionTreeModel:
    """Greedy CART on weighted Gini; stops at ``max_depth``, ``min_leaf`` or purity.

    The procedure is deterministic; ``seed`` is recorded with the model only.
    """
    y = np.asarray(matrix.labels if labels is None else labels, dtype=int)
    X = matrix.rows.tocsc()
    if X.shape[0] < 2:
        raise ModelError("need at least two rows to train")
    if len(y) != X.shape[0]:
        raise ModelError("labels must be parallel to rows")
    cw = resolve_class_weights(class_weights, y)
    sw = cw[y]
    nodes: list[Node] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        counts = np.bincount(y[idx], weights=sw[idx], minlength=2)
        node = Node(len(nodes), depth, counts.tolist(), int(len(idx)))
        nodes.append(node)
        if np.count_nonzero(counts) < 2 or (max_depth is not None and depth >= max_depth) \
                or len(idx) < 2 * min_leaf:
            return node.id
        split = _best_split(X[idx], y[idx], sw[idx], min_leaf)
        if split is None:
            return node.id
        f, t, _ = split
        col = X[idx][:, f].toarray().ravel()
        node.feature, node.threshold = int(f), float(t)
        node.left = grow(idx[col <= t], depth + 1)
        node.right = grow(idx[col > t], depth + 1)
        return node.id

    grow(np.arange(X.shape[0]), 0)
    return DecisionTreeModel(list(matrix.vocabulary), nodes, cw.tolist(), max_depth, min_leaf, seed)


@dataclass(frozen=True)
class PathStep:
    node: int
    term: str | None
    threshold: float | None
    branch: str | None  # "<=", ">" or None at the leaf


def classify_case(model: DecisionTreeModel, case_vector, vocabulary: Sequence[str] | None = None
                  ) -> tuple[str, list[PathStep]]:
    """Label of the reached leaf and every node visited on the way."""
    if isinstance(case_vector, Mapping):
        index = {t: j for j, t in enumerate(model.vocabulary)}
        vec = np.zeros(len(model.vocabulary))
        for term, v in case_vector.items():
            if term in index:
                vec[index[term]] = v
    else:
        if vocabulary is not None and list(vocabulary) != list(model.vocabulary):
            raise ModelError("vector vocabulary does not match the model vocabulary")
        vec = np.asarray(case_vector.toarray() if sp.issparse(case_vector) else case_vector,
                         dtype=float).ravel()
        if vec.size != len(model.vocabulary):
            raise ModelError(f"vector has {vec.size} entries, model vocabulary has {len(model.vocabulary)}")
    path = []
    node = model.nodes[0]
    while not node.is_leaf:
        go_left = vec[node.feature] <= node.threshold
        path.append(PathStep(node.id, model.vocabulary[node.feature], node.threshold,
                             "<=" if go_left else ">"))
        node = model.nodes[node.left if go_left else node.right]
    path.append(PathStep(node.id, None, None, None))
    return node.label, path


def predict_labels(model: DecisionTreeModel, matrix: TermMatrix) -> np.ndarray:
    if list(matrix.vocabulary) != list(model.vocabulary):
        raise ModelError("matrix vocabulary does not match the model vocabulary")
    X = matrix.rows
    return np.array([CLASSES.index(classify_case(model, X[i].toarray().ravel())[0])
                     for i in range(X.shape[0])], dtype=int)


def _fmt(t: float) -> str:
    return f"{t:g}"


def export_tree_dot(model: DecisionTreeModel, highlight=None) -> str:
    """Graphviz DOT: insider-majority nodes blue, non-insider brown, the
    decision path of ``highlight`` (if given) white."""
    on_path = set()
    if highlight is not None:
        _, path = classify_case(model, highlight)
        on_path = {s.node for s in path}
    lines = [
        "digraph DecisionTree {",
        '  node [shape=box, style="filled,rounded", fontname="Helvetica"];',
        '  edge [fontname="Helvetica"];',
    ]
    for n in model.nodes:
        counts = ", ".join(f"{c:g}" for c in n.class_counts)
        head = f"{model.vocabulary[n.feature]} <= {_fmt(n.threshold)}\\n" if not n.is_leaf else ""
        label = f"{head}samples = {n.n_samples}\\nweighted = [{counts}]\\nclass = {n.label}"
        label = label.replace('"', '\\"')
        if n.id in on_path:
            color = PATH_WHITE
        else:
            color = INSIDER_BLUE if n.label == INSIDER else NON_INSIDER_BROWN
        lines.append(f'  n{n.id} [label="{label}", fillcolor="{color}"];')
    for n in model.nodes:
        if n.is_leaf:
            continue
        lines.append(f'  n{n.id} -> n{n.left} [label="≤ {_fmt(n.threshold)}"];')
        lines.append(f'  n{n.id} -> n{n.right} [label="> {_fmt(n.threshold)}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def training_metrics(model: DecisionTreeModel, matrix: TermMatrix, labels=None) -> dict:
    y = np.asarray(matrix.labels if labels is None else labels, dtype=int)
    pred = predict_labels(model, matrix)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return {
        "n": int(len(y)),
        "accuracy": float(np.mean(pred == y)) if len(y) else 0.0,
        "insider_recall": tp / (tp + fn) if tp + fn else 0.0,
        "insider_precision": tp / (tp + fp) if tp + fp else 0.0,
        "depth": model.depth,
        "n_nodes": len(model.nodes),
        "n_features": len(model.vocabulary),
    }
