"""From-scratch random-forest regression over embedding features, with
k-fold R2 scoring, permutation importance, and a versioned binary format.

Trees are variance-reduction regression trees built on bootstrap resamples
with per-split random feature subsets. Split thresholds are training feature
values with "x <= t goes left" semantics, so predictions are invariant under
any strictly increasing transform applied to a feature column in both train
and eval data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

_MAGIC = b"TLRF"
_VERSION = 1


class ForestFormatError(ValueError):
    """Raised when a serialized forest cannot be read."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 5
    features_per_split: int = 8
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1 or self.features_per_split < 1:
            raise ValueError("forest parameters must be positive")


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray   # int32, -1 for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray      # int32
    right: np.ndarray     # int32
    value: np.ndarray     # float64 leaf means (internal nodes carry their mean too)


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[Tree, ...]
    params: ForestParams
    n_features: int
    degenerate: bool = False

    def used_features(self) -> np.ndarray:
        """Boolean mask of features appearing in at least one split."""
        used = np.zeros(self.n_features, dtype=bool)
        for t in self.trees:
            f = t.feature[t.feature >= 0]
            used[f] = True
        return used


@dataclass(frozen=True)
class ModelScore:
    r2_per_fold: tuple[float, ...]
    r2_mean: float
    n_effective: int
    skipped_folds: tuple[int, ...] = ()
    degenerate_folds: tuple[int, ...] = ()


@dataclass(frozen=True)
class ImportanceVector:
    values: np.ndarray  # (n_features,) mean R2 drop per permuted feature
    repeats: int
    seed: int
    baseline_r2: float


@njit(cache=True)
def _fit_tree(X, y, samp, max_depth, min_leaf, mtry, seed):  # pragma: no cover - compiled
    np.random.seed(seed)
    n = samp.shape[0]
    n_features = X.shape[1]
    max_nodes = 2 * (n // min_leaf + 1) + 1

    feat = np.full(max_nodes, -1, np.int32)
    thr = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    val = np.zeros(max_nodes, np.float64)

    idx = samp.copy()
    scratch = np.empty(n, np.int64)

    st_node = np.empty(max_nodes, np.int32)
    st_a = np.empty(max_nodes, np.int64)
    st_b = np.empty(max_nodes, np.int64)
    st_d = np.empty(max_nodes, np.int32)
    st_node[0] = 0
    st_a[0] = 0
    st_b[0] = n
    st_d[0] = 0
    top = 1
    n_nodes = 1

    featperm = np.empty(n_features, np.int32)
    for i in range(n_features):
        featperm[i] = i

    while top > 0:
        top -= 1
        node = st_node[top]
        a = st_a[top]
        b = st_b[top]
        depth = st_d[top]
        m = b - a

        s = 0.0
        for i in range(a, b):
            s += y[idx[i]]
        val[node] = s / m

        if depth >= max_depth or m < 2 * min_leaf or n_nodes + 2 > max_nodes:
            continue

        # draw mtry distinct candidate features (partial Fisher-Yates)
        k = mtry if mtry < n_features else n_features
        for i in range(k):
            j = i + np.random.randint(0, n_features - i)
            tmp = featperm[i]
            featperm[i] = featperm[j]
            featperm[j] = tmp

        base = s * s / m
        best_gain = 1e-12
        best_f = -1
        best_t = 0.0
        vbuf = np.empty(m, np.float64)

        for fi in range(k):
            f = featperm[fi]
            for i in range(m):
                vbuf[i] = X[idx[a + i], f]
            order = np.argsort(vbuf)
            csum = 0.0
            for pos in range(m - 1):
                o = order[pos]
                csum += y[idx[a + o]]
                nl = pos + 1
                nr = m - nl
                if nr < min_leaf:
                    break
                if nl < min_leaf:
                    continue
                vcur = vbuf[o]
                if vcur == vbuf[order[pos + 1]]:
                    continue  # cannot split inside a tie group
                gain = csum * csum / nl + (s - csum) * (s - csum) / nr - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_t = vcur

        if best_f < 0:
            continue

        # stable partition of idx[a:b] on X[., best_f] <= best_t
        nl = 0
        nr = 0
        for i in range(a, b):
            if X[idx[i], best_f] <= best_t:
                idx[a + nl] = idx[i]
                nl += 1
            else:
                scratch[nr] = idx[i]
                nr += 1
        for i in range(nr):
            idx[a + nl + i] = scratch[i]

        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_t
        left[node] = left_id
        right[node] = right_id

        st_node[top] = left_id
        st_a[top] = a
        st_b[top] = a + nl
        st_d[top] = depth + 1
        top += 1
        st_node[top] = right_id
        st_a[top] = a + nl
        st_b[top] = b
        st_d[top] = depth + 1
        top += 1

    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], val[:n_nodes]


@njit(cache=True)
def _predict_tree_into(feat, thr, left, right, val, X, out):  # pragma: no cover - compiled
    for r in range(X.shape[0]):
        node = 0
        while feat[node] >= 0:
            if X[r, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] += val[node]


def fit_forest(X, y, params: ForestParams = ForestParams()) -> ForestModel:
    """Train a regression forest; deterministic for a fixed params.seed.

    Rows with missing targets must already be dropped. A zero-variance
    target produces a flagged constant-predictor model.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} and y {y.shape} are not aligned")
    n, p = X.shape
    if n < 2 * params.min_leaf:
        raise ValueError(f"need at least {2 * params.min_leaf} rows, got {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values (drop missing targets first)")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")

    if np.ptp(y) == 0.0:
        const = Tree(feature=np.array([-1], np.int32), threshold=np.zeros(1),
                     left=np.array([-1], np.int32), right=np.array([-1], np.int32),
                     value=np.array([y[0]], np.float64))
        return ForestModel(trees=(const,), params=params, n_features=p, degenerate=True)

    rng = np.random.default_rng(params.seed)
    trees = []
    for t in range(params.n_trees):
        if params.bootstrap:
            samp = rng.integers(0, n, n).astype(np.int64)
        else:
            samp = np.arange(n, dtype=np.int64)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        arrays = _fit_tree(X, y, samp, params.max_depth, params.min_leaf,
                           params.features_per_split, tree_seed)
        trees.append(Tree(*arrays))
    return ForestModel(trees=tuple(trees), params=params, n_features=p)


def predict_matrix(model: ForestModel, X) -> np.ndarray:
    """Mean of per-tree leaf values for every row of X."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"X must be (n, {model.n_features})")
    out = np.zeros(X.shape[0], dtype=np.float64)
    for t in model.trees:
        _predict_tree_into(t.feature, t.threshold, t.left, t.right, t.value, X, out)
    out /= len(model.trees)
    return out


def predict(model: ForestModel, x) -> float:
    """Prediction for a single feature vector."""
    return float(predict_matrix(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])


def _r2(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, bool]:
    """Held-out R2 = 1 - SSE/SST about the held-out mean.

    SST = 0 is defined as 1.0 when SSE = 0 and 0.0 otherwise, flagged.
    """
    resid = y_true - y_pred
    sse = float(np.dot(resid, resid))
    dev = y_true - y_true.mean()
    sst = float(np.dot(dev, dev))
    if sst == 0.0:
        return (1.0 if sse == 0.0 else 0.0), True
    return 1.0 - sse / sst, False


def r2_score(y_true, y_pred) -> float:
    value, _ = _r2(np.asarray(y_true, dtype=np.float64), np.asarray(y_pred, dtype=np.float64))
    return value


def random_fold_ids(n: int, k: int, seed: int) -> np.ndarray:
    """Balanced random fold assignment: seeded permutation split into k
    nearly equal contiguous chunks."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(perm, k)):
        fold[chunk] = f
    return fold


def kfold_r2(X, y, k: int, params: ForestParams = ForestParams(),
             fold_assignment: np.ndarray | None = None) -> ModelScore:
    """k-fold cross-validated R2; accepts externally supplied fold ids
    (e.g. spatial groups). Folds with fewer than 2 rows are skipped and
    flagged."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n = X.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if fold_assignment is None:
        fold_assignment = random_fold_ids(n, k, params.seed)
    else:
        fold_assignment = np.asarray(fold_assignment, dtype=np.int64)
        if fold_assignment.shape != (n,):
            raise ValueError("fold_assignment must cover all rows")

    fold_labels = np.unique(fold_assignment)
    r2s: list[float] = []
    skipped: list[int] = []
    degenerate: list[int] = []
    n_effective = 0
    for f in fold_labels:
        test = fold_assignment == f
        n_test = int(test.sum())
        if n_test < 2:
            skipped.append(int(f))
            continue
        train = ~test
        model = fit_forest(X[train], y[train], params)
        pred = predict_matrix(model, X[test])
        value, flag = _r2(y[test], pred)
        if flag:
            degenerate.append(int(f))
        r2s.append(value)
        n_effective += n_test
    if not r2s:
        raise ValueError("no fold had enough rows to evaluate")
    return ModelScore(r2_per_fold=tuple(r2s), r2_mean=float(np.mean(r2s)),
                      n_effective=n_effective, skipped_folds=tuple(skipped),
                      degenerate_folds=tuple(degenerate))


def permutation_importance(model: ForestModel, X_eval, y_eval,
                           repeats: int = 5, seed: int = 0) -> ImportanceVector:
    """Per-feature mean drop in R2 when that column is permuted.

    Features never used in any split have importance exactly 0 (permuting
    them cannot change predictions). Raw values are kept; clipping of
    negatives happens at the reporting layer.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X_eval = np.ascontiguousarray(X_eval, dtype=np.float64)
    y_eval = np.ascontiguousarray(y_eval, dtype=np.float64)
    if X_eval.shape[0] == 0:
        raise ValueError("X_eval is empty")
    baseline, _ = _r2(y_eval, predict_matrix(model, X_eval))
    used = model.used_features()
    rng = np.random.default_rng(seed)
    values = np.zeros(model.n_features, dtype=np.float64)
    work = X_eval.copy()
    n = X_eval.shape[0]
    for f in range(model.n_features):
        if not used[f]:
            # still consume the permutation stream so importances of other
            # features do not depend on which features happen to be unused
            for _ in range(repeats):
                rng.permutation(n)
            continue
        drops = 0.0
        original = work[:, f].copy()
        for _ in range(repeats):
            work[:, f] = original[rng.permutation(n)]
            r2_perm, _ = _r2(y_eval, predict_matrix(model, work))
            drops += baseline - r2_perm
        work[:, f] = original
        values[f] = drops / repeats
    return ImportanceVector(values=values, repeats=repeats, seed=seed, baseline_r2=baseline)


def save_forest(model: ForestModel, path: str | Path) -> None:
    """Serialize to the versioned little-endian TLRF binary format."""
    p = model.params
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIIBqBI", _VERSION, p.n_trees, p.max_depth, p.min_leaf,
                             p.features_per_split, int(p.bootstrap), p.seed,
                             int(model.degenerate), model.n_features))
        fh.write(struct.pack("<I", len(model.trees)))
        for t in model.trees:
            fh.write(struct.pack("<I", t.feature.shape[0]))
            fh.write(t.feature.astype("<i4").tobytes())
            fh.write(t.threshold.astype("<f8").tobytes())
            fh.write(t.left.astype("<i4").tobytes())
            fh.write(t.right.astype("<i4").tobytes())
            fh.write(t.value.astype("<f8").tobytes())


def load_forest(path: str | Path) -> ForestModel:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise ForestFormatError("bad magic: not a forest file")
    off = 4
    try:
        (version, n_trees, max_depth, min_leaf, mtry, bootstrap, seed,
         degenerate, n_features) = struct.unpack_from("<IIIIIBqBI", data, off)
        off += struct.calcsize("<IIIIIBqBI")
        if version != _VERSION:
            raise ForestFormatError(f"unsupported version {version}")
        (stored_trees,) = struct.unpack_from("<I", data, off)
        off += 4
        trees = []
        for _ in range(stored_trees):
            (n_nodes,) = struct.unpack_from("<I", data, off)
            off += 4
            arrays = []
            for dtype, width in (("<i4", 4), ("<f8", 8), ("<i4", 4), ("<i4", 4), ("<f8", 8)):
                end = off + n_nodes * width
                if end > len(data):
                    raise ForestFormatError("truncated forest file")
                arrays.append(np.frombuffer(data[off:end], dtype=dtype).copy())
                off += n_nodes * width
            trees.append(Tree(feature=arrays[0].astype(np.int32), threshold=arrays[1],
                              left=arrays[2].astype(np.int32), right=arrays[3].astype(np.int32),
                              value=arrays[4]))
    except struct.error as exc:
        raise ForestFormatError(f"truncated forest file: {exc}") from None
    params = ForestParams(n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf,
                          features_per_split=mtry, bootstrap=bool(bootstrap), seed=seed)
    return ForestModel(trees=tuple(trees), params=params, n_features=n_features,
                       degenerate=bool(degenerate))


def save_importance_csv(importance: ImportanceVector, path: str | Path) -> None:
    """Export (dim, importance) rows; negatives clipped at this layer only."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dim", "importance"])
        for i, v in enumerate(importance.values):
            writer.writerow([i, f"{max(0.0, float(v)):.12g}"])
