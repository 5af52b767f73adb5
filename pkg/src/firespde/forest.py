"""Random-forest classifier over severity classes of fire counts.

Trees are grown on bootstrap samples with Gini splits at midpoints of
sorted distinct values, ``mtry`` candidate features per node, no depth
cap and a minimum leaf size. Split search runs in numba.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .evaluation import U_CNT
from .exceptions import ParameterError

__all__ = [
    "N_CLASSES",
    "bin_label",
    "gini",
    "ForestModel",
    "train_forest",
    "predict_class_probs",
    "predict_class",
    "rf_predictive_cdf",
    "variable_importance",
    "write_forest",
    "read_forest",
]

N_CLASSES = len(U_CNT) + 1


def bin_label(cnt, bins=U_CNT):
    """Severity class: 0 for zero, ``c`` for ``u[c-1] < cnt <= u[c]``, last class above the top threshold."""
    cnt = np.asarray(cnt)
    if np.any(cnt < 0):
        raise ParameterError("counts must be nonnegative")
    out = np.searchsorted(np.asarray(bins, dtype=float), cnt, side="left")
    return out if out.ndim else int(out)


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    return 0.0 if n == 0 else float(1.0 - np.sum((counts / n) ** 2))


@njit(cache=True)
def _grow_tree(X, y, rows, n_classes, mtry, min_leaf, seed):
    np.random.seed(seed)
    n_feat = X.shape[1]
    nb = rows.shape[0]
    cap = 2 * nb + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    counts = np.zeros((cap, n_classes))
    importance = np.zeros(n_feat)

    # each node owns the same slice of every per-feature sorted entry list
    Xb = np.empty((n_feat, nb))
    yb = np.empty(nb, dtype=np.int64)
    for e in range(nb):
        yb[e] = y[rows[e]]
        for f in range(n_feat):
            Xb[f, e] = X[rows[e], f]
    S = np.empty((n_feat, nb), dtype=np.int64)
    for f in range(n_feat):
        S[f] = np.argsort(Xb[f])
    goes_left = np.zeros(nb, dtype=np.bool_)
    buf = np.empty(nb, dtype=np.int64)

    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)
    start[0], stop[0] = 0, nb
    n_nodes = 1
    stack = np.zeros(cap, dtype=np.int64)
    top = 1
    cl = np.zeros(n_classes)
    cr = np.zeros(n_classes)
    perm = np.arange(n_feat)
    while top > 0:
        top -= 1
        node = stack[top]
        s, e = start[node], stop[node]
        n = e - s
        for k in range(s, e):
            counts[node, yb[S[0, k]]] += 1.0
        n_present = 0
        sq = 0.0
        for c in range(n_classes):
            if counts[node, c] > 0:
                n_present += 1
            sq += counts[node, c] * counts[node, c]
        if n_present <= 1 or n < 2 * min_leaf:
            continue
        parent_imp = 1.0 - sq / (n * n)

        # candidate features without replacement, scanned in index order
        for k in range(mtry):
            j = k + int(np.random.random() * (n_feat - k))
            tmp = perm[k]
            perm[k] = perm[j]
            perm[j] = tmp
        cand = np.sort(perm[:mtry].copy())

        best_score = -1.0
        best_f = -1
        best_t = 0.0
        best_nl = 0
        for f in cand:
            for c in range(n_classes):
                cl[c] = 0.0
                cr[c] = counts[node, c]
            sl = 0.0
            sr = sq
            for k in range(n - 1):
                ent = S[f, s + k]
                c = yb[ent]
                sl += 2.0 * cl[c] + 1.0
                sr -= 2.0 * cr[c] - 1.0
                cl[c] += 1.0
                cr[c] -= 1.0
                nl = k + 1
                nr = n - nl
                v0 = Xb[f, ent]
                v1 = Xb[f, S[f, s + k + 1]]
                if v1 <= v0 or nl < min_leaf or nr < min_leaf:
                    continue
                score = sl / nl + sr / nr
                if score > best_score:
                    best_score = score
                    best_f = f
                    best_nl = nl
                    best_t = 0.5 * (v0 + v1)
                    if best_t >= v1:
                        best_t = v0
        if best_f < 0:
            continue

        for k in range(s, e):
            goes_left[S[best_f, k]] = k < s + best_nl
        for g in range(n_feat):
            a = 0
            for k in range(s, e):
                ent = S[g, k]
                if goes_left[ent]:
                    S[g, s + a] = ent
                    a += 1
                else:
                    buf[k - s - a] = ent
            for k in range(n - a):
                S[g, s + a + k] = buf[k]
        lo = s + best_nl
        child_imp = (n - best_score) / n
        importance[best_f] += (parent_imp - child_imp) * n / nb
        feature[node] = best_f
        threshold[node] = best_t
        left[node], right[node] = n_nodes, n_nodes + 1
        start[n_nodes], stop[n_nodes] = s, lo
        start[n_nodes + 1], stop[n_nodes + 1] = lo, e
        stack[top] = n_nodes + 1
        stack[top + 1] = n_nodes
        top += 2
        n_nodes += 2
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), counts[:n_nodes].copy(), importance)


@njit(cache=True)
def _leaf_classes(feature, threshold, left, right, counts, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        best = 0
        for c in range(counts.shape[1]):
            if counts[node, c] > counts[node, best]:
                best = c
        out[i] = best
    return out


class Tree:
    __slots__ = ("feature", "threshold", "left", "right", "counts")

    def __init__(self, feature, threshold, left, right, counts):
        self.feature, self.threshold, self.left, self.right, self.counts = feature, threshold, left, right, counts

    @property
    def n_nodes(self):
        return len(self.feature)

    def predict(self, X):
        return _leaf_classes(self.feature, self.threshold, self.left, self.right, self.counts,
                             np.ascontiguousarray(X, dtype=float))


class ForestModel:
    """Trained forest with out-of-bag bookkeeping and importances."""

    def __init__(self, trees, oob, n_features, n_classes, mtry, gini_importance=None,
                 oob_error=float("nan"), perm_importance=None):
        self.trees = trees
        self.oob = oob
        self.n_features = n_features
        self.n_classes = n_classes
        self.mtry = mtry
        self.gini_importance = gini_importance if gini_importance is not None else np.zeros(n_features)
        self.oob_error = oob_error
        self.perm_importance = perm_importance

    @property
    def ntree(self):
        return len(self.trees)


def train_forest(features, labels, mtry=None, ntree=200, rng=None, *, n_classes=N_CLASSES,
                 min_leaf=1, importance=True) -> ForestModel:
    """Grow ``ntree`` trees on bootstrap samples.

    Parameters
    ----------
    features : ndarray, shape (n, P)
        Complete numeric features.
    labels : ndarray of int, shape (n,)
        Classes in ``0 .. n_classes - 1``.
    mtry : int, optional
        Candidate features per node; defaults to all.
    rng : numpy.random.Generator or int
        Seeds the bootstraps, per-node feature draws and permutations.
    importance : bool
        Also compute OOB permutation importance.
    """
    X = np.ascontiguousarray(features, dtype=float)
    y = np.ascontiguousarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("training set is empty")
    if not np.all(np.isfinite(X)):
        raise ParameterError("features contain missing or non-finite values")
    if y.shape != (X.shape[0],) or y.min() < 0 or y.max() >= n_classes:
        raise ParameterError("labels must be classes in range, one per row")
    n, P = X.shape
    mtry = P if mtry is None else int(mtry)
    if not 1 <= mtry <= P:
        raise ParameterError(f"mtry must lie in [1, {P}]")
    if ntree < 1:
        raise ParameterError("ntree must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    trees, oob = [], []
    gini_imp = np.zeros(P)
    for _ in range(ntree):
        rows = rng.integers(0, n, size=n)
        seed = int(rng.integers(0, 2**31 - 1))
        f, t, l, r, c, imp = _grow_tree(X, y, rows, n_classes, mtry, min_leaf, seed)
        trees.append(Tree(f, t, l, r, c))
        mask = np.ones(n, dtype=bool)
        mask[rows] = False
        oob.append(np.flatnonzero(mask))
        gini_imp += imp
    model = ForestModel(trees, oob, P, n_classes, mtry, gini_imp / ntree)
    model.oob_error = _oob_error(model, X, y)
    if importance:
        model.perm_importance = _permutation_importance(model, X, y, rng)
    return model


def _oob_error(model, X, y):
    votes = np.zeros((len(y), model.n_classes))
    for tree, oob in zip(model.trees, model.oob):
        if oob.size:
            votes[oob, tree.predict(X[oob])] += 1
    has = votes.sum(axis=1) > 0
    if not has.any():
        return float("nan")
    pred = np.argmax(votes[has], axis=1)
    return float(np.mean(pred != y[has]))


def _permutation_importance(model, X, y, rng):
    imp = np.zeros(model.n_features)
    used = 0
    for tree, oob in zip(model.trees, model.oob):
        if oob.size == 0:
            continue
        used += 1
        Xo = X[oob]
        base = np.mean(tree.predict(Xo) == y[oob])
        for j in range(model.n_features):
            Xp = Xo.copy()
            Xp[:, j] = Xo[rng.permutation(len(oob)), j]
            imp[j] += base - np.mean(tree.predict(Xp) == y[oob])
    return imp / max(used, 1)


def predict_class_probs(model: ForestModel, rows) -> np.ndarray:
    """Vote shares over classes; one row per input row."""
    X = np.atleast_2d(np.asarray(rows, dtype=float))
    if X.shape[1] != model.n_features:
        raise ParameterError(f"expected {model.n_features} features, got {X.shape[1]}")
    votes = np.zeros((X.shape[0], model.n_classes))
    ar = np.arange(X.shape[0])
    for tree in model.trees:
        votes[ar, tree.predict(X)] += 1
    return votes / model.ntree


def predict_class(model: ForestModel, rows) -> np.ndarray:
    """Majority class; ties go to the lower class index."""
    return np.argmax(predict_class_probs(model, rows), axis=1)


def rf_predictive_cdf(probs, bins=U_CNT) -> np.ndarray:
    """CDF at the thresholds: cumulative vote share of classes ``0..c``."""
    probs = np.asarray(probs, dtype=float)
    n_thr = len(bins)
    if probs.shape[-1] != n_thr + 1:
        raise ParameterError(f"expected {n_thr + 1} class shares")
    return np.minimum(np.cumsum(probs, axis=-1)[..., :n_thr], 1.0)


def variable_importance(model: ForestModel):
    """Mean decrease in OOB accuracy and mean decrease in Gini impurity per feature."""
    if model.perm_importance is None:
        raise ParameterError("forest was trained without permutation importance")
    return model.perm_importance.copy(), model.gini_importance.copy()


def write_forest(model: ForestModel, path) -> None:
    """Flat text: header lines, then one node per line."""
    with open(path, "w") as fh:
        fh.write(f"# forest n_features={model.n_features} n_classes={model.n_classes} "
                 f"mtry={model.mtry} ntree={model.ntree} oob_error={model.oob_error!r}\n")
        fh.write("gini_importance " + " ".join(repr(float(v)) for v in model.gini_importance) + "\n")
        if model.perm_importance is not None:
            fh.write("perm_importance " + " ".join(repr(float(v)) for v in model.perm_importance) + "\n")
        for k, oob in enumerate(model.oob):
            fh.write(f"oob {k} " + " ".join(map(str, oob.tolist())) + "\n")
        fh.write("tree_id node_id feature threshold left right counts\n")
        for k, t in enumerate(model.trees):
            for i in range(t.n_nodes):
                cnts = " ".join(str(int(c)) for c in t.counts[i])
                fh.write(f"{k} {i} {t.feature[i]} {float(t.threshold[i])!r} {t.left[i]} {t.right[i]} {cnts}\n")


def read_forest(path) -> ForestModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = dict(kv.split("=") for kv in lines[0].split()[2:])
    P, C = int(head["n_features"]), int(head["n_classes"])
    gini_imp = np.array([float(v) for v in lines[1].split()[1:]])
    k = 2
    perm = None
    if lines[k].startswith("perm_importance"):
        perm = np.array([float(v) for v in lines[k].split()[1:]])
        k += 1
    oob = []
    while lines[k].startswith("oob "):
        parts = lines[k].split()
        oob.append(np.array([int(v) for v in parts[2:]], dtype=np.int64))
        k += 1
    nodes = {}
    for line in lines[k + 1:]:
        p = line.split()
        nodes.setdefault(int(p[0]), []).append(p)
    trees = []
    for tid in sorted(nodes):
        rows = nodes[tid]
        trees.append(Tree(
            np.array([int(r[2]) for r in rows], dtype=np.int64),
            np.array([float(r[3]) for r in rows]),
            np.array([int(r[4]) for r in rows], dtype=np.int64),
            np.array([int(r[5]) for r in rows], dtype=np.int64),
            np.array([[float(v) for v in r[6:]] for r in rows]),
        ))
    return ForestModel(trees, oob, P, C, int(head["mtry"]), gini_imp, float(head["oob_error"]), perm)
