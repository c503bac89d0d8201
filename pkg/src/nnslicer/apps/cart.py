"""CART classifier: exhaustive Gini-impurity splits with deterministic
tie-breaking (lowest feature index, then lowest threshold).

Impure nodes split on the best candidate even at zero gain (otherwise
XOR-like label patterns would never be separated); recursion is bounded by
max_depth and min_leaf.

Slice vectors are ternary (values in {-1, 0, 1}), for which per-node class
counts come from two matrix products instead of per-feature sorts; the
candidate set, gain arithmetic and tie-breaks match the generic sorted-sweep
path exactly, so both produce identical trees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CartError(ValueError):
    pass


@dataclass
class CartConfig:
    max_depth: int = 25
    min_leaf: int = 5
    seed: int = 0  # recorded for provenance; the fit itself is exhaustive


@dataclass
class Node:
    feature: int = -1
    threshold: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    label: int = -1

    @property
    def is_leaf(self):
        return self.label >= 0


@dataclass
class DecisionTree:
    root: Node
    n_features: int
    config: CartConfig

    def depth(self) -> int:
        def d(node):
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))

        return d(self.root)

    def node_count(self) -> int:
        def c(node):
            return 1 if node.is_leaf else 1 + c(node.left) + c(node.right)

        return c(self.root)


def _gini(counts: np.ndarray, total: int) -> float:
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def _majority(y: np.ndarray) -> int:
    vals, counts = np.unique(y, return_counts=True)
    return int(vals[counts.argmax()])  # ties -> lowest label


def _best_split_generic(X, y, idx, n_classes, parent_counts, parent_gini, min_leaf, chunk=256):
    """(gain, feature, threshold) of the best candidate, or None.  Candidate
    thresholds are midpoints of consecutive distinct values within the node."""
    n = idx.shape[0]
    y_node = y[idx]
    best = None
    positions = np.arange(1, n, dtype=np.int64)
    valid_rows = (positions >= min_leaf) & (n - positions >= min_leaf)
    if not valid_rows.any():
        return None
    for f0 in range(0, X.shape[1], chunk):
        cols = X[:, f0 : f0 + chunk][idx]
        order = np.argsort(cols, axis=0, kind="stable")
        xs = np.take_along_axis(cols, order, axis=0)
        boundary = xs[:-1] != xs[1:]  # [n-1, c] candidate between i and i+1
        boundary &= valid_rows[:, None]
        if not boundary.any():
            continue
        ys = y_node[order]  # [n, c]
        sum_l2 = np.zeros(boundary.shape)
        sum_r2 = np.zeros(boundary.shape)
        for cls in range(n_classes):
            lc = np.cumsum(ys == cls, axis=0)[:-1].astype(np.float64)
            sum_l2 += lc * lc
            rc = parent_counts[cls] - lc
            sum_r2 += rc * rc
        nl = positions[:, None].astype(np.float64)
        nr = n - nl
        gl = 1.0 - sum_l2 / (nl * nl)
        gr = 1.0 - sum_r2 / (nr * nr)
        gain = parent_gini - (nl * gl + nr * gr) / n
        gain[~boundary] = -np.inf
        col_best = gain.argmax(axis=0)  # first row max = lowest threshold
        col_gain = gain[col_best, np.arange(gain.shape[1])]
        c = int(col_gain.argmax())  # first column max = lowest feature
        g = float(col_gain[c])
        if g > -np.inf and (best is None or g > best[0]):
            i = col_best[c]
            thr = float(np.float32((np.float64(xs[i, c]) + np.float64(xs[i + 1, c])) / 2.0))
            best = (g, f0 + c, thr)
    return best


def _class_counts_ternary(neg, pos, onehot, idx, chunk=4096):
    """Per-class counts of value==-1 and value==+1 within the node."""
    oh = onehot[idx]  # [n, C] float32
    c_neg = np.empty((oh.shape[1], neg.shape[1]), dtype=np.float64)
    c_pos = np.empty_like(c_neg)
    for f0 in range(0, neg.shape[1], chunk):
        c_neg[:, f0 : f0 + chunk] = oh.T @ neg[:, f0 : f0 + chunk][idx].astype(np.float32)
        c_pos[:, f0 : f0 + chunk] = oh.T @ pos[:, f0 : f0 + chunk][idx].astype(np.float32)
    return c_neg, c_pos


def _gain_from_counts(lc, nl, parent_counts, parent_gini, n, n_classes, min_leaf, exists):
    sum_l2 = np.zeros(lc.shape[1])
    sum_r2 = np.zeros(lc.shape[1])
    for cls in range(n_classes):
        l = lc[cls]
        sum_l2 += l * l
        rc = parent_counts[cls] - l
        sum_r2 += rc * rc
    nr = n - nl
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = 1.0 - sum_l2 / (nl * nl)
        gr = 1.0 - sum_r2 / (nr * nr)
        gain = parent_gini - (nl * gl + nr * gr) / n
    bad = ~exists | (nl < min_leaf) | (n - nl < min_leaf)
    gain[bad] = -np.inf
    return gain


def _best_split_ternary(neg, pos, onehot, y, idx, n_classes, parent_counts, parent_gini, min_leaf):
    """Same contract as the generic path for values restricted to {-1,0,1}.

    Candidates per feature (from values present in the node):
      A: left = {-1}, threshold -0.5 (0 present) or 0.0 ({-1,1} only)
      B: left = {-1,0}, threshold +0.5
    A's threshold is always lower, so ties prefer A.
    """
    n = idx.shape[0]
    c_neg, c_pos = _class_counts_ternary(neg, pos, onehot, idx)
    n_neg = c_neg.sum(axis=0)
    n_pos = c_pos.sum(axis=0)
    n_zero = n - n_neg - n_pos
    c_zero = parent_counts[:, None] - c_neg - c_pos

    exists_a = (n_neg > 0) & (n_neg < n)
    gain_a = _gain_from_counts(c_neg, n_neg, parent_counts, parent_gini, n, n_classes, min_leaf, exists_a)
    thr_a = np.where(n_zero > 0, np.float32(-0.5), np.float32(0.0))

    exists_b = (n_zero > 0) & (n_pos > 0)
    gain_b = _gain_from_counts(
        c_neg + c_zero, n_neg + n_zero, parent_counts, parent_gini, n, n_classes, min_leaf, exists_b
    )

    use_a = gain_a >= gain_b  # equal gain -> lower threshold
    gain = np.where(use_a, gain_a, gain_b)
    f = int(gain.argmax())  # first max = lowest feature index
    g = float(gain[f])
    if g == -np.inf:
        return None
    thr = float(thr_a[f]) if use_a[f] else 0.5
    return g, f, thr


def cart_fit(vectors: np.ndarray, labels, cfg: CartConfig | None = None) -> DecisionTree:
    cfg = cfg or CartConfig()
    X = np.asarray(vectors)
    if X.ndim != 2 or X.shape[0] == 0:
        raise CartError("training set must be a nonempty 2-D array")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != X.shape[0]:
        raise CartError(f"{X.shape[0]} vectors but {y.shape[0]} labels")
    n_classes = int(y.max()) + 1 if y.size else 1
    # constant features can never split; dropping them is exact
    varying = np.flatnonzero(np.any(X != X[0], axis=0))
    Xv = np.ascontiguousarray(X[:, varying])
    ternary = Xv.dtype == np.int8 and Xv.size > 0 and bool(np.isin(np.unique(Xv), (-1, 0, 1)).all())
    if ternary:
        neg = Xv == -1
        pos = Xv == 1
        onehot = np.zeros((X.shape[0], n_classes), dtype=np.float32)
        onehot[np.arange(X.shape[0]), y] = 1.0

    def build(idx, depth):
        y_node = y[idx]
        counts = np.bincount(y_node, minlength=n_classes)
        gini = _gini(counts, idx.shape[0])
        if depth >= cfg.max_depth or idx.shape[0] < 2 * cfg.min_leaf or gini == 0.0:
            return Node(label=_majority(y_node))
        if ternary:
            found = _best_split_ternary(
                neg, pos, onehot, y, idx, n_classes, counts.astype(np.float64), gini, cfg.min_leaf
            )
        else:
            found = _best_split_generic(Xv, y, idx, n_classes, counts, gini, cfg.min_leaf)
        if found is None:
            return Node(label=_majority(y_node))
        _, f, thr = found
        mask = Xv[:, f][idx] <= thr
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        return Node(feature=int(varying[f]), threshold=thr, left=left, right=right)

    root = build(np.arange(X.shape[0], dtype=np.int64), 0)
    return DecisionTree(root, X.shape[1], cfg)


def cart_predict(tree: DecisionTree, v: np.ndarray) -> int:
    node = tree.root
    while not node.is_leaf:
        node = node.left if v[node.feature] <= node.threshold else node.right
    return node.label


def cart_predict_batch(tree: DecisionTree, X: np.ndarray) -> np.ndarray:
    return np.asarray([cart_predict(tree, row) for row in X], dtype=np.int64)
