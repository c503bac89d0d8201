"""Adversarial-input detection from slice vectors.

Per sample xi, the slice w.r.t. the model's own prediction M(xi) is densified
into a per-synapse contribution vector; a decision tree trained on normal
samples learns which vectors belong to which predicted class.  An input is
flagged as adversarial when the tree's verdict disagrees with the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .. import engine
from ..modelir import FORMAT_VERSION, Dataset, FormatError, ModelGraph, synapse_count
from ..parallel import map_shards
from ..profiler import ActivationProfile, check_profile
from ..slicer import ContributionTable, SliceError, backward_slice
from .cart import CartConfig, DecisionTree, Node, cart_fit, cart_predict

NNSD_MAGIC = b"NNSD"


@dataclass
class Detector:
    tree: DecisionTree
    theta: float
    sample_count: int
    model_fingerprint: bytes


def slice_vector(t: ContributionTable, m: ModelGraph) -> np.ndarray:
    """Densify a single-sample table into canonical synapse order.

    Per-sample synapse contributions are sign counts in {-1, 0, +1} (each
    synapse belongs to exactly one operation), so int8 is lossless.
    """
    if t.model_fingerprint != m.fingerprint():
        raise SliceError("table fingerprint does not match this model")
    if t.sample_count != 1:
        raise SliceError(f"slice vectors are per-sample; table aggregates {t.sample_count}")
    return t.synapse_flat().astype(np.int8)


def _vector_shard(m, p, xs, theta):
    out = np.zeros((len(xs), synapse_count(m)), dtype=np.int8)
    preds = np.zeros(len(xs), dtype=np.int64)
    for i, x in enumerate(xs):
        _, trace = engine.forward(m, x, record=True)
        t = backward_slice(m, p, x, (trace.predicted,), theta, trace=trace)
        out[i] = slice_vector(t, m)
        preds[i] = trace.predicted
    return out, preds


def slice_vectors(m: ModelGraph, p: ActivationProfile, samples, theta, workers: int = 1, shard_size: int = 64):
    """(vectors, model predictions) for each sample, slicing w.r.t. M(xi)."""
    samples = list(samples)
    shards = [samples[s : s + shard_size] for s in range(0, len(samples), shard_size)]
    parts = map_shards(_vector_shard, [(m, p, xs, theta) for xs in shards], workers)
    vecs = np.concatenate([v for v, _ in parts]) if parts else np.zeros((0, synapse_count(m)), np.int8)
    preds = np.concatenate([pr for _, pr in parts]) if parts else np.zeros(0, np.int64)
    return vecs, preds


def train_detector(
    m: ModelGraph,
    p: ActivationProfile,
    d: Dataset,
    theta: float,
    cart_cfg: CartConfig | None = None,
    workers: int = 1,
) -> Detector:
    """Fit the slice classifier on normal samples, labeled by the model's own
    predictions (not ground truth)."""
    if len(d) == 0:
        raise SliceError("detector needs at least one training sample")
    check_profile(p, m)
    vecs, preds = slice_vectors(m, p, [x for x, _ in d.samples], theta, workers)
    tree = cart_fit(vecs, preds, cart_cfg)
    return Detector(tree, float(theta), len(d), m.fingerprint())


def detect(det: Detector, m: ModelGraph, p: ActivationProfile, xi: np.ndarray, theta: float | None = None) -> bool:
    """True = adversarial: the slice classifier disagrees with the model."""
    if det.model_fingerprint != m.fingerprint():
        raise SliceError("detector fingerprint does not match this model")
    if theta is not None and float(theta) != det.theta:
        raise SliceError(f"detector was trained at theta={det.theta}, asked to run at {theta}")
    _, trace = engine.forward(m, xi, record=True)
    t = backward_slice(m, p, xi, (trace.predicted,), det.theta, trace=trace)
    return cart_predict(det.tree, slice_vector(t, m)) != trace.predicted


def detect_batch(det, m, p, samples, workers: int = 1):
    vecs, preds = slice_vectors(m, p, samples, det.theta, workers)
    votes = np.asarray([cart_predict(det.tree, v) for v in vecs])
    return votes != preds, preds, votes


# ---------------------------------------------------------------------------
# NNSD container


def _write_node(out, node: Node):
    if node.is_leaf:
        out.append(struct.pack("<Qfi", 0, 0.0, node.label))
    else:
        out.append(struct.pack("<Qfi", node.feature, node.threshold, -1))
        _write_node(out, node.left)
        _write_node(out, node.right)


def save_detector(det: Detector, path) -> None:
    records = []
    _write_node(records, det.tree.root)
    with open(path, "wb") as f:
        f.write(NNSD_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(det.model_fingerprint)
        f.write(struct.pack("<f", det.theta))
        f.write(struct.pack("<Q", det.sample_count))
        f.write(struct.pack("<QII", det.tree.n_features, det.tree.config.max_depth, det.tree.config.min_leaf))
        f.write(struct.pack("<q", det.tree.config.seed))
        f.write(struct.pack("<Q", len(records)))
        f.write(b"".join(records))


def load_detector(path) -> Detector:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NNSD_MAGIC:
        raise FormatError("not an NNSD file (bad magic)")
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported NNSD version {data[4]}")
    fp = data[5:37]
    (theta,) = struct.unpack_from("<f", data, 37)
    (count,) = struct.unpack_from("<Q", data, 41)
    n_features, max_depth, min_leaf = struct.unpack_from("<QII", data, 49)
    (seed,) = struct.unpack_from("<q", data, 65)
    (n_rec,) = struct.unpack_from("<Q", data, 73)
    pos = [81]

    def read_node(remaining):
        if remaining[0] <= 0:
            raise FormatError("truncated NNSD tree")
        feature, threshold, label = struct.unpack_from("<Qfi", data, pos[0])
        pos[0] += 16
        remaining[0] -= 1
        if label >= 0:
            return Node(label=label)
        left = read_node(remaining)
        right = read_node(remaining)
        return Node(feature=int(feature), threshold=float(threshold), left=left, right=right)

    remaining = [int(n_rec)]
    root = read_node(remaining)
    if remaining[0] != 0:
        raise FormatError("trailing NNSD tree records")
    tree = DecisionTree(root, int(n_features), CartConfig(int(max_depth), int(min_leaf), int(seed)))
    return Detector(tree, float(theta), int(count), fp)
