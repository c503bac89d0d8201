"""Dataset-wide mean activation per neuron: the behavioral baseline that all
slicing is measured against.  Accumulation is 64-bit, storage is 32-bit, so
profiling is order-invariant within 1e-6."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .modelir import (
    FORMAT_VERSION,
    Dataset,
    FormatError,
    ModelGraph,
    combine_digests,
    dataset_digest,
)
from .parallel import map_shards

NNSP_MAGIC = b"NNSP"

PROFILE_BATCH = 256  # fixed shard size: results do not depend on worker count


class ProfileError(ValueError):
    pass


@dataclass
class ActivationProfile:
    """Per-neuron mean activation over a dataset, at channel granularity."""

    means: list  # per layer: float32 [units]
    sample_count: int
    model_fingerprint: bytes
    dataset_hash: bytes

    def flat(self) -> np.ndarray:
        return np.concatenate(self.means) if self.means else np.empty(0, np.float32)

    def neuron_total(self) -> int:
        return int(sum(v.shape[0] for v in self.means))


def _shard_sums(m: ModelGraph, xs: np.ndarray):
    _, means = engine.run_batch_traced(m, xs)
    return [v.sum(axis=0, dtype=np.float64) for v in means]


def profile(m: ModelGraph, d: Dataset, workers: int = 1) -> ActivationProfile:
    """Mean of per-sample traced means over d (one pass, fixed shard size)."""
    if len(d) == 0:
        raise ProfileError("cannot profile an empty dataset")
    m.check()
    xs = d.tensors()
    if xs.shape[1:] != m.input_shape:
        raise ProfileError(f"sample shape {xs.shape[1:]} does not match model {m.input_shape}")
    shards = [xs[s : s + PROFILE_BATCH] for s in range(0, len(d), PROFILE_BATCH)]
    results = map_shards(_shard_sums, [(m, shard) for shard in shards], workers)
    sums = results[0]
    for r in results[1:]:
        sums = [a + b for a, b in zip(sums, r)]
    means = [(s / len(d)).astype(np.float32) for s in sums]
    return ActivationProfile(means, len(d), m.fingerprint(), dataset_digest(d))


def profile_merge(p1: ActivationProfile, p2: ActivationProfile) -> ActivationProfile:
    """Sample-count weighted mean of two profiles of the same model."""
    if p1.model_fingerprint != p2.model_fingerprint:
        raise ProfileError("profiles were computed against different models")
    if p1.sample_count < 1 or p2.sample_count < 1:
        raise ProfileError("profiles must cover at least one sample")
    n1, n2 = p1.sample_count, p2.sample_count
    total = n1 + n2
    means = [
        ((a.astype(np.float64) * n1 + b.astype(np.float64) * n2) / total).astype(np.float32)
        for a, b in zip(p1.means, p2.means)
    ]
    return ActivationProfile(
        means, total, p1.model_fingerprint, combine_digests([p1.dataset_hash, p2.dataset_hash])
    )


def save_profile(p: ActivationProfile, path) -> None:
    with open(path, "wb") as f:
        f.write(NNSP_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(p.model_fingerprint)
        f.write(p.dataset_hash)
        f.write(struct.pack("<Q", p.sample_count))
        f.write(struct.pack("<I", len(p.means)))
        for v in p.means:
            f.write(struct.pack("<I", v.shape[0]))
        for v in p.means:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_profile(path, m: ModelGraph | None = None) -> ActivationProfile:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NNSP_MAGIC:
        raise FormatError("not an NNSP file (bad magic)")
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported NNSP version {data[4]}")
    fp = data[5:37]
    ds_hash = data[37:69]
    (count,) = struct.unpack_from("<Q", data, 69)
    (layer_count,) = struct.unpack_from("<I", data, 77)
    pos = 81
    sizes = struct.unpack_from(f"<{layer_count}I", data, pos)
    pos += 4 * layer_count
    means = []
    for n in sizes:
        if pos + 4 * n > len(data):
            raise FormatError("truncated NNSP payload")
        means.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).copy())
        pos += 4 * n
    p = ActivationProfile(means, count, fp, ds_hash)
    if m is not None:
        check_profile(p, m)
    return p


def check_profile(p: ActivationProfile, m: ModelGraph) -> None:
    if p.model_fingerprint != m.fingerprint():
        raise ProfileError("profile fingerprint does not match this model")
    units = m.unit_counts()
    if [v.shape[0] for v in p.means] != units:
        raise ProfileError("profile layer sizes do not match this model")
