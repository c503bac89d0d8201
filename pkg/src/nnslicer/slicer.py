"""Backward contribution analysis: relative activations, per-operation local
contributions, threshold-based exclusion, layer-synchronous sign propagation,
and multi-sample aggregation.

The contribution of a neuron or synapse is a signed integer accumulated from
sign updates.  A slice is the nonzero support of the table.

Semantics notes (shared with oracle.py, which re-implements them naively):

* Channel granularity: a convolutional neuron is one output channel; its
  activation is the spatial mean.  A Conv2D center has one predecessor term
  per (in-channel, kernel-position) pair, all positions of one channel
  sharing that channel's mean.  A FullyConnected layer fed by Flatten maps
  input index j to source channel j // (H*W).
* Exclusion rule: terms sorted ascending by |local contribution| (ties by
  term index); the excluded prefix grows while the running influence stays
  <= theta and stops at the first violation, so theta = 0 excludes exactly
  the zero terms.  Influence of a prefix is |sum of its masses| divided by
  max(|y|, 1e-12) for weighted sums (mass = w*dx) and by k*max(|y|, 1e-12)
  for averages (mass = dx).  Maximum, Rectify and Scale have at most one
  nonzero term and ignore theta.
* Flatten and Output are pure reindexings: the accumulated integer passes
  through verbatim (no sign collapse, no delta factors).
* Pools act per channel as degenerate averages; multi-input maxima (Add
  with combine="max") use the recorded channel-mean argmax.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .modelir import (
    FORMAT_VERSION,
    FormatError,
    ModelGraph,
    NeuronId,
    SynapseId,
    combine_digests,
    sample_digest,
)
from .parallel import map_shards
from .profiler import ActivationProfile, check_profile

NNSL_MAGIC = b"NNSL"
EPS = 1e-12

OP_KINDS = ("WeightedSum", "Average", "Maximum", "Rectify", "Scale")


class SliceError(ValueError):
    pass


def _sgn(v: float) -> int:
    return (v > 0) - (v < 0)


# ---------------------------------------------------------------------------
# Forward differential analysis


@dataclass
class RelActTrace:
    """Per-neuron relative activation dy = y - profile mean, with the raw
    means and the forward-time argmax/gate facts."""

    raw: list  # per layer: float64 [units]
    delta: list  # per layer: float64 [units]
    counts: list
    logits: np.ndarray
    predicted: int
    maxpool_argmax: dict
    addmax_winner: dict
    model_fingerprint: bytes

    def relu_gate(self, pred_layer: int) -> np.ndarray:
        """Table condition "x > 0" on the recorded per-channel mean
        pre-activation of the ReLU's predecessor."""
        return self.raw[pred_layer] > 0


def relative_activations(trace: engine.ActivationTrace, p: ActivationProfile) -> RelActTrace:
    if trace.model_fingerprint != p.model_fingerprint:
        raise SliceError("trace and profile fingerprints do not match")
    if [v.shape[0] for v in trace.means] != [v.shape[0] for v in p.means]:
        raise SliceError("trace and profile disagree on neuron counts")
    delta = [t - b.astype(np.float64) for t, b in zip(trace.means, p.means)]
    return RelActTrace(
        raw=trace.means,
        delta=delta,
        counts=trace.counts,
        logits=trace.logits,
        predicted=trace.predicted,
        maxpool_argmax=trace.maxpool_argmax,
        addmax_winner=trace.addmax_winner,
        model_fingerprint=trace.model_fingerprint,
    )


# ---------------------------------------------------------------------------
# Local contributions and the exclusion rule (reference scalar forms)


def local_contributions(kind, contrib_center, dy, inputs, aux=None):
    """Local contribution of each input term of one operation.

    inputs: list of (w, x, dx) triples; w and x are ignored by kinds that do
    not use them.  aux: winner index for Maximum, gate bool for Rectify.
    """
    if kind not in OP_KINDS:
        raise SliceError(f"unknown operation kind {kind!r}")
    if contrib_center == 0:
        raise SliceError("center neuron must have nonzero cumulative contribution")
    out = []
    for i, (w, x, dx) in enumerate(inputs):
        if kind == "WeightedSum":
            v = contrib_center * dy * (w * dx)
        elif kind == "Average":
            v = contrib_center * dy * dx
        elif kind == "Maximum":
            winner = aux
            v = contrib_center * dy * dx if i == winner else 0.0
        elif kind == "Rectify":
            gate = (x > 0) if aux is None else bool(aux)
            v = contrib_center * dy * dx if gate else 0.0
        else:  # Scale
            v = contrib_center * dy * dx
        out.append(float(v))
    return out


def theta_filter(local, op_context, theta):
    """Retained index set after excluding the low-magnitude prefix.

    op_context: (kind, masses, y) where masses are the per-term influence
    quantities (w*dx for WeightedSum, dx for Average).
    """
    if theta < 0:
        raise SliceError(f"theta {theta} must be >= 0")
    kind, masses, y = op_context
    if kind not in OP_KINDS:
        raise SliceError(f"unknown operation kind {kind!r}")
    if kind in ("Maximum", "Rectify", "Scale"):
        return {i for i, v in enumerate(local) if v != 0}
    k = len(local)
    order = sorted(range(k), key=lambda i: (abs(local[i]), i))
    if kind == "Average":
        limit = theta * k * max(abs(y), EPS)
    else:
        limit = theta * max(abs(y), EPS)
    excluded = 0
    running = 0.0
    for i in order:
        running += masses[i]
        if abs(running) <= limit:
            excluded += 1
        else:
            break
    return set(order[excluded:])


# ---------------------------------------------------------------------------
# Contribution table


@dataclass
class ContributionTable:
    """Signed integer cumulative contributions; absent entries are zero."""

    neuron: list  # per layer: int64 [units]
    synapse: dict  # layer index -> int64 array shaped like the weights
    sample_count: int
    theta: float
    model_fingerprint: bytes
    output_units: tuple
    sample_set_hash: bytes = b"\x00" * 32

    def criterion_fingerprint(self) -> bytes:
        h = hashlib.sha256()
        h.update(self.model_fingerprint)
        h.update(struct.pack("<I", len(self.output_units)))
        h.update(struct.pack(f"<{len(self.output_units)}I", *self.output_units))
        h.update(struct.pack("<f", self.theta))
        return h.digest()

    def iter_neurons(self):
        for li, arr in enumerate(self.neuron):
            for u in np.flatnonzero(arr):
                yield NeuronId(li, int(u)), int(arr[u])

    def iter_synapses(self):
        for li in sorted(self.synapse):
            arr = self.synapse[li]
            flat = arr.reshape(-1)
            if arr.ndim == 2:
                o, k = arr.shape
                for j in np.flatnonzero(flat):
                    j = int(j)
                    yield SynapseId(li, j // k, j % k, 0, 0), int(flat[j])
            else:
                o, c, kh, kw = arr.shape
                for j in np.flatnonzero(flat):
                    j = int(j)
                    rest, kc = divmod(j, kw)
                    rest, kr = divmod(rest, kh)
                    ou, ic = divmod(rest, c)
                    yield SynapseId(li, ou, ic, kr, kc), int(flat[j])

    def neuron_nonzero(self) -> int:
        return int(sum(np.count_nonzero(a) for a in self.neuron))

    def synapse_nonzero(self) -> int:
        return int(sum(np.count_nonzero(a) for a in self.synapse.values()))

    def synapse_flat(self) -> np.ndarray:
        """All synapse contributions in canonical enumerate_synapses order."""
        parts = [self.synapse[li].reshape(-1) for li in sorted(self.synapse)]
        return np.concatenate(parts) if parts else np.empty(0, np.int64)

    def same_values(self, other: "ContributionTable") -> bool:
        return (
            len(self.neuron) == len(other.neuron)
            and all(np.array_equal(a, b) for a, b in zip(self.neuron, other.neuron))
            and sorted(self.synapse) == sorted(other.synapse)
            and all(np.array_equal(self.synapse[k], other.synapse[k]) for k in self.synapse)
        )


@dataclass
class Slice:
    """Nonzero support of a contribution table, contributions retained."""

    neurons: dict  # NeuronId -> int
    synapses: dict  # SynapseId -> int
    theta: float
    sample_count: int

    def __len__(self):
        return len(self.neurons) + len(self.synapses)


@dataclass
class SliceCriterion:
    """C = (I, O): samples of interest and output neurons of interest."""

    samples: list
    outputs: tuple

    def validate(self, m: ModelGraph):
        if not self.samples:
            raise SliceError("criterion needs at least one sample")
        _normalize_outputs(m, self.outputs)


def _normalize_outputs(m: ModelGraph, outputs) -> tuple:
    logit_layer = len(m.layers) - 1
    units = []
    for o in outputs:
        if isinstance(o, NeuronId):
            if o.layer != logit_layer:
                raise SliceError(f"output neuron {o} is not in the logit layer {logit_layer}")
            units.append(int(o.unit))
        else:
            units.append(int(o))
    if not units:
        raise SliceError("criterion needs at least one output neuron")
    if any(u < 0 or u >= m.class_count for u in units):
        raise SliceError(f"output units {units} out of range for {m.class_count} classes")
    return tuple(sorted(set(units)))


def _empty_table(m: ModelGraph, theta, outputs) -> ContributionTable:
    units = m.unit_counts()
    neuron = [np.zeros(u, dtype=np.int64) for u in units]
    synapse = {
        l.index: np.zeros(l.weights.shape, dtype=np.int64)
        for l in m.layers
        if l.kind in ("Conv2D", "FullyConnected")
    }
    return ContributionTable(neuron, synapse, 0, float(theta), m.fingerprint(), outputs)


# ---------------------------------------------------------------------------
# Vectorized exclusion + sign updates


def _weighted_updates(contrib_row, dy, y, masses, theta):
    """Sign updates for active centers of a weighted-sum style layer.

    contrib_row/dy/y: float64 [rows]; masses: [rows, k] (w*dx per term).
    Sorting key and prefix arithmetic mirror the scalar reference ops
    exactly so the optimized path and the oracle agree bit-for-bit.
    """
    base = contrib_row * dy
    if theta == 0.0:
        keep = masses != 0.0
    else:
        rows, k = masses.shape
        order = np.argsort(np.abs(base[:, None] * masses), axis=1, kind="stable")
        pref = np.cumsum(np.take_along_axis(masses, order, axis=1), axis=1)
        limit = theta * np.maximum(np.abs(y), EPS)
        ok = np.abs(pref) <= limit[:, None]
        jstar = np.where(ok.all(axis=1), k, (~ok).argmax(axis=1))
        keep_sorted = np.arange(k)[None, :] >= jstar[:, None]
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=1)
        keep &= masses != 0.0
    return (np.sign(base)[:, None] * np.sign(masses) * keep).astype(np.int64)


# ---------------------------------------------------------------------------
# Backward slice (optimized, layer-synchronous)


def backward_slice(
    m: ModelGraph,
    p: ActivationProfile,
    xi: np.ndarray,
    outputs,
    theta: float,
    trace: engine.ActivationTrace | None = None,
) -> ContributionTable:
    """Contribution table of one sample for criterion (xi, outputs)."""
    if theta < 0:
        raise SliceError(f"theta {theta} must be >= 0")
    check_profile(p, m)
    units = _normalize_outputs(m, outputs)
    if trace is None:
        _, trace = engine.forward(m, xi, record=True)
    rel = relative_activations(trace, p)
    table = _empty_table(m, theta, units)
    table.sample_count = 1
    table.sample_set_hash = combine_digests([sample_digest(xi, None)])
    table.neuron[-1][list(units)] = 1

    for i in range(len(m.layers) - 1, 0, -1):
        layer = m.layers[i]
        c = table.neuron[i]
        if not c.any():
            continue
        kind = layer.kind
        pred = layer.predecessors()
        if kind in ("Output", "Flatten"):
            table.neuron[pred[0]] += c
            continue
        dy = rel.delta[i]
        y = rel.raw[i]
        if kind == "FullyConnected":
            pidx = pred[0]
            w = layer.weights.astype(np.float64)
            pred_units = table.neuron[pidx].shape[0]
            group = w.shape[1] // pred_units
            dx = rel.delta[pidx]
            dx_terms = np.repeat(dx, group) if group > 1 else dx
            active = np.flatnonzero(c)
            upd = _weighted_updates(
                c[active].astype(np.float64), dy[active], y[active], w[active] * dx_terms[None, :], theta
            )
            table.synapse[i][active] += upd
            per_term = upd.sum(axis=0)
            if group > 1:
                table.neuron[pidx] += per_term.reshape(pred_units, group).sum(axis=1)
            else:
                table.neuron[pidx] += per_term
        elif kind == "Conv2D":
            pidx = pred[0]
            w = layer.weights.astype(np.float64)
            o, ic, kh, kw = w.shape
            dx = rel.delta[pidx]
            masses = (w * dx[None, :, None, None]).reshape(o, ic * kh * kw)
            active = np.flatnonzero(c)
            upd = _weighted_updates(
                c[active].astype(np.float64), dy[active], y[active], masses[active], theta
            )
            table.synapse[i][active] += upd.reshape(-1, ic, kh, kw)
            table.neuron[pidx] += upd.reshape(-1, ic, kh * kw).sum(axis=(0, 2))
        elif kind == "ReLU":
            pidx = pred[0]
            gate = rel.relu_gate(pidx)
            upd = (np.sign(c) * np.sign(dy) * np.sign(rel.delta[pidx]) * gate).astype(np.int64)
            table.neuron[pidx] += upd
        elif kind == "Scale":
            pidx = pred[0]
            upd = (np.sign(c) * np.sign(dy) * np.sign(rel.delta[pidx])).astype(np.int64)
            table.neuron[pidx] += upd
        elif kind in ("AvgPool2D", "MaxPool2D"):
            # degenerate single-term Average at channel granularity
            pidx = pred[0]
            dx = rel.delta[pidx]
            if theta == 0.0:
                keep = dx != 0.0
            else:
                keep = np.abs(dx) > theta * np.maximum(np.abs(y), EPS)
            upd = (np.sign(c) * np.sign(dy) * np.sign(dx) * keep).astype(np.int64)
            table.neuron[pidx] += upd
        elif kind == "Add":
            if layer.params.get("combine", "sum") == "max":
                winner = rel.addmax_winner[i]
                base = np.sign(c) * np.sign(dy)
                for slot, pidx in enumerate(pred):
                    mask = winner == slot
                    upd = (base * np.sign(rel.delta[pidx]) * mask).astype(np.int64)
                    table.neuron[pidx] += upd
            else:
                masses = np.stack([rel.delta[pidx] for pidx in pred], axis=1)  # [C, kp]
                upd = _weighted_updates(c.astype(np.float64), dy, y, masses, theta)
                for slot, pidx in enumerate(pred):
                    table.neuron[pidx] += upd[:, slot]
    return table


def aggregate(tables) -> ContributionTable:
    """Element-wise integer sum over same-criterion tables; order-independent."""
    tables = list(tables)
    if not tables:
        raise SliceError("nothing to aggregate")
    first = tables[0]
    for t in tables[1:]:
        if t.model_fingerprint != first.model_fingerprint:
            raise SliceError("tables were computed against different models")
        if t.criterion_fingerprint() != first.criterion_fingerprint():
            raise SliceError("tables were computed for different criteria")
    out = ContributionTable(
        [a.copy() for a in first.neuron],
        {k: v.copy() for k, v in first.synapse.items()},
        first.sample_count,
        first.theta,
        first.model_fingerprint,
        first.output_units,
        first.sample_set_hash,
    )
    for t in tables[1:]:
        for a, b in zip(out.neuron, t.neuron):
            a += b
        for k in out.synapse:
            out.synapse[k] += t.synapse[k]
        out.sample_count += t.sample_count
        out.sample_set_hash = combine_digests([out.sample_set_hash, t.sample_set_hash])
    return out


def _slice_shard(m, p, xs, outputs, theta):
    tables = [backward_slice(m, p, x, outputs, theta) for x in xs]
    return aggregate(tables)


def slice_job(m, p, samples, outputs, theta, workers: int = 1, shard_size: int = 64) -> ContributionTable:
    """Aggregate contribution table over many samples, sharded over workers."""
    samples = list(samples)
    if not samples:
        raise SliceError("criterion needs at least one sample")
    units = _normalize_outputs(m, outputs)
    shards = [samples[s : s + shard_size] for s in range(0, len(samples), shard_size)]
    parts = map_shards(_slice_shard, [(m, p, xs, units, theta) for xs in shards], workers)
    return aggregate(parts)


def extract_slice(t: ContributionTable) -> Slice:
    return Slice(dict(t.iter_neurons()), dict(t.iter_synapses()), t.theta, t.sample_count)


# ---------------------------------------------------------------------------
# NNSL container


def save_slice(t: ContributionTable, path) -> None:
    records = []
    for (li, u), v in t.iter_neurons():
        records.append(struct.pack("<BIIq", 0, li, u, v))
    for (li, ou, iu, kr, kc), v in t.iter_synapses():
        records.append(struct.pack("<BIIIIIq", 1, li, ou, iu, kr, kc, v))
    with open(path, "wb") as f:
        f.write(NNSL_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(t.model_fingerprint)
        f.write(struct.pack("<I", len(t.output_units)))
        f.write(struct.pack(f"<{len(t.output_units)}I", *t.output_units))
        f.write(t.sample_set_hash)
        f.write(struct.pack("<f", t.theta))
        f.write(struct.pack("<Q", t.sample_count))
        f.write(struct.pack("<Q", len(records)))
        f.write(b"".join(records))


def load_slice(path, m: ModelGraph) -> ContributionTable:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NNSL_MAGIC:
        raise FormatError("not an NNSL file (bad magic)")
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported NNSL version {data[4]}")
    fp = data[5:37]
    if fp != m.fingerprint():
        raise SliceError("slice fingerprint does not match this model")
    (n_out,) = struct.unpack_from("<I", data, 37)
    pos = 41
    outputs = struct.unpack_from(f"<{n_out}I", data, pos)
    pos += 4 * n_out
    sample_hash = data[pos : pos + 32]
    pos += 32
    (theta,) = struct.unpack_from("<f", data, pos)
    pos += 4
    (count, nrec) = struct.unpack_from("<QQ", data, pos)
    pos += 16
    t = _empty_table(m, float(theta), tuple(int(u) for u in outputs))
    t.sample_count = int(count)
    t.sample_set_hash = sample_hash
    try:
        for _ in range(nrec):
            tag = data[pos]
            if tag == 0:
                _, li, u, v = struct.unpack_from("<BIIq", data, pos)
                pos += 17
                t.neuron[li][u] = v
            elif tag == 1:
                _, li, ou, iu, kr, kc, v = struct.unpack_from("<BIIIIIq", data, pos)
                pos += 29
                arr = t.synapse[li]
                if arr.ndim == 2:
                    arr[ou, iu] = v
                else:
                    arr[ou, iu, kr, kc] = v
            else:
                raise FormatError(f"unknown record tag {tag}")
    except (IndexError, struct.error, KeyError):
        raise FormatError("truncated or inconsistent NNSL records") from None
    return t
