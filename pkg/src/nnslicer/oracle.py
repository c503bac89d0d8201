"""Reference backward analysis: plain dictionaries, per-neuron Python loops,
no sparsity tricks, no vectorization.  Written against the operator rules and
the exclusion procedure directly (via the scalar reference ops), sharing no
propagation code with the optimized slicer so the two can check each other.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import engine
from .modelir import ModelGraph, NeuronId, SynapseId, combine_digests, sample_digest
from .profiler import ActivationProfile, check_profile
from .slicer import (
    ContributionTable,
    SliceError,
    _empty_table,
    _normalize_outputs,
    local_contributions,
    theta_filter,
)


def _sgn(v: float) -> int:
    return (v > 0) - (v < 0)


def oracle_backward(m: ModelGraph, p: ActivationProfile, xi, outputs, theta: float) -> ContributionTable:
    """Same contract as slicer.backward_slice, naive implementation."""
    if theta < 0:
        raise SliceError(f"theta {theta} must be >= 0")
    check_profile(p, m)
    units = _normalize_outputs(m, outputs)
    _, trace = engine.forward(m, xi, record=True)

    raw = {}
    delta = {}
    for li, vec in enumerate(trace.means):
        base = p.means[li]
        for u in range(vec.shape[0]):
            raw[NeuronId(li, u)] = float(vec[u])
            delta[NeuronId(li, u)] = float(vec[u]) - float(np.float64(base[u]))

    contrib_n: dict = defaultdict(int)
    contrib_s: dict = defaultdict(int)
    for u in units:
        contrib_n[NeuronId(len(m.layers) - 1, u)] = 1

    for li in range(len(m.layers) - 1, 0, -1):
        layer = m.layers[li]
        kind = layer.kind
        targets = [u for u in range(trace.means[li].shape[0]) if contrib_n[NeuronId(li, u)] != 0]
        if not targets:
            continue
        pred = layer.predecessors()

        if kind in ("Output", "Flatten"):
            for u in targets:
                contrib_n[NeuronId(pred[0], u)] += contrib_n[NeuronId(li, u)]
            continue

        for u in targets:
            center = NeuronId(li, u)
            c = contrib_n[center]
            dy = delta[center]
            y = raw[center]
            terms = []  # (op kind, (w,x,dx), pred NeuronId, SynapseId | None)
            aux = None
            if kind == "FullyConnected":
                op = "WeightedSum"
                w = layer.weights
                k_in = w.shape[1]
                pred_units = trace.means[pred[0]].shape[0]
                group = k_in // pred_units
                for j in range(k_in):
                    src = NeuronId(pred[0], j // group)
                    terms.append(
                        (
                            (float(np.float64(w[u, j])), raw[src], delta[src]),
                            src,
                            SynapseId(li, u, j, 0, 0),
                        )
                    )
            elif kind == "Conv2D":
                op = "WeightedSum"
                w = layer.weights
                _, ic, kh, kw = w.shape
                for cin in range(ic):
                    src = NeuronId(pred[0], cin)
                    for r in range(kh):
                        for cc in range(kw):
                            terms.append(
                                (
                                    (float(np.float64(w[u, cin, r, cc])), raw[src], delta[src]),
                                    src,
                                    SynapseId(li, u, cin, r, cc),
                                )
                            )
            elif kind == "ReLU":
                op = "Rectify"
                src = NeuronId(pred[0], u)
                terms.append(((1.0, raw[src], delta[src]), src, None))
                aux = raw[src] > 0
            elif kind == "Scale":
                op = "Scale"
                src = NeuronId(pred[0], u)
                terms.append(((1.0, raw[src], delta[src]), src, None))
            elif kind in ("AvgPool2D", "MaxPool2D"):
                op = "Average"
                src = NeuronId(pred[0], u)
                terms.append(((1.0, raw[src], delta[src]), src, None))
            elif kind == "Add":
                srcs = [NeuronId(pp, u) for pp in pred]
                if layer.params.get("combine", "sum") == "max":
                    op = "Maximum"
                    best = 0
                    for slot in range(1, len(srcs)):
                        if raw[srcs[slot]] > raw[srcs[best]]:
                            best = slot
                    aux = best
                else:
                    op = "WeightedSum"
                for src in srcs:
                    terms.append(((1.0, raw[src], delta[src]), src, None))
            else:  # pragma: no cover
                raise SliceError(f"unexpected kind {kind}")

            triples = [t[0] for t in terms]
            local = local_contributions(op, c, dy, triples, aux=aux)
            masses = [w * dx for (w, _, dx) in triples] if op == "WeightedSum" else [dx for (_, _, dx) in triples]
            retained = theta_filter(local, (op, masses, y), theta)
            for idx in retained:
                s = _sgn(local[idx])
                _, src, syn = terms[idx]
                contrib_n[src] += s
                if syn is not None:
                    contrib_s[syn] += s

    table = _empty_table(m, theta, units)
    table.sample_count = 1
    for (li, u), v in contrib_n.items():
        if v:
            table.neuron[li][u] = v
    for (li, ou, iu, kr, kc), v in contrib_s.items():
        if v:
            arr = table.synapse[li]
            if arr.ndim == 2:
                arr[ou, iu] = v
            else:
                arr[ou, iu, kr, kc] = v
    table.sample_set_hash = combine_digests([sample_digest(np.asarray(xi, dtype=np.float32), None)])
    return table
