"""Randomized small models for the oracle-equivalence suite: up to 5 hidden
operations, up to 8 units per layer, covering every operator kind."""

from __future__ import annotations

import numpy as np

from .modelir import Dataset, LayerSpec, ModelGraph
from .profiler import ActivationProfile, profile


def _w(rng, shape):
    return rng.normal(0.0, 0.8, size=shape).astype(np.float32)


def random_model(rng: np.random.Generator, case: int = 0) -> ModelGraph:
    """A valid random graph; `case` nudges the op mix so the whole suite
    exercises every kind (conv, pools, relu, scale, add-sum, add-max, fc)."""
    spatial = case % 4 != 3  # every fourth case is a pure FC stack
    classes = int(rng.integers(2, 5))
    layers = []

    def add(kind, params=None, weights=None, bias=None):
        layers.append(LayerSpec(len(layers), kind, params or {}, weights, bias))
        return len(layers) - 1

    if spatial:
        c = int(rng.integers(1, 4))
        h = int(rng.integers(4, 7))
        input_shape = (c, h, h)
        add("Input")
        shape = input_shape
        shapes_seen = {}  # output shape -> layer index (Add candidates)
        n_ops = int(rng.integers(2, 5))
        menu = ["Conv2D", "ReLU", "Scale", "AvgPool2D", "MaxPool2D", "Add"]
        forced = menu[case % len(menu)]
        for op_i in range(n_ops):
            choices = [forced] if op_i == 0 else menu
            kind = choices[int(rng.integers(0, len(choices)))]
            if kind == "Add" and shape not in shapes_seen:
                kind = "ReLU"
            if kind in ("AvgPool2D", "MaxPool2D") and (shape[1] < 2 or shape[2] < 2):
                kind = "Scale"
            if kind == "Conv2D":
                o = int(rng.integers(1, 9))
                k = int(rng.integers(1, min(3, shape[1]) + 1))
                pad = int(rng.integers(0, 2)) if k > 1 else 0
                w = _w(rng, (o, shape[0], k, k))
                b = _w(rng, (o,)) if rng.random() < 0.7 else None
                prev = add("Conv2D", {"kh": k, "kw": k, "stride": 1, "padding": pad}, w, b)
                shape = (o, shape[1] + 2 * pad - k + 1, shape[2] + 2 * pad - k + 1)
            elif kind in ("AvgPool2D", "MaxPool2D"):
                k = 2
                prev = add(kind, {"kh": k, "kw": k, "stride": k})
                shape = (shape[0], (shape[1] - k) // k + 1, (shape[2] - k) // k + 1)
            elif kind == "ReLU":
                prev = add("ReLU")
            elif kind == "Scale":
                c0 = shape[0]
                prev = add(
                    "Scale",
                    {
                        "mu": _w(rng, (c0,)).tolist(),
                        "sigma": (0.5 + rng.random(c0) * 1.5).astype(np.float32).tolist(),
                        "gamma": _w(rng, (c0,)).tolist(),
                        "beta": _w(rng, (c0,)).tolist(),
                    },
                )
            else:  # Add
                other = shapes_seen[shape]
                combine = "max" if rng.random() < 0.5 else "sum"
                prev = add("Add", {"predecessors": [other, len(layers) - 1], "combine": combine})
            shapes_seen[shape] = prev
        add("Flatten")
        flat = shape[0] * shape[1] * shape[2]
        add("FullyConnected", {}, _w(rng, (classes, flat)), _w(rng, (classes,)))
    else:
        k = int(rng.integers(2, 9))
        input_shape = (k,)
        add("Input")
        width = k
        for _ in range(int(rng.integers(1, 3))):
            nxt = int(rng.integers(2, 9))
            add("FullyConnected", {}, _w(rng, (nxt, width)), _w(rng, (nxt,)))
            if rng.random() < 0.7:
                add("ReLU")
            width = nxt
        add("FullyConnected", {}, _w(rng, (classes, width)), _w(rng, (classes,)))
    add("Output")
    return ModelGraph(layers, input_shape, classes).check()


def random_instance(seed: int, case: int):
    """(model, profile, sample, outputs) for one equivalence check."""
    rng = np.random.default_rng([seed, case])
    m = random_model(rng, case)
    baseline = [
        (rng.normal(0.0, 1.0, size=m.input_shape).astype(np.float32), 0)
        for _ in range(int(rng.integers(2, 5)))
    ]
    p = profile(m, Dataset(baseline, m.class_count))
    xi = rng.normal(0.0, 1.0, size=m.input_shape).astype(np.float32)
    n_out = int(rng.integers(1, m.class_count + 1))
    outputs = tuple(sorted(rng.choice(m.class_count, size=n_out, replace=False).tolist()))
    return m, p, xi, outputs


def equivalence_suite(seed: int, cases: int, thetas=(0.0, 0.1, 0.3), progress=None):
    """Run backward_slice against oracle_backward; returns list of mismatch
    descriptions (empty = all exact)."""
    from .oracle import oracle_backward
    from .slicer import backward_slice

    failures = []
    for case in range(cases):
        m, p, xi, outputs = random_instance(seed, case)
        theta = thetas[case % len(thetas)]
        fast = backward_slice(m, p, xi, outputs, theta)
        ref = oracle_backward(m, p, xi, outputs, theta)
        if not fast.same_values(ref):
            failures.append(f"case {case}: tables differ (theta={theta})")
        if progress:
            progress(case, not failures or not failures[-1].startswith(f"case {case}:"))
    return failures
