"""Selective protection: hide the synapses most crucial to the target
classes, then measure what an extraction attacker recovers by retraining.

The attacker knows every exposed weight (they stay frozen) and trains only
the hidden positions, re-initialized uniformly in [-0.05, 0.05].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import engine
from ..modelir import Dataset, ModelGraph, SynapseId
from ..slicer import ContributionTable, SliceError


@dataclass
class ProtectionSet:
    hidden: dict  # layer index -> flat weight indices (sorted)
    fraction: float
    mode: str

    def total(self) -> int:
        return int(sum(len(v) for v in self.hidden.values()))

    def synapse_ids(self, m: ModelGraph):
        ids = []
        for li in sorted(self.hidden):
            shape = m.layers[li].weights.shape
            for flat in self.hidden[li]:
                if len(shape) == 2:
                    ids.append(SynapseId(li, int(flat) // shape[1], int(flat) % shape[1], 0, 0))
                else:
                    o, c, kh, kw = shape
                    rest, kc = divmod(int(flat), kw)
                    rest, kr = divmod(rest, kh)
                    ou, ic = divmod(rest, c)
                    ids.append(SynapseId(li, ou, ic, kr, kc))
        return ids


def select_protected(m: ModelGraph, t: ContributionTable, fraction: float, mode: str = "contrib", seed: int = 0) -> ProtectionSet:
    """Top floor(fraction * |S|) synapses globally by |contribution| (ties in
    canonical order), or a seeded random set / top-|weight| set for baselines."""
    if not 0.0 < fraction <= 1.0:
        raise SliceError(f"fraction {fraction} must be in (0, 1]")
    layer_ids = sorted(
        l.index for l in m.layers if l.kind in ("Conv2D", "FullyConnected")
    )
    sizes = {li: m.layers[li].weights.size for li in layer_ids}
    total = sum(sizes.values())
    take = int(np.floor(fraction * total))
    if mode == "contrib":
        if t.model_fingerprint != m.fingerprint():
            raise SliceError("contribution table fingerprint does not match this model")
        scores = np.concatenate([np.abs(t.synapse[li].reshape(-1)) for li in layer_ids]).astype(np.float64)
        order = np.argsort(-scores, kind="stable")  # descending, canonical ties
    elif mode == "weight":
        scores = np.concatenate([np.abs(m.layers[li].weights.reshape(-1)) for li in layer_ids]).astype(np.float64)
        order = np.argsort(-scores, kind="stable")
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(total)
    else:
        raise SliceError(f"unknown selection mode {mode!r}")
    chosen = np.sort(order[:take])
    hidden = {}
    base = 0
    for li in layer_ids:
        sel = chosen[(chosen >= base) & (chosen < base + sizes[li])] - base
        if sel.size:
            hidden[li] = sel.astype(np.int64)
        base += sizes[li]
    return ProtectionSet(hidden, float(fraction), mode)


def simulate_extraction(
    m: ModelGraph,
    hidden: ProtectionSet,
    attacker_data: Dataset,
    epochs: int,
    cfg: engine.TrainConfig,
    target_classes=None,
    reinit_scale: float = 0.05,
    train_exposed: bool = False,
    eval_data: Dataset | None = None,
):
    """Re-initialize hidden weights, retrain with the attacker's budget, and
    report (recovered model, target-class accuracy, all-class accuracy).

    Accuracies are measured on eval_data (held-out) when given, else on the
    attacker's own data."""
    if hidden.total() == 0:
        recovered = m.copy().check()
    else:
        recovered = m.copy()
        rng = np.random.default_rng(cfg.seed)
        wmasks = {}
        for layer in recovered.layers:
            if layer.kind not in ("Conv2D", "FullyConnected"):
                continue
            mask = np.zeros(layer.weights.size, dtype=bool)
            if layer.index in hidden.hidden:
                sel = hidden.hidden[layer.index]
                mask[sel] = True
                flat = layer.weights.reshape(-1)
                flat[sel] = rng.uniform(-reinit_scale, reinit_scale, size=sel.size).astype(np.float32)
            wmasks[layer.index] = mask.reshape(layer.weights.shape)
        train_cfg = engine.TrainConfig(cfg.learning_rate, cfg.batch_size, epochs, cfg.seed)
        if train_exposed:
            recovered = engine.sgd_train(recovered, attacker_data, train_cfg)
        else:
            bias_masks = {
                l.index: np.zeros(l.bias.shape, dtype=bool)
                for l in recovered.layers
                if l.kind in ("Conv2D", "FullyConnected") and l.bias is not None
            }
            recovered = engine.sgd_train(
                recovered, attacker_data, train_cfg, weight_masks=wmasks, bias_masks=bias_masks
            )
    probe = eval_data if eval_data is not None else attacker_data
    all_acc = engine.evaluate(recovered, probe) if len(probe) else float("nan")
    target_acc = (
        engine.evaluate(recovered, probe, classes=target_classes) if target_classes else all_acc
    )
    return recovered, target_acc, all_acc
