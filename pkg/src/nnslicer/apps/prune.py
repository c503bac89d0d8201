"""Targeted pruning: zero the synapses least contributing to the target
classes (or least by |weight|, or at random), layer by layer.

Pruning zeroes weight entries in place of restructuring tensors; a neuron
whose synapses are all zero is considered pruned and its bias is zeroed too,
so a dead unit emits nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import engine
from ..modelir import Dataset, ModelGraph
from ..slicer import ContributionTable, SliceError

MODES = ("contrib", "weight", "random")


@dataclass
class PruneConfig:
    target_classes: tuple
    ratio: float
    theta: float = 0.0
    mode: str = "contrib"
    seed: int = 0

    def validate(self):
        if not self.target_classes:
            raise SliceError("target class set must be non-empty")
        if not 0.0 <= self.ratio <= 1.0:
            raise SliceError(f"prune ratio {self.ratio} must be in [0,1]")
        if self.mode not in MODES:
            raise SliceError(f"mode {self.mode!r} must be one of {MODES}")


def prune_order(layer_weights: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Flat synapse indices sorted ascending by score, ties in canonical
    order (stable), i.e. the order in which synapses get pruned."""
    return np.argsort(scores.reshape(-1), kind="stable")


def pruned_indices(m: ModelGraph, t: ContributionTable | None, cfg: PruneConfig) -> dict:
    """layer index -> flat weight indices to zero (a prefix of a fixed sort,
    so the pruned set grows monotonically with the ratio)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for layer in m.layers:
        if layer.kind not in ("Conv2D", "FullyConnected"):
            continue
        count = layer.weights.size
        take = int(np.floor(cfg.ratio * count))
        if cfg.mode == "contrib":
            if t is None:
                raise SliceError("contribution mode needs a contribution table")
            scores = np.abs(t.synapse[layer.index].reshape(-1)).astype(np.float64)
            order = prune_order(layer.weights, scores)
        elif cfg.mode == "weight":
            order = prune_order(layer.weights, np.abs(layer.weights.reshape(-1)).astype(np.float64))
        else:
            order = rng.permutation(count)
        out[layer.index] = order[:take]
    return out


def prune(m: ModelGraph, t: ContributionTable | None, cfg: PruneConfig) -> ModelGraph:
    """Zero the first floor(ratio * |S_l|) synapses per layer; dead neurons
    lose their bias as well.  ratio 0 returns a bit-identical copy."""
    cfg.validate()
    if cfg.mode == "contrib" and t is not None and t.model_fingerprint != m.fingerprint():
        raise SliceError("contribution table fingerprint does not match this model")
    out = m.copy()
    for li, flat in pruned_indices(m, t, cfg).items():
        layer = out.layers[li]
        w = layer.weights.reshape(-1)
        w[flat] = 0.0
        full = layer.weights.reshape(layer.weights.shape[0], -1)
        dead = ~np.any(full != 0.0, axis=1)
        if layer.bias is not None:
            layer.bias[dead] = 0.0
    return out.check()


def prune_masks(m_pruned: ModelGraph) -> tuple[dict, dict]:
    """(weight_masks, bias_masks) marking the surviving positions trainable;
    zeroed synapses and dead-neuron biases stay frozen at zero."""
    wmasks, bmasks = {}, {}
    for layer in m_pruned.layers:
        if layer.kind not in ("Conv2D", "FullyConnected"):
            continue
        wmasks[layer.index] = layer.weights != 0.0
        if layer.bias is not None:
            full = layer.weights.reshape(layer.weights.shape[0], -1)
            bmasks[layer.index] = np.any(full != 0.0, axis=1)
    return wmasks, bmasks


def fine_tune(m: ModelGraph, d: Dataset, cfg: engine.TrainConfig) -> ModelGraph:
    """Masked retraining of a pruned model: zeroed synapses stay zero."""
    wmasks, bmasks = prune_masks(m)
    return engine.sgd_train(m, d, cfg, weight_masks=wmasks, bias_masks=bmasks)
