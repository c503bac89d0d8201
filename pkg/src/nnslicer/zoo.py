"""Model builders for the desk-scale experiments and tests."""

from __future__ import annotations

import numpy as np

from .modelir import LayerSpec, ModelGraph


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def lenet(seed: int = 0, in_channels: int = 1, classes: int = 10) -> ModelGraph:
    """LeNet-scale CNN for 28x28 inputs: conv5x6 / maxpool / conv5x16 /
    avgpool / fc98 / fc10 (42,860 parameters for the default shape)."""
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(0, "Input"),
        LayerSpec(
            1,
            "Conv2D",
            {"kh": 5, "kw": 5, "stride": 1, "padding": 2},
            _he(rng, (6, in_channels, 5, 5), 25 * in_channels),
            np.zeros(6, np.float32),
        ),
        LayerSpec(2, "ReLU"),
        LayerSpec(3, "MaxPool2D", {"kh": 2, "kw": 2, "stride": 2}),
        LayerSpec(
            4,
            "Conv2D",
            {"kh": 5, "kw": 5, "stride": 1, "padding": 0},
            _he(rng, (16, 6, 5, 5), 150),
            np.zeros(16, np.float32),
        ),
        LayerSpec(5, "ReLU"),
        LayerSpec(6, "AvgPool2D", {"kh": 2, "kw": 2, "stride": 2}),
        LayerSpec(7, "Flatten"),
        LayerSpec(8, "FullyConnected", {}, _he(rng, (98, 400), 400), np.zeros(98, np.float32)),
        LayerSpec(9, "ReLU"),
        LayerSpec(10, "FullyConnected", {}, _he(rng, (classes, 98), 98), np.zeros(classes, np.float32)),
        LayerSpec(11, "Output"),
    ]
    return ModelGraph(layers, (in_channels, 28, 28), classes).check()


def linear_model(seed: int, in_features: int, classes: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(0, "Input"),
        LayerSpec(
            1,
            "FullyConnected",
            {},
            _he(rng, (classes, in_features), in_features),
            np.zeros(classes, np.float32),
        ),
        LayerSpec(2, "Output"),
    ]
    return ModelGraph(layers, (in_features,), classes).check()


def mlp(seed: int, in_features: int, hidden: int, classes: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = [
        LayerSpec(0, "Input"),
        LayerSpec(1, "FullyConnected", {}, _he(rng, (hidden, in_features), in_features), np.zeros(hidden, np.float32)),
        LayerSpec(2, "ReLU"),
        LayerSpec(3, "FullyConnected", {}, _he(rng, (classes, hidden), hidden), np.zeros(classes, np.float32)),
        LayerSpec(4, "Output"),
    ]
    return ModelGraph(layers, (in_features,), classes).check()
