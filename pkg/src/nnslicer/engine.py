"""Forward execution with activation tracing, exact gradients, and a plain
SGD trainer.

All computation is batched internally over [N, ...] arrays.  float32 is the
default; dtype=np.float64 is the flagged high-precision mode used by test
oracles.  Reduction order inside each operation is fixed, so repeated
single-threaded runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modelir import Dataset, ModelGraph


class EngineError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Plain SGD over softmax cross-entropy."""

    learning_rate: float
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def validate(self):
        if not self.learning_rate >= 0:
            raise EngineError(f"learning rate {self.learning_rate} must be >= 0")
        if self.batch_size < 1:
            raise EngineError(f"batch size {self.batch_size} must be >= 1")
        if self.epochs < 0:
            raise EngineError(f"epochs {self.epochs} must be >= 0")


@dataclass
class ActivationTrace:
    """Per-neuron mean activation of one inference pass, at channel
    granularity, plus the forward-time facts the slicer consumes."""

    means: list  # per layer: float64 [units], spatial mean per channel
    counts: list  # per layer: activations per neuron (m)
    logits: np.ndarray
    predicted: int
    maxpool_argmax: dict = field(default_factory=dict)  # layer -> int32 [C,Ho,Wo] flat input index
    addmax_winner: dict = field(default_factory=dict)  # layer -> int32 [C] predecessor slot
    model_fingerprint: bytes = b""

    def neuron_total(self) -> int:
        return sum(v.shape[0] for v in self.means)


def _chan_shape(rank: int):
    return (-1, 1, 1) if rank == 4 else (-1,)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for r in range(kh):
        for cc in range(kw):
            cols[:, :, r, cc] = x[:, :, r : r + stride * ho : stride, cc : cc + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, dtype):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp), dtype=dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for r in range(kh):
        for cc in range(kw):
            dxp[:, :, r : r + stride * ho : stride, cc : cc + stride * wo : stride] += d6[:, :, r, cc]
    if pad:
        return dxp[:, :, pad : hp - pad, pad : wp - pad]
    return dxp


def _pool_windows(x, kh, kw, stride, pad, fill):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.empty((n, c, kh * kw, ho, wo), dtype=x.dtype)
    for r in range(kh):
        for cc in range(kw):
            win[:, :, r * kw + cc] = x[:, :, r : r + stride * ho : stride, cc : cc + stride * wo : stride]
    return win, ho, wo


def _pool_geometry(layer):
    kh = int(layer.params.get("kh", 2))
    kw = int(layer.params.get("kw", 2))
    stride = int(layer.params.get("stride", kh))
    pad = int(layer.params.get("padding", 0))
    return kh, kw, stride, pad


def _run(m: ModelGraph, x: np.ndarray, record: bool, dtype, need_cache: bool = False):
    """Execute the graph on a batch.  Returns (logits, record dict, caches)."""
    if x.shape[1:] != m.input_shape:
        raise EngineError(f"input shape {x.shape[1:]} does not match model {m.input_shape}")
    x = np.ascontiguousarray(x, dtype=dtype)
    outs: list = [None] * len(m.layers)
    caches: list = [None] * len(m.layers)
    rec = {"means": [], "counts": [], "maxpool_argmax": {}, "addmax_winner": {}} if record else None

    for i, layer in enumerate(m.layers):
        kind = layer.kind
        if kind == "Input":
            y = x
        elif kind == "Conv2D":
            xin = outs[i - 1]
            w = layer.weights.astype(dtype, copy=False)
            o, c, kh, kw = w.shape
            stride = int(layer.params.get("stride", 1))
            pad = int(layer.params.get("padding", 0))
            cols, ho, wo = _im2col(xin, kh, kw, stride, pad)
            w2 = w.reshape(o, c * kh * kw)
            # (N,L,K) @ (K,O): same GEMM orientation as FullyConnected so a
            # 1x1-spatial Conv2D reproduces FC logits bit-for-bit in 64-bit.
            y = np.matmul(cols.transpose(0, 2, 1), w2.T)
            if layer.bias is not None:
                y = y + layer.bias.astype(dtype, copy=False)
            y = y.transpose(0, 2, 1).reshape(xin.shape[0], o, ho, wo)
            if need_cache:
                caches[i] = cols
        elif kind == "FullyConnected":
            xin = outs[i - 1]
            w = layer.weights.astype(dtype, copy=False)
            y = xin @ w.T
            if layer.bias is not None:
                y = y + layer.bias.astype(dtype, copy=False)
        elif kind == "ReLU":
            y = np.maximum(outs[i - 1], 0)
        elif kind == "Scale":
            xin = outs[i - 1]
            cs = _chan_shape(xin.ndim)
            mu, sigma, gamma, beta = (
                np.asarray(layer.params[k], dtype=dtype).reshape(cs)
                for k in ("mu", "sigma", "gamma", "beta")
            )
            y = gamma * (xin - mu) / sigma + beta
        elif kind == "AvgPool2D":
            kh, kw, stride, pad = _pool_geometry(layer)
            win, ho, wo = _pool_windows(outs[i - 1], kh, kw, stride, pad, 0.0)
            y = win.sum(axis=2) / (kh * kw)
        elif kind == "MaxPool2D":
            kh, kw, stride, pad = _pool_geometry(layer)
            win, ho, wo = _pool_windows(outs[i - 1], kh, kw, stride, pad, -np.inf)
            arg = win.argmax(axis=2)  # ties -> lowest kernel offset = lowest input index
            y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
            if need_cache:
                caches[i] = arg
            if record:
                rec["maxpool_argmax"][i] = _abs_argmax(arg, kh, kw, stride, pad, outs[i - 1].shape[3])
        elif kind == "Add":
            preds = layer.predecessors()
            stack = np.stack([outs[p] for p in preds])
            if layer.params.get("combine", "sum") == "max":
                winner = stack.argmax(axis=0)  # ties -> lowest predecessor slot
                y = np.take_along_axis(stack, winner[None], axis=0)[0]
                if need_cache:
                    caches[i] = winner
            else:
                y = stack.sum(axis=0)
        elif kind == "Flatten":
            y = outs[i - 1].reshape(outs[i - 1].shape[0], -1)
        elif kind == "Output":
            y = outs[i - 1]
        else:  # pragma: no cover - validate() rejects unknown kinds
            raise EngineError(f"layer {i}: unknown kind {kind}")
        if not np.all(np.isfinite(y)):
            raise EngineError(f"layer {i} ({kind}): non-finite activation")
        outs[i] = y
        if record:
            _record_layer(rec, m, i, layer, y)
    logits = outs[-1]
    if record:
        for i, layer in enumerate(m.layers):
            if layer.kind == "Add" and layer.params.get("combine", "sum") == "max":
                # channel-granularity winner: predecessor with the largest
                # recorded channel mean, ties toward the lowest slot
                pred_means = np.stack([rec["means"][p] for p in layer.predecessors()])
                rec["addmax_winner"][i] = pred_means.argmax(axis=0).astype(np.int32)
    return logits, rec, (outs if need_cache else None, caches)


def _abs_argmax(arg, kh, kw, stride, pad, in_width):
    """Window-relative argmax -> flat index into the (unpadded) input plane."""
    n, c, ho, wo = arg.shape
    rr = arg // kw
    cc = arg % kw
    base_r = (np.arange(ho) * stride - pad)[None, None, :, None]
    base_c = (np.arange(wo) * stride - pad)[None, None, None, :]
    return ((base_r + rr) * in_width + (base_c + cc)).astype(np.int32)


def _record_layer(rec, m, i, layer, y):
    if y.ndim == 4:
        means = y.mean(axis=(2, 3), dtype=np.float64)
        spatial = y.shape[2] * y.shape[3]
    else:
        means = y.astype(np.float64, copy=False)
        spatial = 1
    if layer.kind in ("FullyConnected", "Scale", "ReLU", "Add", "Output"):
        count = 1
    elif layer.kind == "Flatten":
        # regroup the flattened vector by source channel: mean per channel
        prev_units = rec["means"][i - 1].shape[1]
        means = y.astype(np.float64, copy=False).reshape(y.shape[0], prev_units, -1)
        count = means.shape[2]
        means = means.mean(axis=2)
    else:  # Input, Conv2D, pools: one activation per spatial position
        count = spatial
    rec["means"].append(np.atleast_2d(means))
    rec["counts"].append(count)


def forward(m: ModelGraph, x: np.ndarray, record: bool = False, dtype=np.float32):
    """Run one sample; returns (logits, ActivationTrace | None)."""
    if x.shape != m.input_shape:
        raise EngineError(f"input shape {x.shape} does not match model {m.input_shape}")
    logits, rec, _ = _run(m, x[None], record, dtype)
    logits = logits[0]
    if not record:
        return logits, None
    trace = ActivationTrace(
        means=[v[0] for v in rec["means"]],
        counts=rec["counts"],
        logits=logits,
        predicted=int(np.argmax(logits)),
        maxpool_argmax={k: v[0] for k, v in rec["maxpool_argmax"].items()},
        addmax_winner={k: v[0] for k, v in rec["addmax_winner"].items()},
        model_fingerprint=m.fingerprint(),
    )
    return logits, trace


def run_batch_traced(m: ModelGraph, x: np.ndarray, dtype=np.float32):
    """Batched forward that returns logits plus per-sample channel means
    (used by the profiler; cheaper than per-sample forward())."""
    logits, rec, _ = _run(m, x, record=True, dtype=dtype)
    return logits, rec["means"]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradients(m: ModelGraph, batch: np.ndarray, labels, dtype=np.float32):
    """Mean softmax cross-entropy over the batch and its exact gradients.

    Returns (loss, weight_grads, input_grads) with weight_grads a dict
    layer_index -> (dW, db or None).
    """
    labels = np.asarray(labels)
    if batch.ndim == len(m.input_shape):
        batch = batch[None]
    if labels.ndim == 0:
        labels = labels[None]
    if batch.shape[0] != labels.shape[0]:
        raise EngineError(f"batch of {batch.shape[0]} samples but {labels.shape[0]} labels")
    n = batch.shape[0]
    logits, _, (outs, caches) = _run(m, batch, record=False, dtype=dtype, need_cache=True)
    probs = _softmax(logits)
    eps = np.finfo(dtype).tiny
    loss = float(-np.log(probs[np.arange(n), labels] + eps).mean())

    dout: list = [None] * len(m.layers)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dout[len(m.layers) - 1] = dlogits / n

    weight_grads = {}
    dinput = None
    for i in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[i]
        g = dout[i]
        if g is None:
            continue
        kind = layer.kind

        def send(p, dx):
            if dout[p] is None:
                dout[p] = dx
            else:
                dout[p] = dout[p] + dx

        if kind == "Input":
            dinput = g
        elif kind == "Output":
            send(i - 1, g)
        elif kind == "FullyConnected":
            xin = outs[i - 1]
            w = layer.weights.astype(dtype, copy=False)
            dw = g.T @ xin
            db = g.sum(axis=0) if layer.bias is not None else None
            weight_grads[i] = (dw, db)
            send(i - 1, g @ w)
        elif kind == "Conv2D":
            cols = caches[i]
            w = layer.weights.astype(dtype, copy=False)
            o, c, kh, kw = w.shape
            nb, _, ho, wo = g.shape
            g2 = g.reshape(nb, o, ho * wo)
            dw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
            db = g.sum(axis=(0, 2, 3)) if layer.bias is not None else None
            weight_grads[i] = (dw, db)
            dcols = np.matmul(w.reshape(o, -1).T, g2)
            stride = int(layer.params.get("stride", 1))
            pad = int(layer.params.get("padding", 0))
            send(i - 1, _col2im(dcols, outs[i - 1].shape, kh, kw, stride, pad, dtype))
        elif kind == "ReLU":
            send(i - 1, g * (outs[i - 1] > 0))
        elif kind == "Scale":
            cs = _chan_shape(outs[i - 1].ndim)
            gamma = np.asarray(layer.params["gamma"], dtype=dtype).reshape(cs)
            sigma = np.asarray(layer.params["sigma"], dtype=dtype).reshape(cs)
            send(i - 1, g * (gamma / sigma))
        elif kind == "AvgPool2D":
            kh, kw, stride, pad = _pool_geometry(layer)
            nb, c, ho, wo = g.shape
            dwin = np.broadcast_to((g / (kh * kw))[:, :, None], (nb, c, kh * kw, ho, wo))
            send(i - 1, _col2im(dwin.reshape(nb, c * kh * kw, ho * wo), outs[i - 1].shape, kh, kw, stride, pad, dtype))
        elif kind == "MaxPool2D":
            kh, kw, stride, pad = _pool_geometry(layer)
            nb, c, ho, wo = g.shape
            dwin = np.zeros((nb, c, kh * kw, ho, wo), dtype=dtype)
            np.put_along_axis(dwin, caches[i][:, :, None], g[:, :, None], axis=2)
            send(i - 1, _col2im(dwin.reshape(nb, c * kh * kw, ho * wo), outs[i - 1].shape, kh, kw, stride, pad, dtype))
        elif kind == "Add":
            preds = layer.predecessors()
            if layer.params.get("combine", "sum") == "max":
                winner = caches[i]
                for slot, p in enumerate(preds):
                    send(p, g * (winner == slot))
            else:
                for p in preds:
                    send(p, g)
        elif kind == "Flatten":
            send(i - 1, g.reshape(outs[i - 1].shape))
    return loss, weight_grads, dinput


def predict(m: ModelGraph, batch: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Argmax labels for a batch; ties break toward the lowest class index."""
    if batch.ndim == len(m.input_shape):
        batch = batch[None]
    logits, _, _ = _run(m, batch, record=False, dtype=dtype)
    return logits.argmax(axis=1)


def evaluate(m: ModelGraph, d: Dataset, classes=None, batch_size: int = 256, dtype=np.float32) -> float:
    """Accuracy over d, optionally restricted to samples whose labels lie in
    `classes`."""
    if classes is not None:
        d = d.restrict_classes(classes)
    if len(d) == 0:
        raise EngineError("empty evaluation set")
    xs = d.tensors()
    ys = d.labels()
    hits = 0
    for start in range(0, len(d), batch_size):
        pred = predict(m, xs[start : start + batch_size], dtype=dtype)
        hits += int((pred == ys[start : start + batch_size]).sum())
    return hits / len(d)


def sgd_train(
    m: ModelGraph,
    d: Dataset,
    cfg: TrainConfig,
    weight_masks: dict | None = None,
    bias_masks: dict | None = None,
    log=None,
) -> ModelGraph:
    """Plain SGD; returns an updated copy.  Optional boolean masks restrict
    which weight/bias positions are trainable (False entries stay fixed);
    masked-out zeros therefore stay exactly zero."""
    cfg.validate()
    model = m.copy().check()
    if len(d) == 0:
        raise EngineError("empty training set")
    xs = d.tensors()
    ys = d.labels()
    rng = np.random.default_rng(cfg.seed)
    lr = np.float32(cfg.learning_rate)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(d))
        epoch_loss = 0.0
        for start in range(0, len(d), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, _ = loss_and_gradients(model, xs[idx], ys[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}")
            epoch_loss += loss * len(idx)
            for li, (dw, db) in grads.items():
                layer = model.layers[li]
                if weight_masks and li in weight_masks:
                    dw = dw * weight_masks[li]
                layer.weights -= lr * dw.astype(np.float32)
                if db is not None:
                    if bias_masks and li in bias_masks:
                        db = db * bias_masks[li]
                    layer.bias -= lr * db.astype(np.float32)
        if log is not None:
            log(epoch, epoch_loss / len(d))
    return model
