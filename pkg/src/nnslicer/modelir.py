"""Computation-graph IR, neuron/synapse addressing, and the NNSM/NNST file formats.

A model is an ordered list of layers forming a DAG in topological order.
Every layer except ``Add`` implicitly reads the previous layer; ``Add``
names its predecessors explicitly in ``params["predecessors"]``.

Granularity convention: a "neuron" is one output channel of a spatial
layer (Conv2D, pools, ReLU, Scale, Add, Flatten) or one output unit of a
FullyConnected layer.  A "synapse" is one learned weight element; biases
and Scale parameters are not synapses.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

LAYER_KINDS = (
    "Input",
    "Conv2D",
    "FullyConnected",
    "AvgPool2D",
    "MaxPool2D",
    "ReLU",
    "Scale",
    "Add",
    "Flatten",
    "Output",
)

WEIGHTED_KINDS = ("Conv2D", "FullyConnected")

NNSM_MAGIC = b"NNSM"
NNST_MAGIC = b"NNST"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when an on-disk container is malformed."""


class GraphValidationError(ValueError):
    """Raised when a model graph violates its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NeuronId(NamedTuple):
    layer: int
    unit: int


class SynapseId(NamedTuple):
    layer: int
    out_unit: int
    in_unit: int
    k_row: int
    k_col: int


@dataclass
class LayerSpec:
    """One typed operation in the graph.

    ``params`` is kind-specific and JSON-serializable:
      Conv2D / pools: kh, kw, stride, padding
      Scale: mu, sigma, gamma, beta (per-channel lists)
      Add: predecessors (list of earlier layer indices), combine ("sum"|"max")
    """

    index: int
    kind: str
    params: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.params = _normalize_params(self.params)
        if self.weights is not None:
            self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)

    def predecessors(self) -> list[int]:
        if self.kind == "Input":
            return []
        if self.kind == "Add":
            return [int(p) for p in self.params.get("predecessors", [])]
        return [self.index - 1]


def _normalize_params(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, np.ndarray):
            v = [float(x) for x in v]
        if isinstance(v, list):
            v = [float(x) if isinstance(x, (float, np.floating)) else int(x) for x in v]
        elif isinstance(v, (np.integer, bool)):
            v = int(v)
        elif isinstance(v, np.floating):
            v = float(v)
        out[k] = v
    return out


@dataclass
class ModelGraph:
    """The network M = (N, S): ordered layers with weight tensors."""

    layers: list[LayerSpec]
    input_shape: tuple
    class_count: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def validate(self) -> list[str]:
        """Return the list of invariant violations (empty = ok)."""
        return _validate(self)

    def check(self) -> "ModelGraph":
        violations = self.validate()
        if violations:
            raise GraphValidationError(violations)
        return self

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes; the graph must validate."""
        shapes, _, problems = _infer_shapes(self)
        if problems:
            raise GraphValidationError(problems)
        return shapes

    def unit_counts(self) -> list[int]:
        """Neurons per layer (channel/unit granularity)."""
        _, units, problems = _infer_shapes(self)
        if problems:
            raise GraphValidationError(problems)
        return units

    def fingerprint(self) -> bytes:
        # Models are immutable after load (see Concurrency notes); copies
        # made for training/pruning get a fresh cache.
        fp = getattr(self, "_fp_cache", None)
        if fp is None:
            fp = hashlib.sha256(model_to_bytes(self)).digest()
            self._fp_cache = fp
        return fp

    def copy(self) -> "ModelGraph":
        layers = [
            LayerSpec(
                l.index,
                l.kind,
                json.loads(json.dumps(l.params)),
                None if l.weights is None else l.weights.copy(),
                None if l.bias is None else l.bias.copy(),
            )
            for l in self.layers
        ]
        return ModelGraph(layers, self.input_shape, self.class_count)


def _infer_shapes(m: ModelGraph):
    """Walk the graph computing (output shape, neuron count) per layer.

    Returns (shapes, unit_counts, problems); inference stops feeding
    downstream layers once a layer is broken, but keeps collecting local
    problems so validate() can report them all.
    """
    shapes: list[tuple | None] = [None] * len(m.layers)
    units: list[int] = [0] * len(m.layers)
    problems: list[str] = []

    def fail(i, msg):
        problems.append(f"layer {i} ({m.layers[i].kind}): {msg}")

    for i, layer in enumerate(m.layers):
        kind = layer.kind
        if kind not in LAYER_KINDS:
            fail(i, "unknown kind")
            continue
        preds = layer.predecessors()
        if any(p < 0 or p >= i for p in preds):
            fail(i, "predecessor indices must be earlier layers")
            continue
        if preds and any(shapes[p] is None for p in preds):
            continue  # upstream already broken
        if kind == "Input":
            if i != 0:
                fail(i, "Input must be the first layer")
                continue
            if len(m.input_shape) not in (1, 3) or any(d <= 0 for d in m.input_shape):
                fail(i, f"input shape {m.input_shape} must be rank 1 or 3, positive dims")
                continue
            shapes[i] = m.input_shape
            units[i] = m.input_shape[0]
            continue
        ps = shapes[preds[0]]
        if kind == "Conv2D":
            if len(ps) != 3:
                fail(i, f"needs a rank-3 input, got {ps}")
                continue
            if layer.weights is None or layer.weights.ndim != 4:
                fail(i, "needs a rank-4 weight tensor [out,in,kh,kw]")
                continue
            o, c, kh, kw = layer.weights.shape
            if (kh, kw) != (int(layer.params.get("kh", kh)), int(layer.params.get("kw", kw))):
                fail(i, "kernel params disagree with weight shape")
                continue
            s = int(layer.params.get("stride", 1))
            p = int(layer.params.get("padding", 0))
            if c != ps[0]:
                fail(i, f"weight expects {c} input channels, predecessor has {ps[0]}")
                continue
            ho = (ps[1] + 2 * p - kh) // s + 1
            wo = (ps[2] + 2 * p - kw) // s + 1
            if s < 1 or p < 0 or ho < 1 or wo < 1:
                fail(i, f"kernel {kh}x{kw} stride {s} pad {p} does not fit input {ps}")
                continue
            if layer.bias is not None and layer.bias.shape != (o,):
                fail(i, f"bias shape {layer.bias.shape} != ({o},)")
                continue
            shapes[i] = (o, ho, wo)
            units[i] = o
        elif kind in ("AvgPool2D", "MaxPool2D"):
            if len(ps) != 3:
                fail(i, f"needs a rank-3 input, got {ps}")
                continue
            kh = int(layer.params.get("kh", 2))
            kw = int(layer.params.get("kw", 2))
            s = int(layer.params.get("stride", kh))
            p = int(layer.params.get("padding", 0))
            if p >= kh or p >= kw:
                fail(i, "pool padding must be smaller than the kernel")
                continue
            ho = (ps[1] + 2 * p - kh) // s + 1
            wo = (ps[2] + 2 * p - kw) // s + 1
            if s < 1 or ho < 1 or wo < 1:
                fail(i, f"pool {kh}x{kw} stride {s} does not fit input {ps}")
                continue
            shapes[i] = (ps[0], ho, wo)
            units[i] = ps[0]
        elif kind == "ReLU":
            shapes[i] = ps
            units[i] = ps[0]
        elif kind == "Scale":
            c = ps[0]
            try:
                mu, sigma, gamma, beta = (
                    np.asarray(layer.params[k], dtype=np.float64)
                    for k in ("mu", "sigma", "gamma", "beta")
                )
            except KeyError as e:
                fail(i, f"missing Scale parameter {e}")
                continue
            if not all(len(v) == c for v in (mu, sigma, gamma, beta)):
                fail(i, f"Scale parameters must have {c} channels")
                continue
            if not np.all(sigma > 0):
                fail(i, "sigma must be > 0 in every channel")
                continue
            shapes[i] = ps
            units[i] = c
        elif kind == "Add":
            if len(preds) < 2:
                fail(i, "Add needs at least two predecessors")
                continue
            if any(shapes[p] != ps for p in preds):
                fail(i, f"predecessor shapes differ: {[shapes[p] for p in preds]}")
                continue
            if layer.params.get("combine", "sum") not in ("sum", "max"):
                fail(i, "combine must be 'sum' or 'max'")
                continue
            shapes[i] = ps
            units[i] = ps[0]
        elif kind == "Flatten":
            if len(ps) != 3:
                fail(i, f"needs a rank-3 input, got {ps}")
                continue
            shapes[i] = (ps[0] * ps[1] * ps[2],)
            units[i] = ps[0]  # channel granularity survives the reindexing
        elif kind == "FullyConnected":
            if len(ps) != 1:
                fail(i, f"needs a rank-1 input (insert Flatten), got {ps}")
                continue
            if layer.weights is None or layer.weights.ndim != 2:
                fail(i, "needs a rank-2 weight tensor [out,in]")
                continue
            o, k = layer.weights.shape
            if k != ps[0]:
                fail(i, f"weight expects {k} inputs, predecessor provides {ps[0]}")
                continue
            if layer.bias is not None and layer.bias.shape != (o,):
                fail(i, f"bias shape {layer.bias.shape} != ({o},)")
                continue
            shapes[i] = (o,)
            units[i] = o
        elif kind == "Output":
            if i != len(m.layers) - 1:
                fail(i, "Output must be the last layer")
                continue
            if m.layers[preds[0]].kind != "FullyConnected":
                fail(i, "Output must follow a FullyConnected layer")
                continue
            if ps != (m.class_count,):
                fail(i, f"logit count {ps} != class_count {m.class_count}")
                continue
            shapes[i] = ps
            units[i] = m.class_count
    return shapes, units, problems


def _validate(m: ModelGraph) -> list[str]:
    problems = []
    if not m.layers:
        return ["model has no layers"]
    for i, layer in enumerate(m.layers):
        if layer.index != i:
            problems.append(f"layer {i}: index field says {layer.index}")
    kinds = [l.kind for l in m.layers]
    if kinds.count("Input") != 1 or kinds[0] != "Input":
        problems.append("model must have exactly one Input layer, first")
    if kinds.count("Output") != 1 or kinds[-1] != "Output":
        problems.append("model must have exactly one Output layer, last")
    if m.class_count < 1:
        problems.append(f"class_count {m.class_count} must be positive")
    for i, layer in enumerate(m.layers):
        for arr, name in ((layer.weights, "weights"), (layer.bias, "bias")):
            if arr is None:
                continue
            if arr.dtype != np.float32:
                problems.append(f"layer {i}: {name} must be float32")
            elif not np.all(np.isfinite(arr)):
                problems.append(f"layer {i}: non-finite {name}")
        if layer.kind not in WEIGHTED_KINDS and layer.weights is not None:
            problems.append(f"layer {i} ({layer.kind}): carries weights but is weightless")
    if problems:
        return problems
    _, _, shape_problems = _infer_shapes(m)
    return shape_problems


# ---------------------------------------------------------------------------
# Neuron / synapse enumeration


def enumerate_neurons(m: ModelGraph) -> list[NeuronId]:
    """Layer-major, unit-major; one neuron per output channel/unit."""
    units = m.unit_counts()
    return [NeuronId(i, u) for i in range(len(m.layers)) for u in range(units[i])]


def enumerate_synapses(m: ModelGraph) -> list[SynapseId]:
    """One synapse per weight element; layer-major, then (out, in, k_row, k_col)."""
    out = []
    for layer in m.layers:
        out.extend(iter_layer_synapses(layer))
    return out


def iter_layer_synapses(layer: LayerSpec) -> Iterator[SynapseId]:
    if layer.kind == "Conv2D":
        o, c, kh, kw = layer.weights.shape
        for ou in range(o):
            for ic in range(c):
                for r in range(kh):
                    for cc in range(kw):
                        yield SynapseId(layer.index, ou, ic, r, cc)
    elif layer.kind == "FullyConnected":
        o, k = layer.weights.shape
        for ou in range(o):
            for iu in range(k):
                yield SynapseId(layer.index, ou, iu, 0, 0)


def neuron_count(m: ModelGraph) -> int:
    return sum(m.unit_counts())


def synapse_count(m: ModelGraph) -> int:
    return sum(l.weights.size for l in m.layers if l.kind in WEIGHTED_KINDS)


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class Dataset:
    """Labeled samples; every tensor must match the model input shape it is
    used with, labels must be < class_count."""

    samples: list  # [(ndarray float32, int label)]
    class_count: int

    def __len__(self):
        return len(self.samples)

    def tensors(self) -> np.ndarray:
        return np.stack([s for s, _ in self.samples])

    def labels(self) -> np.ndarray:
        return np.asarray([l for _, l in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.class_count)

    def restrict_classes(self, classes) -> "Dataset":
        keep = set(int(c) for c in classes)
        return Dataset([s for s in self.samples if s[1] in keep], self.class_count)

    def validate(self) -> list[str]:
        problems = []
        for i, (x, label) in enumerate(self.samples):
            if x.dtype != np.float32:
                problems.append(f"sample {i}: dtype {x.dtype} is not float32")
            elif not np.all(np.isfinite(x)):
                problems.append(f"sample {i}: non-finite values")
            if label is not None and not (0 <= label < self.class_count):
                problems.append(f"sample {i}: label {label} out of range [0,{self.class_count})")
        return problems


def sample_digest(x: np.ndarray, label) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack("<I", x.ndim))
    h.update(struct.pack(f"<{x.ndim}I", *x.shape))
    h.update(struct.pack("<i", -1 if label is None else int(label)))
    h.update(np.ascontiguousarray(x, dtype="<f4").tobytes())
    return h.digest()


def combine_digests(digests) -> bytes:
    """Order-independent multiset combination (sum mod 2^256)."""
    total = 0
    for d in digests:
        total = (total + int.from_bytes(d, "little")) % (1 << 256)
    return total.to_bytes(32, "little")


def dataset_digest(d: Dataset) -> bytes:
    return combine_digests(sample_digest(x, label) for x, label in d.samples)


# ---------------------------------------------------------------------------
# NNSM model container


def _align8(n: int) -> int:
    return (n + 7) & ~7


def model_to_bytes(m: ModelGraph) -> bytes:
    violations = m.validate()
    if violations:
        raise GraphValidationError(violations)
    blobs = []
    offset = 0
    layer_records = []
    for layer in m.layers:
        rec = {"index": layer.index, "kind": layer.kind, "params": layer.params}
        for name, arr in (("weights", layer.weights), ("bias", layer.bias)):
            if arr is None:
                rec[name] = None
            else:
                offset = _align8(offset)
                rec[name] = {"shape": list(arr.shape), "offset": offset}
                blobs.append((offset, np.ascontiguousarray(arr, dtype="<f4").tobytes()))
                offset += arr.nbytes
        layer_records.append(rec)
    header = {
        "class_count": m.class_count,
        "input_shape": list(m.input_shape),
        "layers": layer_records,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = NNSM_MAGIC + struct.pack("<B", FORMAT_VERSION) + struct.pack("<Q", len(header_bytes))
    blob_base = _align8(len(prefix) + len(header_bytes))
    out = bytearray(blob_base + offset)
    out[: len(prefix)] = prefix
    out[len(prefix) : len(prefix) + len(header_bytes)] = header_bytes
    for off, payload in blobs:
        out[blob_base + off : blob_base + off + len(payload)] = payload
    return bytes(out)


def model_from_bytes(data: bytes) -> ModelGraph:
    if len(data) < 13 or data[:4] != NNSM_MAGIC:
        raise FormatError("not an NNSM file (bad magic)")
    version = data[4]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported NNSM version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 5)
    if 13 + hlen > len(data):
        raise FormatError("truncated NNSM header")
    try:
        header = json.loads(data[13 : 13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed NNSM header: {e}") from None
    blob_base = _align8(13 + hlen)
    layers = []
    try:
        for rec in header["layers"]:
            arrays = {}
            for name in ("weights", "bias"):
                if rec[name] is None:
                    arrays[name] = None
                    continue
                shape = tuple(int(d) for d in rec[name]["shape"])
                off = blob_base + int(rec[name]["offset"])
                n = int(np.prod(shape)) if shape else 1
                if off + n * 4 > len(data):
                    raise FormatError(f"layer {rec['index']}: tensor payload out of bounds")
                arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
                arrays[name] = arr.copy()
            layers.append(
                LayerSpec(int(rec["index"]), rec["kind"], rec["params"], arrays["weights"], arrays["bias"])
            )
        m = ModelGraph(layers, tuple(header["input_shape"]), int(header["class_count"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (FormatError, GraphValidationError)):
            raise
        raise FormatError(f"malformed NNSM header: {e}") from None
    return m.check()


def save_model(m: ModelGraph, path) -> None:
    data = model_to_bytes(m)
    with open(path, "wb") as f:
        f.write(data)


def load_model(path) -> ModelGraph:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


# ---------------------------------------------------------------------------
# NNST tensor/dataset container


def save_dataset(d: Dataset, path) -> None:
    problems = d.validate()
    if problems:
        raise GraphValidationError(problems)
    with open(path, "wb") as f:
        f.write(NNST_MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", len(d.samples)))
        for x, label in d.samples:
            f.write(struct.pack("<I", x.ndim))
            f.write(struct.pack(f"<{x.ndim}I", *x.shape))
            f.write(struct.pack("<i", -1 if label is None else int(label)))
            f.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_dataset(path, class_count: int | None = None) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NNST_MAGIC:
        raise FormatError("not an NNST file (bad magic)")
    if data[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported NNST version {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    samples = []
    for i in range(count):
        try:
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            (label,) = struct.unpack_from("<i", data, pos)
            pos += 4
            n = int(np.prod(shape)) if shape else 1
            if pos + 4 * n > len(data):
                raise struct.error("payload extends past end of file")
            x = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
        except struct.error:
            raise FormatError(f"truncated NNST payload at tensor {i}") from None
        if not np.all(np.isfinite(x)):
            raise FormatError(f"tensor {i}: non-finite values")
        samples.append((x, None if label < 0 else int(label)))
    if class_count is None:
        labels = [l for _, l in samples if l is not None]
        class_count = (max(labels) + 1) if labels else 0
    d = Dataset(samples, class_count)
    problems = d.validate()
    if problems:
        raise FormatError("; ".join(problems))
    return d
