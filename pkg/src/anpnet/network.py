"""The fixed 13-stage network graph, its initializers, and weight files.

Topology (input 3x227x227):

    conv1 -> relu -> pool1 -> norm1
    conv2 -> relu -> pool2 -> norm2
    conv3 -> relu -> conv4 -> relu -> conv5 -> relu -> pool5
    fc6 -> relu -> dropout -> fc7 -> relu -> dropout -> fc8 -> softmax

Only fc8's output extent depends on the class count. A width divisor
shrinks every channel and hidden dimension by the same integer factor
(the spatial geometry, grouping, strides and pads are untouched) so the
same graph runs at desk scale; divisor 1 is the full-size model.

Weight file format (little-endian throughout):

    magic "DSBW" | version u32 | num_classes u32 | 3 x f32 channel means
    | vocab_checksum u32 | records... | crc32 u32

Each record is ``name_len u32, name utf-8, dtype_tag u32 (0 = f32),
rank u32, extents u32 x rank, raw f32 data``. Records run until four
bytes remain; the trailing u32 is the CRC-32 of everything before it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ShapeError
from .layers import (
    ConvParams, DropoutState, LrnParams,
    conv_backward, conv_forward, dropout_backward, dropout_forward,
    fc_backward, fc_forward, lrn_backward, lrn_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_loss,
)
from .tensor import DEFAULT_DTYPE, Rng, Tensor

MAGIC = b"DSBW"
FORMAT_VERSION = 1
INPUT_SHAPE = (3, 227, 227)
INIT_STD = 0.01

# (name, out_channels, kernel, stride, pad, groups) at full width.
_CONV_SPECS = [
    ("conv1", 96, 11, 4, 0, 1),
    ("conv2", 256, 5, 1, 2, 2),
    ("conv3", 384, 3, 1, 1, 1),
    ("conv4", 384, 3, 1, 1, 2),
    ("conv5", 256, 3, 1, 1, 2),
]
_FC_WIDTH = 4096
_POOL_AFTER = {"conv1": "pool1", "conv2": "pool2", "conv5": "pool5"}
_NORM_AFTER = {"pool1": "norm1", "pool2": "norm2"}
# Layers whose biases start at 0.1; the rest start at 0.
_BIAS_POINT_ONE = {"conv2", "conv4", "conv5", "fc6", "fc7"}

CONV_NAMES = [s[0] for s in _CONV_SPECS]
FC_NAMES = ["fc6", "fc7", "fc8"]
PARAM_NAMES = CONV_NAMES + FC_NAMES


@dataclass
class FcParams:
    weights: Tensor
    bias: Tensor


@dataclass
class NetworkModel:
    num_classes: int
    width_divisor: int
    dropout_rate: float
    dtype: np.dtype
    params: dict = field(repr=False)
    channel_means: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    vocab_checksum: int = 0
    format_version: int = FORMAT_VERSION

    def parameters(self):
        """Ordered name -> {"weights": array, "bias": array} views."""
        return {
            name: {"weights": p.weights, "bias": p.bias}
            for name, p in self.params.items()
        }

    def parameter_count(self):
        """(total, weights, biases) element counts."""
        weights = sum(p.weights.size for p in self.params.values())
        biases = sum(p.bias.size for p in self.params.values())
        return weights + biases, weights, biases


def _scaled_channels(width_divisor: int):
    """Per-layer channel counts after width reduction, validated."""
    if width_divisor < 1:
        raise ParameterError(f"width divisor must be >= 1, got {width_divisor}")
    channels = {}
    for name, out_c, _, _, _, groups in _CONV_SPECS:
        if out_c % width_divisor:
            raise ParameterError(
                f"width divisor {width_divisor} does not divide {name} ({out_c})")
        scaled = out_c // width_divisor
        if scaled % groups:
            raise ParameterError(
                f"width divisor {width_divisor} breaks {name} grouping")
        channels[name] = scaled
    if _FC_WIDTH % width_divisor:
        raise ParameterError(
            f"width divisor {width_divisor} does not divide fc width {_FC_WIDTH}")
    channels["fc"] = _FC_WIDTH // width_divisor
    return channels


def layer_shapes(num_classes: int, width_divisor: int = 1):
    """Expected (name -> weights shape) map, plus the flattened pool5 size."""
    ch = _scaled_channels(width_divisor)
    shapes = {}
    in_c = INPUT_SHAPE[0]
    for name, _, kernel, _, _, groups in _CONV_SPECS:
        out_c = ch[name]
        if in_c % groups:
            raise ParameterError(f"width divisor leaves {name} input ungroupable")
        shapes[name] = (out_c, in_c // groups, kernel, kernel)
        in_c = out_c
    flat = ch["conv5"] * 6 * 6
    shapes["fc6"] = (ch["fc"], flat)
    shapes["fc7"] = (ch["fc"], ch["fc"])
    shapes["fc8"] = (num_classes, ch["fc"])
    return shapes, flat


def build(num_classes: int, width_divisor: int = 1, dropout_rate: float = 0.5,
          dtype=DEFAULT_DTYPE) -> NetworkModel:
    """Allocate the fixed topology; parameters are uninitialized."""
    if num_classes < 2:
        raise ParameterError(f"num_classes must be >= 2, got {num_classes}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    shapes, _ = layer_shapes(num_classes, width_divisor)
    params = {}
    for name, _, kernel, stride, pad, groups in _CONV_SPECS:
        params[name] = ConvParams(
            weights=np.empty(shapes[name], dtype=dtype),
            bias=np.empty(shapes[name][0], dtype=dtype),
            stride=stride, pad=pad, groups=groups,
        )
    for name in FC_NAMES:
        params[name] = FcParams(
            weights=np.empty(shapes[name], dtype=dtype),
            bias=np.empty(shapes[name][0], dtype=dtype),
        )
    return NetworkModel(
        num_classes=num_classes,
        width_divisor=width_divisor,
        dropout_rate=dropout_rate,
        dtype=np.dtype(dtype),
        params=params,
    )


def init_scratch(model: NetworkModel, rng: Rng) -> NetworkModel:
    """Gaussian(0, 0.01) weights; biases 0.1 on conv2/4/5 and fc6/7, else 0."""
    for name in PARAM_NAMES:
        p = model.params[name]
        p.weights[...] = rng.normal(0.0, INIT_STD, p.weights.shape, model.dtype)
        p.bias[...] = 0.1 if name in _BIAS_POINT_ONE else 0.0
    return model


def init_finetune(model: NetworkModel, pretrained_path, rng: Rng) -> NetworkModel:
    """Copy conv1..fc7 from a weight file; redraw fc8 for the new class count."""
    source = load_weights(pretrained_path, dropout_rate=model.dropout_rate)
    for name in PARAM_NAMES[:-1]:
        src, dst = source.params[name], model.params[name]
        if src.weights.shape != dst.weights.shape:
            raise FormatError(
                f"pretrained {name} shape {src.weights.shape} != "
                f"expected {dst.weights.shape}")
        dst.weights[...] = src.weights.astype(model.dtype)
        dst.bias[...] = src.bias.astype(model.dtype)
    fc8 = model.params["fc8"]
    fc8.weights[...] = rng.normal(0.0, INIT_STD, fc8.weights.shape, model.dtype)
    fc8.bias[...] = 0.0
    model.channel_means = source.channel_means.copy()
    return model


@dataclass
class ItemCache:
    """Per-item stage outputs and backward bookkeeping for one forward pass."""

    stages: dict
    pool_indices: dict
    drop_states: dict
    probs: Tensor


@dataclass
class BatchActivations:
    mode: str
    items: list


_LRN = LrnParams()


def _forward_item(model: NetworkModel, x: Tensor, mode: str,
                  item_rng: Rng | None) -> ItemCache:
    stages = {"data": x}
    pool_indices = {}
    drop_states = {}
    cur = x
    for name, _, _, _, _, _ in _CONV_SPECS:
        cur = conv_forward(cur, model.params[name])
        stages[name] = cur
        cur = relu_forward(cur)
        stages["relu_" + name] = cur
        if name in _POOL_AFTER:
            pname = _POOL_AFTER[name]
            cur, idx = maxpool_forward(cur)
            stages[pname] = cur
            pool_indices[pname] = idx
            if pname in _NORM_AFTER:
                nname = _NORM_AFTER[pname]
                cur = lrn_forward(cur, _LRN)
                stages[nname] = cur
    cur = cur.reshape(-1)
    for name in FC_NAMES:
        p = model.params[name]
        cur = fc_forward(cur, p.weights, p.bias)
        stages[name] = cur
        if name != "fc8":
            cur = relu_forward(cur)
            stages["relu_" + name] = cur
            state = DropoutState(rate=model.dropout_rate, mode=mode)
            cur = dropout_forward(cur, state, item_rng)
            stages["drop_" + name] = cur
            drop_states[name] = state
    shifted = cur - cur.max()
    exps = np.exp(shifted)
    probs = exps / exps.sum()
    return ItemCache(stages, pool_indices, drop_states, probs)


def forward(model: NetworkModel, batch: Tensor, mode: str = "test",
            rng: Rng | None = None):
    """Run a [B,3,227,227] batch; returns activations and [B,K] probabilities.

    Test mode never consults the rng. Batch items go through the
    single-item ops one by one, in index order.
    """
    if mode not in ("train", "test"):
        raise ParameterError(f"mode must be 'train' or 'test', got {mode!r}")
    if batch.ndim != 4 or batch.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"batch must be [B,{','.join(map(str, INPUT_SHAPE))}], "
                         f"got {batch.shape}")
    if mode == "train" and model.dropout_rate > 0 and rng is None:
        raise ParameterError("train-mode forward needs an rng for dropout")
    items = []
    for i in range(batch.shape[0]):
        item_rng = rng.spawn(i) if (mode == "train" and rng is not None) else None
        items.append(_forward_item(model, batch[i], mode, item_rng))
    probs = np.stack([it.probs for it in items])
    return BatchActivations(mode, items), probs


def _backward_item(model: NetworkModel, cache: ItemCache, label: int, grads: dict):
    _, loss, grad = softmax_loss(cache.stages["fc8"], label)
    for name in reversed(FC_NAMES):
        p = model.params[name]
        if name != "fc8":
            grad = dropout_backward(cache.drop_states[name], grad)
            grad = relu_backward(cache.stages[name], grad)
        x = cache.stages["drop_" + _prev_fc(name)] if name != "fc6" \
            else cache.stages["pool5"].reshape(-1)
        gx, gw, gb = fc_backward(x, p.weights, grad)
        grads[name]["weights"] += gw
        grads[name]["bias"] += gb
        grad = gx
    grad = grad.reshape(cache.stages["pool5"].shape)
    for name in reversed(CONV_NAMES):
        if name in _POOL_AFTER:
            pname = _POOL_AFTER[name]
            if pname in _NORM_AFTER:
                grad = lrn_backward(cache.stages[pname], grad, _LRN)
            grad = maxpool_backward(cache.pool_indices[pname], grad,
                                    cache.stages["relu_" + name].shape)
        grad = relu_backward(cache.stages[name], grad)
        x = _conv_input(cache, name)
        gx, gw, gb = conv_backward(x, model.params[name], grad,
                                   need_input_grad=name != "conv1")
        grads[name]["weights"] += gw
        grads[name]["bias"] += gb
        grad = gx
    return loss


def _prev_fc(name: str) -> str:
    return {"fc7": "fc6", "fc8": "fc7"}[name]


def _conv_input(cache: ItemCache, name: str) -> Tensor:
    prev = {"conv1": "data", "conv2": "norm1", "conv3": "norm2",
            "conv4": "relu_conv3", "conv5": "relu_conv4"}[name]
    return cache.stages[prev]


def backward(model: NetworkModel, acts: BatchActivations, labels):
    """Mean cross-entropy loss and batch-averaged parameter gradients."""
    if acts.mode != "train":
        raise ParameterError("backward needs activations from a train-mode forward")
    labels = np.asarray(labels)
    if labels.shape != (len(acts.items),):
        raise ShapeError(f"labels shape {labels.shape} != ({len(acts.items)},)")
    for lab in labels:
        if not 0 <= lab < model.num_classes:
            raise IndexError(f"label {lab} out of range for {model.num_classes} classes")
    grads = {
        name: {"weights": np.zeros_like(p.weights), "bias": np.zeros_like(p.bias)}
        for name, p in model.params.items()
    }
    total = 0.0
    for cache, label in zip(acts.items, labels):
        total += _backward_item(model, cache, int(label), grads)
    b = len(acts.items)
    for g in grads.values():
        g["weights"] /= b
        g["bias"] /= b
    return grads, total / b


def _u32(value: int) -> bytes:
    return np.asarray(value, dtype="<u4").tobytes()


def _write_record(chunks: list, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    chunks.append(_u32(len(encoded)))
    chunks.append(encoded)
    chunks.append(np.uint32(0).tobytes())          # dtype tag: f32
    chunks.append(_u32(array.ndim))
    chunks.append(np.asarray(array.shape, dtype="<u4").tobytes())
    chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_weights(model: NetworkModel, path) -> None:
    """Write the bit-exact weight file described in the module docstring."""
    chunks = [MAGIC,
              _u32(FORMAT_VERSION),
              _u32(model.num_classes),
              np.asarray(model.channel_means, dtype="<f4").tobytes(),
              _u32(model.vocab_checksum)]
    for name in PARAM_NAMES:
        p = model.params[name]
        _write_record(chunks, name + ".weights", p.weights)
        _write_record(chunks, name + ".bias", p.bias)
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(_u32(crc))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("weight file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), dtype="<u4")[0])


def load_weights(path, dropout_rate: float = 0.5) -> NetworkModel:
    """Read a weight file back into a model; every field round-trips."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4:
        raise FormatError("weight file truncated")
    body, stored = data[:-4], int(np.frombuffer(data[-4:], dtype="<u4")[0])
    if (zlib.crc32(body) & 0xFFFFFFFF) != stored:
        raise FormatError("checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    num_classes = r.u32()
    means = np.frombuffer(r.take(12), dtype="<f4").copy()
    vocab_checksum = r.u32()
    records = {}
    while r.pos < len(body):
        name = r.take(r.u32()).decode("utf-8")
        dtype_tag = r.u32()
        if dtype_tag != 0:
            raise FormatError(f"unsupported dtype tag {dtype_tag} in {name}")
        rank = r.u32()
        shape = tuple(int(np.frombuffer(r.take(4), dtype="<u4")[0]) for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        records[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if "conv1.weights" not in records:
        raise FormatError("missing conv1.weights record")
    conv1_out = records["conv1.weights"].shape[0]
    full = _CONV_SPECS[0][1]
    if conv1_out == 0 or full % conv1_out:
        raise FormatError(f"conv1 output count {conv1_out} matches no width divisor")
    model = build(num_classes, width_divisor=full // conv1_out,
                  dropout_rate=dropout_rate, dtype=np.float32)
    for name in PARAM_NAMES:
        for part in ("weights", "bias"):
            key = f"{name}.{part}"
            if key not in records:
                raise FormatError(f"missing record {key}")
            expected = getattr(model.params[name], part).shape
            if records[key].shape != expected:
                raise FormatError(
                    f"record {key} shape {records[key].shape} != expected {expected}")
            getattr(model.params[name], part)[...] = records[key]
    model.channel_means = means
    model.vocab_checksum = vocab_checksum
    return model
