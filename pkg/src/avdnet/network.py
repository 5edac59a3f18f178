"""AVDNet layer graph: two plain convs, five ConvRes blocks and a 1x1 head.

Every conv except the head is followed by batch norm and leaky ReLU.  A
ConvRes block runs 3x3 -> 3x3 -> 1x1 and adds the first 3x3 response to
the 1x1 response, so the skip always spans two conv layers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    add_elementwise,
    bn_nhwc,
    bn_nhwc_backward,
    conv_nhwc,
    conv_nhwc_backward,
    conv_output_size,
    leaky_relu,
    leaky_relu_backward,
    to_nchw,
    to_nhwc,
)

DEFAULT_WIDTHS = (64, 128, 128, 256, 256, 512, 512)
TAP_NAMES = ("conv1", "conv2", "convres1", "convres2", "convres3", "convres4", "convres5")


@dataclass
class NetworkSpec:
    input_size: int = 608
    num_classes: int = 4
    num_anchors: int = 4
    widths: tuple = DEFAULT_WIDTHS

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.input_size <= 0 or self.input_size % 8:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.num_anchors < 1:
            raise ValueError(f"num_anchors must be >= 1, got {self.num_anchors}")
        if len(self.widths) != 7 or min(self.widths) < 1:
            raise ValueError(f"widths needs 7 positive channel counts, got {self.widths}")

    @property
    def grid(self) -> int:
        return self.input_size // 8

    @property
    def head_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)


@dataclass
class ConvLayer:
    """One conv, optionally followed by batch norm and leaky ReLU.

    ``forward``/``backward`` take channels-last ``(b, h, w, c)`` arrays.
    """

    name: str
    conv: ConvParams
    bn: Optional[BatchNormParams] = None
    activation: bool = True

    def forward(self, x, mode="infer", cache=None, update_stats=True):
        wmat = self.conv.matrix()
        z = conv_nhwc(x, self.conv, wmat)
        bn_cache = None
        if self.bn is not None:
            z, bn_cache = bn_nhwc(z, self.bn, mode, update_stats)
        out = leaky_relu(z) if self.activation else z
        if cache is not None:
            cache.extend((x, wmat, bn_cache, z))
        return out

    def backward(self, grad, cache, grads):
        x, wmat, bn_cache, z = cache
        if self.activation:
            grad = leaky_relu_backward(grad, z)
        if self.bn is not None:
            grad, gscale, gshift = bn_nhwc_backward(grad, bn_cache, self.bn)
            grads[f"{self.name}.bn.scale"] = gscale
            grads[f"{self.name}.bn.shift"] = gshift
        gx, gw, gb = conv_nhwc_backward(grad, x, self.conv, wmat)
        grads[f"{self.name}.w"] = gw
        if gb is not None:
            grads[f"{self.name}.b"] = gb
        return gx

    def named_tensors(self):
        yield f"{self.name}.w", self.conv.weights, True
        if self.conv.bias is not None:
            yield f"{self.name}.b", self.conv.bias, True
        if self.bn is not None:
            yield f"{self.name}.bn.scale", self.bn.scale, True
            yield f"{self.name}.bn.shift", self.bn.shift, True
            yield f"{self.name}.bn.mean", self.bn.running_mean, False
            yield f"{self.name}.bn.var", self.bn.running_var, False


@dataclass
class ConvResBlock:
    name: str
    conv_a: ConvLayer
    conv_b: ConvLayer
    conv_c: ConvLayer

    def __post_init__(self):
        d = self.conv_a.conv.out_channels
        if self.conv_b.conv.out_channels != d or self.conv_c.conv.out_channels != d:
            raise ShapeError(f"{self.name}: all three convs must produce {d} channels")
        if self.conv_c.conv.kernel != 1 or self.conv_b.conv.stride != 1 or self.conv_c.conv.stride != 1:
            raise ShapeError(f"{self.name}: expected 3x3(s) -> 3x3(1) -> 1x1(1)")

    def forward(self, x, mode="infer", cache=None, update_stats=True):
        ca = [] if cache is not None else None
        cb = [] if cache is not None else None
        cc = [] if cache is not None else None
        a = self.conv_a.forward(x, mode, ca, update_stats)
        b = self.conv_b.forward(a, mode, cb, update_stats)
        c = self.conv_c.forward(b, mode, cc, update_stats)
        if cache is not None:
            cache.extend((ca, cb, cc))
        return add_elementwise(c, a)

    def backward(self, grad, cache, grads):
        ca, cb, cc = cache
        gb = self.conv_c.backward(grad, cc, grads)
        ga = self.conv_b.backward(gb, cb, grads) + grad
        return self.conv_a.backward(ga, ca, grads)

    @property
    def layers(self):
        return (self.conv_a, self.conv_b, self.conv_c)

    def named_tensors(self):
        for layer in self.layers:
            yield from layer.named_tensors()


def conv_res_forward(block: ConvResBlock, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Block output for a channels-first input."""
    squeeze = x.ndim == 3
    x4 = x[None] if squeeze else x
    out = to_nchw(block.forward(to_nhwc(x4), mode))
    return out[0] if squeeze else out


@dataclass
class Network:
    """Ordered layer stack.  ``spec`` is None for hand-assembled networks."""

    layers: list
    spec: Optional[NetworkSpec] = None
    velocity: dict = field(default_factory=dict, repr=False)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        """Yield ``(name, array, learnable)`` in layer order."""
        for layer in self.layers:
            yield from layer.named_tensors()

    def parameters(self) -> dict:
        return {name: arr for name, arr, learnable in self.named_tensors() if learnable}

    def state(self) -> dict:
        return {name: arr for name, arr, _ in self.named_tensors()}

    @property
    def dtype(self):
        return next(self.named_tensors())[1].dtype

    def astype(self, dtype) -> "Network":
        """Copy of the network with every tensor cast to ``dtype``."""
        net = Network(_clone_layers(self.layers, dtype), self.spec)
        return net

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def forward(self, x, mode="infer", taps: Optional[dict] = None, caches: Optional[list] = None,
                update_stats=True):
        """Run ``(b, c, h, w)`` input through every layer.

        ``taps`` collects each top-level layer's output (channels-first);
        ``caches`` collects what :meth:`backward` needs.
        """
        x = to_nhwc(x)
        for layer in self.layers:
            cache = [] if caches is not None else None
            x = layer.forward(x, mode, cache, update_stats)
            if caches is not None:
                caches.append(cache)
            if taps is not None:
                taps[layer.name] = to_nchw(x)
        return to_nchw(x)

    def backward(self, grad, caches) -> dict:
        """Gradients of every learnable tensor, keyed like :meth:`parameters`."""
        grads = {}
        grad = to_nhwc(grad)
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache, grads)
        return grads


def _clone_layers(layers, dtype):
    def conv(p: ConvParams):
        bias = None if p.bias is None else p.bias.astype(dtype)
        return ConvParams(p.weights.astype(dtype), bias, p.stride, p.padding)

    def bn(p: Optional[BatchNormParams]):
        if p is None:
            return None
        return BatchNormParams(p.scale.astype(dtype), p.shift.astype(dtype),
                               p.running_mean.astype(dtype), p.running_var.astype(dtype),
                               p.epsilon, p.momentum)

    def layer(l: ConvLayer):
        return ConvLayer(l.name, conv(l.conv), bn(l.bn), l.activation)

    out = []
    for item in layers:
        if isinstance(item, ConvResBlock):
            out.append(ConvResBlock(item.name, layer(item.conv_a), layer(item.conv_b), layer(item.conv_c)))
        else:
            out.append(layer(item))
    return out


def make_conv_layer(name, c_in, c_out, kernel, stride=1, bn=True, activation=True, bias=None,
                    dtype=np.float32) -> ConvLayer:
    """Zero-weight conv layer; 3x3 convs get padding 1, 1x1 convs none."""
    if bias is None:
        bias = not bn
    weights = np.zeros((c_out, c_in, kernel, kernel), dtype)
    params = ConvParams(weights, np.zeros(c_out, dtype) if bias else None, stride, kernel // 2)
    norm = BatchNormParams.identity(c_out, dtype) if bn else None
    return ConvLayer(name, params, norm, activation)


def build_network(spec: NetworkSpec, dtype=np.float32) -> Network:
    """Materialize the layer plan with zero weights and identity batch norm.

    Call :func:`init_weights` before training.
    """
    w = spec.widths
    # (name, in, out, first-conv stride) for the five residual blocks
    plan = [
        ("convres1", w[1], w[2], 1),
        ("convres2", w[2], w[3], 2),
        ("convres3", w[3], w[4], 1),
        ("convres4", w[4], w[5], 2),
        ("convres5", w[5], w[6], 1),
    ]
    layers = [
        make_conv_layer("conv1", 3, w[0], 3, 1, dtype=dtype),
        make_conv_layer("conv2", w[0], w[1], 3, 2, dtype=dtype),
    ]
    for name, c_in, c_out, stride in plan:
        layers.append(ConvResBlock(
            name,
            make_conv_layer(f"{name}.a", c_in, c_out, 3, stride, dtype=dtype),
            make_conv_layer(f"{name}.b", c_out, c_out, 3, 1, dtype=dtype),
            make_conv_layer(f"{name}.c", c_out, c_out, 1, 1, dtype=dtype),
        ))
    layers.append(make_conv_layer("head", w[6], spec.head_channels, 1, 1, bn=False, activation=False,
                                  dtype=dtype))
    return Network(layers, spec)


def layer_table(net: Network, input_size: Optional[int] = None) -> list[dict]:
    """Per-conv rows: name, kernel, stride, in/out channels, output size, params."""
    size = input_size or (net.spec.input_size if net.spec else None)
    rows = []
    for top in net.layers:
        subs = top.layers if isinstance(top, ConvResBlock) else (top,)
        for layer in subs:
            p = layer.conv
            if size is not None:
                size = conv_output_size(size, p.kernel, p.stride, p.padding)
            n = sum(a.size for _, a, learnable in layer.named_tensors() if learnable)
            rows.append(dict(name=layer.name, kernel=p.kernel, stride=p.stride, c_in=p.in_channels,
                             c_out=p.out_channels, size=size, params=n))
    return rows


def count_params(net: Network) -> int:
    """Learnable scalars: conv weights, conv biases, batch-norm scale and shift."""
    return int(sum(a.size for _, a, learnable in net.named_tensors() if learnable))


def stride2_stages(net: Network) -> list[str]:
    return [row["name"] for row in layer_table(net, 1 << 12) if row["stride"] == 2]


def init_weights(net: Network, seed: int) -> Network:
    """Uniform conv weights in +-sqrt(2/fan_in); zero biases; identity batch norm.

    Mutates ``net`` in place and returns it.
    """
    rng = np.random.default_rng(seed)
    for top in net.layers:
        subs = top.layers if isinstance(top, ConvResBlock) else (top,)
        for layer in subs:
            w = layer.conv.weights
            limit = np.sqrt(2.0 / (w.shape[1] * w.shape[2] * w.shape[3]))
            w[:] = rng.uniform(-limit, limit, w.shape)
            if layer.conv.bias is not None:
                layer.conv.bias[:] = 0
            if layer.bn is not None:
                layer.bn.scale[:] = 1
                layer.bn.shift[:] = 0
                layer.bn.running_mean[:] = 0
                layer.bn.running_var[:] = 1
    net.velocity.clear()
    return net


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Inference pass; returns raw head logits ``(b, A*(5+C), S, S)``."""
    if net.spec is not None:
        n = net.spec.input_size
        if batch.shape[-2:] != (n, n) or batch.shape[-3] != 3:
            raise ShapeError(f"expected input (b, 3, {n}, {n}), got {batch.shape}")
    return net.forward(batch.astype(net.dtype, copy=False), "infer")


# ---------------------------------------------------------------------------
# weights file
# ---------------------------------------------------------------------------

MAGIC = b"AVDN"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


class MagicMismatchError(WeightsFormatError):
    pass


class VersionMismatchError(WeightsFormatError):
    pass


class TruncatedWeightsError(WeightsFormatError):
    pass


class DimensionMismatchError(WeightsFormatError):
    pass


def save_weights(net: Network, path: Union[str, Path]) -> None:
    tensors = list(net.named_tensors())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr, _ in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weights(path: Union[str, Path]) -> list[tuple[str, np.ndarray]]:
    """Parse a weights file into ``(name, float32 array)`` pairs."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedWeightsError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    take(4)
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out.append((name, arr))
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_weights(spec: Union[NetworkSpec, Network], path: Union[str, Path]) -> Network:
    """Build the network for ``spec`` and fill it from ``path``.

    A prebuilt :class:`Network` may be passed instead of a spec; it is filled in place.
    """
    net = spec if isinstance(spec, Network) else build_network(spec)
    stored = read_weights(path)
    expected = list(net.named_tensors())
    if len(stored) != len(expected):
        raise DimensionMismatchError(f"{path}: {len(stored)} tensors stored, network has {len(expected)}")
    for (name, arr), (ename, target, _) in zip(stored, expected):
        if name != ename or arr.shape != target.shape:
            raise DimensionMismatchError(
                f"{path}: stored {name}{list(arr.shape)} does not match {ename}{list(target.shape)}"
            )
        target[...] = arr
    return net


def weights_file_size(net: Network) -> int:
    """Byte size :func:`save_weights` will produce for ``net``."""
    size = 12
    for name, arr, _ in net.named_tensors():
        size += 4 + len(name.encode()) + 4 + 4 * arr.ndim + 4 * arr.size
    return size
