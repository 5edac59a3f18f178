"""Modal-intensity visualization of a layer's feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import save_pgm

LEVELS = 256


@dataclass
class QuantizedStack:
    values: np.ndarray  # (d, H, W) uint8
    layer: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"expected a (d, H, W) stack, got {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 255):
            raise ValueError("quantized values must lie in [0, 255]")
        self.values = self.values.astype(np.uint8)

    @property
    def depth(self) -> int:
        return self.values.shape[0]


def quantize_maps(features: np.ndarray, layer: str = "") -> QuantizedStack:
    """Map a ``(d, H, W)`` stack to [0, 255] with one min/max over the whole stack.

    ``q = floor(255 * (x - min) / (max - min) + 0.5)``; a constant stack maps to 0.
    """
    x = np.asarray(features, np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected a (d, H, W) stack, got {x.shape}")
    if np.isnan(x).any():
        raise ValueError("feature stack contains NaN")
    if not np.isfinite(x).all():
        raise ValueError("feature stack contains infinite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return QuantizedStack(np.zeros(x.shape, np.uint8), layer)
    q = np.floor(255.0 * (x - lo) / (hi - lo) + 0.5)
    return QuantizedStack(np.clip(q, 0, 255).astype(np.uint8), layer)


def rfav(stack: QuantizedStack) -> np.ndarray:
    """Per pixel, the most frequent quantized value across depth; ties go to the smallest."""
    q = stack.values if isinstance(stack, QuantizedStack) else np.asarray(stack)
    if q.ndim != 3 or q.shape[0] < 1:
        raise ValueError(f"need a (d >= 1, H, W) stack, got {q.shape}")
    d, h, w = q.shape
    flat = q.reshape(d, -1).astype(np.int64)
    hist = np.zeros((h * w, LEVELS), np.int64)
    pix = np.broadcast_to(np.arange(h * w), flat.shape)
    np.add.at(hist, (pix.ravel(), flat.ravel()), 1)
    # argmax returns the first maximum, i.e. the smallest z among ties
    return hist.argmax(axis=1).astype(np.uint8).reshape(h, w)


def rfav_of_features(features: np.ndarray, layer: str = "") -> np.ndarray:
    return rfav(quantize_maps(features, layer))


def write_rfav(features: np.ndarray, path, layer: str = "") -> np.ndarray:
    image = rfav_of_features(features, layer)
    save_pgm(image, path)
    return image


def layer_rfav(net, image: np.ndarray, layer: str) -> np.ndarray:
    """RFAV of one named tap (``conv1``, ``conv2``, ``convres1`` .. ``convres5``) for a ``(3, N, N)`` image."""
    from .network import TAP_NAMES

    if layer not in TAP_NAMES:
        raise ValueError(f"unknown layer {layer!r}; choose from {', '.join(TAP_NAMES)}")
    taps: dict = {}
    net.forward(np.asarray(image, net.dtype)[None], mode="infer", taps=taps)
    return rfav_of_features(taps[layer][0], layer)
