"""Image encoder: a stride-2 conv stack producing a spatial feature grid.

Also reads and writes precomputed grids so that features from another
network can be fed to the decoder unchanged.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, FormatError

MIN_SIDE = 16
GRID_MAGIC = b"DMCHGRID"
GRID_VERSION = 1


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    domain: str  # "user" | "shop"
    item_id: str


@dataclass
class FeatureGrid:
    """Region features for a batch of images.

    ``regions`` is (B, K, D) and ``pooled`` is (B, D). Both are tensors so the
    grid can sit in the middle of a differentiable graph.
    """

    regions: Tensor
    pooled: Tensor
    grid_h: int
    grid_w: int

    @property
    def batch(self) -> int:
        return self.regions.shape[0]

    @property
    def K(self) -> int:
        return self.regions.shape[1]

    @property
    def D(self) -> int:
        return self.regions.shape[2]

    def row(self, i: int) -> "FeatureGrid":
        """Detached single-image grid (inference helpers, file export)."""
        return FeatureGrid(
            Tensor(self.regions.data[i:i + 1]),
            Tensor(self.pooled.data[i:i + 1]),
            self.grid_h,
            self.grid_w,
        )


def global_pool(regions: Tensor) -> Tensor:
    """Mean over the K region vectors: (B, K, D) -> (B, D)."""
    return ad.mean(regions, axis=1)


def make_grid(regions, grid_h: int, grid_w: int) -> FeatureGrid:
    """Wrap raw region features (K, D) or (B, K, D) into a pooled grid."""
    regions = ad.as_tensor(regions)
    if regions.data.ndim == 2:
        regions = ad.reshape(regions, (1,) + regions.shape)
    if regions.shape[1] != grid_h * grid_w:
        raise DataError(f"K={regions.shape[1]} does not match layout {grid_h}x{grid_w}")
    return FeatureGrid(regions, global_pool(regions), grid_h, grid_w)


def init_conv_params(rng: np.random.Generator, channels: Sequence[int], kernel: int = 3) -> dict[str, Tensor]:
    """Uniform(+-sqrt(3/fan_in)) kernels (unit-variance preserving) and biases."""
    params = {}
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        bound = np.sqrt(3.0 / (kernel * kernel * cin))
        params[f"enc.conv{i}.w"] = Tensor(
            rng.uniform(-bound, bound, (kernel, kernel, cin, cout)), requires_grad=True)
        params[f"enc.conv{i}.b"] = Tensor(rng.uniform(-bound, bound, cout), requires_grad=True)
    return params


class ConvEncoder:
    """Stack of (stride-2 conv, tanh) layers.

    With three layers a 64x64 image maps to an 8x8 grid, i.e. K = 64 regions
    of dimension ``channels[-1]``.
    """

    def __init__(self, params: dict[str, Tensor], n_layers: int):
        self.params = params
        self.n_layers = n_layers

    def feature_dim(self) -> int:
        return self.params[f"enc.conv{self.n_layers - 1}.w"].shape[3]

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        for _ in range(self.n_layers):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def encode(self, images) -> FeatureGrid:
        """Encode a batch (B, H, W, 3), a single (H, W, 3) array, or ImageSamples."""
        # centred input: white shop backgrounds otherwise push the first layer into saturation
        x = Tensor(_stack_pixels(images) * 2.0 - 1.0)
        for i in range(self.n_layers):
            x = ad.conv2d(x, self.params[f"enc.conv{i}.w"], stride=2, pad=1)
            x = ad.tanh(ad.add_bias(x, self.params[f"enc.conv{i}.b"]))
        b, gh, gw, d = x.shape
        regions = ad.reshape(x, (b, gh * gw, d))
        return FeatureGrid(regions, global_pool(regions), gh, gw)


def _stack_pixels(images) -> np.ndarray:
    if isinstance(images, ImageSample):
        images = [images]
    if isinstance(images, (list, tuple)):
        arrs = [im.pixels if isinstance(im, ImageSample) else np.asarray(im) for im in images]
        pixels = np.stack(arrs).astype(np.float64)
    else:
        pixels = np.asarray(images, dtype=np.float64)
        if pixels.ndim == 3:
            pixels = pixels[None]
    if pixels.ndim != 4 or pixels.shape[3] != 3:
        raise DataError(f"expected (B, H, W, 3) pixels, got {pixels.shape}")
    if pixels.shape[1] < MIN_SIDE or pixels.shape[2] < MIN_SIDE:
        raise DataError(f"image {pixels.shape[1]}x{pixels.shape[2]} smaller than {MIN_SIDE}x{MIN_SIDE}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DataError("pixel values must lie in [0, 1]")
    return pixels


# ---------------------------------------------------------------- grid files


def save_grid(path, grid: FeatureGrid, index: int = 0) -> None:
    """Write one image's grid: header, K*D region floats, then D pooled floats."""
    regions = np.ascontiguousarray(grid.regions.data[index], dtype="<f8")
    pooled = np.ascontiguousarray(grid.pooled.data[index], dtype="<f8")
    k, d = regions.shape
    header = GRID_MAGIC + struct.pack("<HIIHH", GRID_VERSION, k, d, grid.grid_h, grid.grid_w)
    Path(path).write_bytes(header + regions.tobytes() + pooled.tobytes())


def load_grid(path) -> FeatureGrid:
    buf = Path(path).read_bytes()
    hsize = 8 + struct.calcsize("<HIIHH")
    if len(buf) < hsize or buf[:8] != GRID_MAGIC:
        raise FormatError(f"{path}: not a feature grid file")
    version, k, d, gh, gw = struct.unpack_from("<HIIHH", buf, 8)
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    if k != gh * gw:
        raise FormatError(f"{path}: K={k} does not match layout {gh}x{gw}")
    expected = hsize + 8 * (k * d + d)
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    values = np.frombuffer(buf, dtype="<f8", offset=hsize).astype(np.float64)
    regions = values[:k * d].reshape(1, k, d)
    pooled = values[k * d:].reshape(1, d)
    return FeatureGrid(Tensor(regions), Tensor(pooled), gh, gw)
