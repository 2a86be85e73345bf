"""Average spiking response maps and binary-PPM heatmap output.

Colormap: 256 entries, entry ``i`` is RGB ``(i, 0, 255 - i)``, running from pure
blue (rate 0) to pure red (rate 1). A rate ``v`` maps to entry
``floor(v * 255 + 0.5)``. Colour scale is global ``[0, 1]``, never per channel.

Channel tiling: channels fill a row-major grid of ``ceil(sqrt(C))`` columns;
tiles are separated by 1-pixel white (255, 255, 255) lines, with no outer border.
Unused grid cells stay white.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .energy import SpikeRecord

COLORMAP = np.stack([np.arange(256), np.zeros(256, int), 255 - np.arange(256)], axis=1).astype(np.uint8)
SEPARATOR = np.array([255, 255, 255], dtype=np.uint8)


@dataclass
class ASRMap:
    """Per-layer spike counts ``[T, ...neuron shape]`` over ``n_samples`` inputs."""

    counts: list
    n_samples: int

    def rates(self, layer: int, step: int | None = None) -> np.ndarray:
        c = self.counts[layer] if step is None else self.counts[layer][step]
        return c / self.n_samples

    def neuron_mean(self, layer: int, step: int) -> float:
        c = self.counts[layer][step]
        return int(c.sum()) / (c.size * self.n_samples)

    def to_record(self) -> SpikeRecord:
        steps = np.array([c.reshape(c.shape[0], -1).sum(axis=1) for c in self.counts], dtype=np.int64)
        neurons = np.array([c[0].size for c in self.counts], dtype=np.int64)
        return SpikeRecord(steps, neurons, self.n_samples, [c.sum(axis=0) for c in self.counts])


@torch.no_grad()
def average_spiking_response(model, dataset, batch_size: int = 64) -> ASRMap:
    """Fraction of samples in which each neuron spiked, per layer and step.

    Counts are integer-accumulated across batches; rates are formed on access.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model.eval()
    counts = None
    for x, _ in dataset.batches(batch_size):
        out = model(x)
        batch = [s.sum(dim=1).to(torch.int64).numpy() for s in out.spikes]
        counts = batch if counts is None else [a + b for a, b in zip(counts, batch)]
    return ASRMap(counts, len(dataset))


def collapse_sample(spikes) -> np.ndarray:
    """Mean of a ``[T, C, H, W]`` spike tensor over time and channels."""
    s = np.asarray(spikes, dtype=np.float64)
    if s.ndim != 4:
        raise ValueError(f"expected [T, C, H, W], got shape {s.shape}")
    return s.mean(axis=(0, 1))


def colorize(rate_map) -> np.ndarray:
    m = np.asarray(rate_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmap input must be 2-D")
    if not np.all((m >= 0) & (m <= 1)):
        raise ValueError("map values must lie in [0, 1]")
    return COLORMAP[np.floor(m * 255 + 0.5).astype(np.int64)]


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def emit_heatmap(rate_map, path, scale: int = 1) -> Path:
    """Write a ``[H, W]`` rate map as a P6 image, each cell ``scale`` pixels wide."""
    rgb = colorize(rate_map)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    write_ppm(rgb, path)
    return Path(path)


def tile_channels(maps, scale: int = 1) -> np.ndarray:
    """RGB mosaic of ``[C, H, W]`` rate maps."""
    maps = np.asarray(maps, dtype=np.float64)
    C, H, W = maps.shape
    cols = math.ceil(math.sqrt(C))
    rows = math.ceil(C / cols)
    th, tw = H * scale, W * scale
    out = np.empty((rows * th + rows - 1, cols * tw + cols - 1, 3), dtype=np.uint8)
    out[:] = SEPARATOR
    for c in range(C):
        r, q = divmod(c, cols)
        tile = colorize(maps[c]).repeat(scale, axis=0).repeat(scale, axis=1)
        out[r * (th + 1):r * (th + 1) + th, q * (tw + 1):q * (tw + 1) + tw] = tile
    return out


def layer_image(asr: ASRMap, layer: int, step: int) -> np.ndarray:
    """Rates of one layer at one step shaped for display (``[C, H, W]`` or ``[1, 1, K]``)."""
    r = asr.rates(layer, step)
    return r.reshape(1, 1, -1) if r.ndim == 1 else r
