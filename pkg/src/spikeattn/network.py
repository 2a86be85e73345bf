"""Plain Conv-based LIF networks with optional multi-dimensional attention."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (
    AttentionConfig,
    ChannelAttention,
    Location,
    SpatialAttention,
    TemporalAttention,
    default_reduction,
)
from .errors import ConfigError
from .neuron import ConvBN, LIFParams, SurrogateParams, lif_fire

log = logging.getLogger(__name__)


class NetOutput(NamedTuple):
    membrane: torch.Tensor  # output layer pre-spike potentials [T, B, K]
    spikes: list  # per LIF layer [T, B, ...], output layer last


@dataclass
class NetConfig:
    in_channels: int = 2
    input_hw: tuple = (32, 32)
    channels: tuple = (16, 32, 32)
    kernel: int = 3
    strides: tuple | None = None
    pools: tuple = (2, 2, 2)
    n_classes: int = 4
    T: int = 16
    lif: LIFParams = field(default_factory=LIFParams)
    sg: SurrogateParams = field(default_factory=SurrogateParams)
    attention: AttentionConfig | None = None

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.pools = tuple(self.pools)
        self.strides = tuple(self.strides) if self.strides else (1,) * len(self.channels)
        self.input_hw = tuple(self.input_hw)
        if not (len(self.channels) == len(self.pools) == len(self.strides)):
            raise ConfigError("channels, pools and strides must have equal length")
        if self.T < 1 or self.n_classes < 2:
            raise ConfigError("T must be >= 1 and n_classes >= 2")


class _Gates(nn.Module):
    """Gates of one layer, grouped by location."""

    def __init__(self, att: AttentionConfig, T: int, c_in: int, c_out: int):
        super().__init__()
        self.att = att
        for dim in sorted(att.enabled):
            loc = att.locations[dim]
            C = c_in if loc is Location.CONV_PRE else c_out
            if dim == "TA":
                self.add_module(dim, TemporalAttention(T, default_reduction(T, att.r_t)))
            elif dim == "CA":
                self.add_module(dim, ChannelAttention(C, default_reduction(C, att.r_c)))
            else:
                self.add_module(dim, SpatialAttention(att.sa_kernel))

    def at(self, location: Location):
        return [getattr(self, d) for d in self.att.hooks(location) if hasattr(self, d)]


class SpikingConvLayer(nn.Module):
    """Conv-BN-AvgPool feature extraction followed by LIF, gated per ``AttentionConfig``."""

    def __init__(self, c_in, c_out, kernel, stride, pool, T, lif, sg, att: AttentionConfig | None):
        super().__init__()
        self.conv = ConvBN(c_in, c_out, kernel, stride=stride, pool=pool)
        self.lif, self.sg = lif, sg
        self.relaxed = False
        self.gates = _Gates(att, T, c_in, c_out) if att is not None and att.enabled else None

    def _gate(self, x, location):
        if self.gates is not None:
            for g in self.gates.at(location):
                x = g(x)
        return x

    def forward(self, x):
        x = self._gate(x, Location.CONV_PRE)
        X = self._gate(self.conv(x), Location.CONV_POST)
        H = torch.zeros_like(X[0])
        spikes = []
        for t in range(X.shape[0]):
            U = self._gate(H + X[t], Location.ACTIVATE_PRE)
            S, H = lif_fire(U, self.lif, self.sg, self.relaxed)
            spikes.append(S)
        return torch.stack(spikes)


class SpikingConvNet(nn.Module):
    """Stack of spiking conv layers and a spiking linear output layer."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        att = cfg.attention
        if att is not None and "TA" in att.enabled and cfg.T == 1:
            log.warning("temporal attention disabled for T=1")
            att = AttentionConfig(att.enabled - {"TA"}, att.locations, att.r_t, att.r_c, att.sa_kernel)
        self.attention = att
        layers = []
        c, (h, w) = cfg.in_channels, cfg.input_hw
        for c_out, stride, pool in zip(cfg.channels, cfg.strides, cfg.pools):
            layer = SpikingConvLayer(c, c_out, cfg.kernel, stride, pool, cfg.T, cfg.lif, cfg.sg, att)
            h, w = layer.conv.output_hw(h, w)
            if h < 1 or w < 1:
                raise ConfigError(f"feature map collapses to {h}x{w}; reduce pooling or strides")
            layers.append(layer)
            c = c_out
        self.layers = nn.ModuleList(layers)
        self.feature_shape = (c, h, w)
        self.fc = nn.Linear(c * h * w, cfg.n_classes, bias=False)
        self.relaxed = False

    def set_relaxed(self, relaxed: bool = True):
        """Swap every spike for its differentiable relaxation (gradient checks)."""
        for m in self.modules():
            if hasattr(m, "relaxed"):
                m.relaxed = relaxed
        return self

    def forward(self, x) -> NetOutput:
        """``x`` is ``[T, B, C, H, W]``."""
        if x.dim() != 5 or x.shape[0] != self.cfg.T:
            raise ValueError(f"expected input [T={self.cfg.T}, B, C, H, W], got {tuple(x.shape)}")
        spikes = []
        for layer in self.layers:
            x = layer(x)
            spikes.append(x)
        X = F.linear(x.flatten(2), self.fc.weight)
        H = torch.zeros_like(X[0])
        potentials, out_spikes = [], []
        for t in range(X.shape[0]):
            U = H + X[t]
            S, H = lif_fire(U, self.cfg.lif, self.cfg.sg, self.relaxed)
            potentials.append(U)
            out_spikes.append(S)
        spikes.append(torch.stack(out_spikes))
        return NetOutput(torch.stack(potentials), spikes)

    def describe(self) -> list[dict]:
        """Layer shapes for FLOP counting; see :func:`spikeattn.energy.count_flops`."""
        desc = []
        c, (h, w) = self.cfg.in_channels, self.cfg.input_hw
        T = self.cfg.T
        for layer in self.layers:
            conv = layer.conv.conv
            (kh, kw), (sh, _), (ph, _) = conv.kernel_size, conv.stride, conv.padding
            ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * ph - kw) // sh + 1
            entry = {
                "kind": "conv", "k_h": kh, "k_w": kw, "c_in": c, "c_out": conv.out_channels,
                "h_in": h, "w_in": w, "h_out": ho, "w_out": wo, "stride": sh, "padding": ph,
                "pool": layer.conv.pool, "attention": [],
            }
            ph_, pw_ = ho // layer.conv.pool, wo // layer.conv.pool
            if layer.gates is not None:
                for dim in sorted(self.attention.enabled):
                    loc = self.attention.locations[dim]
                    C, H_, W_ = (c, h, w) if loc is Location.CONV_PRE else (conv.out_channels, ph_, pw_)
                    g = getattr(layer.gates, dim)
                    r = g.fc0.in_features // g.fc0.out_features if dim != "SA" else None
                    entry["attention"].append({
                        "dim": dim, "location": loc.value, "T": T, "C": C, "H": H_, "W": W_,
                        "r": r, "k": self.attention.sa_kernel if dim == "SA" else None,
                    })
            desc.append(entry)
            c, h, w = conv.out_channels, ph_, pw_
        desc.append({"kind": "fc", "in": c * h * w, "out": self.cfg.n_classes, "attention": []})
        return desc

    def neuron_counts(self) -> list[int]:
        """Neurons per LIF layer, matching ``NetOutput.spikes``."""
        counts = []
        c, (h, w) = self.cfg.in_channels, self.cfg.input_hw
        for layer in self.layers:
            h, w = layer.conv.output_hw(h, w)
            counts.append(layer.conv.c_out * h * w)
        counts.append(self.cfg.n_classes)
        return counts
