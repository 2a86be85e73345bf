"""Membrane-shortcut residual blocks with channel-spatial attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ChannelSpatialAttention, default_reduction
from .errors import ConfigError
from .network import NetOutput
from .neuron import ConvBN, LIFParams, SurrogateParams, lif_fire

VARIANTS = ("V1", "V2")
STAGE_BLOCKS = {8: (1, 1, 1), 18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 104: (3, 8, 32, 8)}


class SeqLIF(nn.Module):
    """LIF over ``[T, ...]`` input with its own temporal state."""

    def __init__(self, lif: LIFParams, sg: SurrogateParams):
        super().__init__()
        self.lif, self.sg = lif, sg
        self.relaxed = False

    def forward(self, x):
        H = torch.zeros_like(x[0])
        out = []
        for t in range(x.shape[0]):
            S, H = lif_fire(H + x[t], self.lif, self.sg, self.relaxed)
            out.append(S)
        return torch.stack(out)


class ResBlock(nn.Module):
    """``spike -> conv-BN -> spike -> conv-BN`` residual on membrane potentials.

    ``variant=None`` is the plain MS block; ``"V1"`` gates the residual branch
    before the shortcut add, ``"V2"`` gates the sum. The last BN's scale starts at
    ``zeta``.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, variant: str | None = "V1",
                 lif: LIFParams = LIFParams(), sg: SurrogateParams = SurrogateParams(),
                 zeta: float = 0.1, r_c: int = 4, sa_kernel: int = 7):
        super().__init__()
        if variant is not None and variant not in VARIANTS:
            raise ConfigError(f"unknown residual variant {variant!r}")
        self.variant = variant
        self.lif1 = SeqLIF(lif, sg)
        self.conv1 = ConvBN(c_in, c_out, 3, stride=stride)
        self.lif2 = SeqLIF(lif, sg)
        self.conv2 = ConvBN(c_out, c_out, 3)
        nn.init.constant_(self.conv2.bn.weight, zeta)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = ConvBN(c_in, c_out, 1, stride=stride, padding=0)
        self.csa = ChannelSpatialAttention(c_out, default_reduction(c_out, r_c), sa_kernel) if variant else None

    def residual(self, u_in):
        return self.conv2(self.lif2(self.conv1(self.lif1(u_in))))

    def shortcut(self, u_in):
        return u_in if self.proj is None else self.proj(u_in)

    def forward(self, u_in):
        return combine(self.residual(u_in), self.shortcut(u_in), self.csa, self.variant)

    def lif_outputs(self, u_in):
        """Spikes of both internal LIF layers (for activity accounting)."""
        s1 = self.lif1(u_in)
        s2 = self.lif2(self.conv1(s1))
        return s1, s2


def combine(u_ori, u_short, csa=None, variant: str | None = "V1"):
    """Join residual and shortcut membrane potentials for a block variant."""
    if u_ori.shape != u_short.shape:
        raise ValueError(f"residual {tuple(u_ori.shape)} and shortcut {tuple(u_short.shape)} differ")
    if variant is None or csa is None:
        return u_ori + u_short
    if variant == "V1":
        return csa(u_ori) + u_short
    if variant == "V2":
        return csa(u_ori + u_short)
    raise ConfigError(f"unknown residual variant {variant!r}")


def ms_res_block(u_in, block: ResBlock):
    """Plain membrane-shortcut block output ``F(U_in) + U_in``, ignoring any attention."""
    return combine(block.residual(u_in), block.shortcut(u_in), None, None)


def att_res_block(u_in, block: ResBlock, variant: str = "V1"):
    return combine(block.residual(u_in), block.shortcut(u_in), block.csa, variant)


@dataclass
class ResNetConfig:
    depth: int = 18
    widths: tuple = (8, 16, 32, 64)
    in_channels: int = 2
    input_hw: tuple = (32, 32)
    n_classes: int = 4
    T: int = 4
    variant: str | None = "V1"
    attention_stages: tuple | None = None  # per-stage on/off, default all on
    zeta: float = 0.1
    r_c: int = 4
    sa_kernel: int = 7
    lif: LIFParams = field(default_factory=LIFParams)
    sg: SurrogateParams = field(default_factory=SurrogateParams)

    def __post_init__(self):
        if self.depth not in STAGE_BLOCKS:
            raise ConfigError(f"depth must be one of {sorted(STAGE_BLOCKS)}")
        stages = len(STAGE_BLOCKS[self.depth])
        if len(self.widths) < stages:
            raise ConfigError(f"depth {self.depth} needs {stages} stage widths")
        self.widths = tuple(self.widths[:stages])
        if self.attention_stages is None:
            self.attention_stages = (True,) * stages
        self.attention_stages = tuple(self.attention_stages)


class SpikingResNet(nn.Module):
    """Stem conv, MS residual stages, spiking head and a spiking linear output layer."""

    def __init__(self, cfg: ResNetConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBN(cfg.in_channels, cfg.widths[0], 3)
        blocks = []
        c = cfg.widths[0]
        for s, (n, w) in enumerate(zip(STAGE_BLOCKS[cfg.depth], cfg.widths)):
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                variant = cfg.variant if cfg.attention_stages[s] else None
                blocks.append(ResBlock(c, w, stride, variant, cfg.lif, cfg.sg, cfg.zeta, cfg.r_c, cfg.sa_kernel))
                c = w
        self.blocks = nn.ModuleList(blocks)
        self.head_lif = SeqLIF(cfg.lif, cfg.sg)
        self.fc = nn.Linear(c, cfg.n_classes, bias=False)
        self.relaxed = False

    def set_relaxed(self, relaxed: bool = True):
        for m in self.modules():
            if hasattr(m, "relaxed"):
                m.relaxed = relaxed
        return self

    def forward(self, x) -> NetOutput:
        u = self.stem(x)
        spikes = []
        for block in self.blocks:
            s1 = block.lif1(u)
            s2 = block.lif2(block.conv1(s1))
            spikes += [s1, s2]
            u = combine(block.conv2(s2), block.shortcut(u), block.csa, block.variant)
        s = self.head_lif(u)
        spikes.append(s)
        X = F.linear(s.mean(dim=(-2, -1)), self.fc.weight)
        H = torch.zeros_like(X[0])
        pots, outs = [], []
        for t in range(X.shape[0]):
            U = H + X[t]
            S, H = lif_fire(U, self.cfg.lif, self.cfg.sg, self.relaxed)
            pots.append(U)
            outs.append(S)
        spikes.append(torch.stack(outs))
        return NetOutput(torch.stack(pots), spikes)

    def neuron_counts(self) -> list[int]:
        counts = []
        h, w = self.cfg.input_hw
        c = self.cfg.widths[0]
        for block in self.blocks:
            counts.append(c * h * w)
            h, w = block.conv1.output_hw(h, w)
            c = block.conv1.c_out
            counts.append(c * h * w)
        counts += [c * h * w, self.cfg.n_classes]
        return counts
