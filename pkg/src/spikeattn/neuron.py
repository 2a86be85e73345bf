"""LIF dynamics, surrogate gradients and the Conv-BN-AvgPool feature extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

SURROGATE_KINDS = ("rectangular", "triangular")


@dataclass(frozen=True)
class LIFParams:
    u_th: float = 0.5
    v_reset: float = 0.0
    beta: float = 0.25  # exp(-dt / tau)

    def __post_init__(self):
        if not self.u_th > 0:
            raise ConfigError(f"u_th must be > 0, got {self.u_th}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True)
class SurrogateParams:
    kind: str = "rectangular"
    a: float | None = None  # half-width; None means 0.5 * u_th

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigError(f"unknown surrogate kind {self.kind!r}")
        if self.a is not None and not self.a > 0:
            raise ConfigError(f"surrogate half-width must be > 0, got {self.a}")

    def width(self, lif: LIFParams) -> float:
        return 0.5 * lif.u_th if self.a is None else self.a


def surrogate_grad(u, p_lif: LIFParams = LIFParams(), p_sg: SurrogateParams = SurrogateParams()):
    """Stand-in derivative of ``Hea(u - u_th)``; both shapes integrate to one.

    Works on floats, numpy arrays and torch tensors.
    """
    a = p_sg.width(p_lif)
    lib = torch if isinstance(u, torch.Tensor) else np
    d = lib.abs(u - p_lif.u_th)
    if p_sg.kind == "rectangular":
        out = (d < a) * (1.0 / (2.0 * a))
    else:
        out = lib.clip(1.0 - d / a, 0.0, None) / a
    if lib is torch:
        return out.to(u.dtype)
    return float(out) if np.ndim(out) == 0 else out


def surrogate_integral(u, p_lif: LIFParams = LIFParams(), p_sg: SurrogateParams = SurrogateParams()):
    """Antiderivative of :func:`surrogate_grad`: a continuous relaxation of the spike."""
    a = p_sg.width(p_lif)
    d = u - p_lif.u_th
    if p_sg.kind == "rectangular":
        return torch.clamp((d + a) / (2.0 * a), 0.0, 1.0)
    lo = (d + a).clamp(min=0.0) ** 2 / (2.0 * a * a)
    hi = 1.0 - (a - d).clamp(min=0.0) ** 2 / (2.0 * a * a)
    return torch.where(d <= 0, lo, hi).clamp(0.0, 1.0)


class _SpikeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, p_lif, p_sg, relaxed):
        ctx.save_for_backward(u)
        ctx.params = (p_lif, p_sg)
        if relaxed:
            return surrogate_integral(u, p_lif, p_sg)
        # Hea(0) = 1
        return (u - p_lif.u_th >= 0).to(u.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (u,) = ctx.saved_tensors
        p_lif, p_sg = ctx.params
        return grad_out * surrogate_grad(u, p_lif, p_sg), None, None, None


def spike(u: torch.Tensor, p_lif: LIFParams, p_sg: SurrogateParams, relaxed: bool = False) -> torch.Tensor:
    """Heaviside spike with surrogate backward, or its relaxation when ``relaxed``."""
    return _SpikeFn.apply(u, p_lif, p_sg, relaxed)


def lif_fire(U, p: LIFParams, p_sg: SurrogateParams = SurrogateParams(), relaxed: bool = False):
    """Fire and reset given an integrated membrane potential. Returns ``(S, H_new)``."""
    S = spike(U, p, p_sg, relaxed)
    H_new = p.v_reset * S + (p.beta * U) * (1.0 - S)
    return S, H_new


def lif_step(X, H_prev, p: LIFParams = LIFParams(), p_sg: SurrogateParams = SurrogateParams(),
             relaxed: bool = False):
    """One LIF update. Returns ``(S, H_new, U)``."""
    if X.shape != H_prev.shape:
        raise ValueError(f"input shape {tuple(X.shape)} does not match state shape {tuple(H_prev.shape)}")
    U = H_prev + X
    S, H_new = lif_fire(U, p, p_sg, relaxed)
    return S, H_new, U


def lif_sequence(X_seq, p: LIFParams = LIFParams(), p_sg: SurrogateParams = SurrogateParams(),
                 H0=None, relaxed: bool = False):
    """Run :func:`lif_step` over the leading time axis. Returns stacked ``(S, U)`` and the final state."""
    H = torch.zeros_like(X_seq[0]) if H0 is None else H0
    spikes, potentials = [], []
    for X in X_seq:
        S, H, U = lif_step(X, H, p, p_sg, relaxed)
        spikes.append(S)
        potentials.append(U)
    return torch.stack(spikes), torch.stack(potentials), H


class LIF(nn.Module):
    """Multi-step LIF over ``[T, ...]`` inputs."""

    def __init__(self, lif: LIFParams = LIFParams(), sg: SurrogateParams = SurrogateParams()):
        super().__init__()
        self.lif, self.sg = lif, sg
        self.relaxed = False

    def forward(self, X_seq):
        S, _, _ = lif_sequence(X_seq, self.lif, self.sg, relaxed=self.relaxed)
        return S


class ConvBN(nn.Module):
    """``AvgPool(BN(Conv(W, x)))`` without bias; accepts ``[B,C,H,W]`` or ``[T,B,C,H,W]``.

    BN momentum follows the keep-0.9 convention (torch ``momentum=0.1``).
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pool: int = 1,
                 padding: int | None = None, bn: bool = True):
        super().__init__()
        if min(c_in, c_out, kernel, stride, pool) < 1:
            raise ConfigError("conv dimensions must be >= 1")
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride,
                              padding=kernel // 2 if padding is None else padding, bias=False)
        self.bn = nn.BatchNorm2d(c_out, momentum=0.1) if bn else nn.Identity()
        self.pool = pool

    @property
    def c_in(self):
        return self.conv.in_channels

    @property
    def c_out(self):
        return self.conv.out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.conv.kernel_size, self.conv.stride, self.conv.padding
        ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
        return ho // self.pool, wo // self.pool

    def forward(self, x):
        seq = x.dim() == 5
        if seq:
            T, B = x.shape[:2]
            x = x.flatten(0, 1)
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        y = self.bn(self.conv(x))
        if self.pool > 1:
            if self.pool > min(y.shape[-2:]):
                raise ValueError(f"pool window {self.pool} larger than feature map {tuple(y.shape[-2:])}")
            y = F.avg_pool2d(y, self.pool)
        return y.unflatten(0, (T, B)) if seq else y


def conv_feature(S_prev, layer: ConvBN):
    """Spatial feature ``X`` from the previous layer's spikes (or input frames)."""
    return layer(S_prev)
