"""Temporal, channel and spatial attention over spiking features and membrane potentials."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

DIMENSIONS = ("TA", "CA", "SA")


class Location(str, enum.Enum):
    CONV_PRE = "ConvPRE"  # on the layer input, before the convolution
    CONV_POST = "ConvPOST"  # on the conv feature X, before integration
    ACTIVATE_PRE = "ActivatePRE"  # on the integrated membrane potential U


DEFAULT_LOCATIONS = {"TA": Location.CONV_POST, "CA": Location.ACTIVATE_PRE, "SA": Location.ACTIVATE_PRE}


class Hook(NamedTuple):
    dimension: str
    location: Location
    operand: str  # "input", "feature" or "membrane"
    needs_full_sequence: bool


_OPERAND = {Location.CONV_PRE: "input", Location.CONV_POST: "feature", Location.ACTIVATE_PRE: "membrane"}


def place_attention(location, dimension: str) -> Hook:
    """Resolve where a gate is wired into a spiking conv layer.

    Temporal gates cannot act on the membrane potential: by then the state has
    already been integrated over past steps and cannot be recalibrated.
    """
    location = Location(location)
    if dimension not in DIMENSIONS:
        raise ConfigError(f"unknown attention dimension {dimension!r}")
    if dimension == "TA" and location is Location.ACTIVATE_PRE:
        raise ConfigError("temporal attention cannot be placed at ActivatePRE")
    return Hook(dimension, location, _OPERAND[location], dimension == "TA")


def default_reduction(n: int, default: int) -> int:
    """Largest divisor of ``n`` not exceeding ``default``."""
    for r in range(min(default, n), 0, -1):
        if n % r == 0:
            return r
    return 1


@dataclass
class AttentionConfig:
    enabled: frozenset = frozenset(DIMENSIONS)
    locations: dict = field(default_factory=lambda: dict(DEFAULT_LOCATIONS))
    r_t: int = 2
    r_c: int = 4
    sa_kernel: int = 7

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(DIMENSIONS)
        if unknown:
            raise ConfigError(f"unknown attention dimensions {sorted(unknown)}")
        self.locations = {**DEFAULT_LOCATIONS, **{k: Location(v) for k, v in self.locations.items()}}
        for dim in self.enabled:
            place_attention(self.locations[dim], dim)
        if self.sa_kernel < 1 or self.sa_kernel % 2 == 0:
            raise ConfigError(f"sa_kernel must be odd and positive, got {self.sa_kernel}")
        if self.r_t < 1 or self.r_c < 1:
            raise ConfigError("reduction factors must be >= 1")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "AttentionConfig":
        """``"none"``, ``"TA"``, ``"TCA"``, ``"CSA"``, ``"TCSA"`` and so on."""
        name = name.upper()
        if name in ("NONE", "VANILLA", ""):
            return cls(enabled=frozenset(), **kwargs)
        dims = set()
        rest = name.removesuffix("A")
        for ch in rest:
            if ch + "A" not in DIMENSIONS:
                raise ConfigError(f"cannot parse attention combination {name!r}")
            dims.add(ch + "A")
        return cls(enabled=frozenset(dims), **kwargs)

    @property
    def name(self) -> str:
        if not self.enabled:
            return "none"
        return "".join(d[0] for d in DIMENSIONS if d in self.enabled) + "A"

    def hooks(self, location: Location) -> list[str]:
        """Enabled dimensions wired at ``location``, in TA, CA, SA order."""
        return [d for d in DIMENSIONS if d in self.enabled and self.locations[d] is Location(location)]


# --------------------------------------------------------------------------
# gate generators


def _mlp(v, w0, w1):
    return F.linear(F.relu(F.linear(v, w0)), w1)


def ta_weights(X_all, w0, w1):
    """Per-step temporal weights from a ``[T, (B,) C, H, W]`` feature block.

    Returns ``[T]`` or ``[T, B]``.
    """
    single = X_all.dim() == 4
    X = X_all.unsqueeze(1) if single else X_all
    T = X.shape[0]
    if w0.shape[1] != T or tuple(w1.shape) != (T, w0.shape[0]):
        raise ValueError(f"TA weights {tuple(w0.shape)}/{tuple(w1.shape)} do not fit T={T}")
    avg = X.mean(dim=(2, 3, 4)).transpose(0, 1)
    mx = X.amax(dim=(2, 3, 4)).transpose(0, 1)
    g = torch.sigmoid(_mlp(avg, w0, w1) + _mlp(mx, w0, w1)).transpose(0, 1)
    return g[:, 0] if single else g


def ca_weights(U, w0, w1):
    """Channel weights ``[..., C]`` for a ``[..., C, H, W]`` tensor."""
    C = U.shape[-3]
    if w0.shape[1] != C or tuple(w1.shape) != (C, w0.shape[0]):
        raise ValueError(f"CA weights {tuple(w0.shape)}/{tuple(w1.shape)} do not fit C={C}")
    avg = U.mean(dim=(-2, -1))
    mx = U.amax(dim=(-2, -1))
    return torch.sigmoid(_mlp(avg, w0, w1) + _mlp(mx, w0, w1))


def sa_weights(U, kernel):
    """Spatial weights ``[..., H, W]`` from channel-pooled avg/max maps, zero same-padding."""
    if kernel.dim() != 4 or tuple(kernel.shape[:2]) != (1, 2):
        raise ValueError(f"SA kernel must have shape [1, 2, k, k], got {tuple(kernel.shape)}")
    lead, (H, W) = U.shape[:-3], U.shape[-2:]
    flat = U.reshape(-1, *U.shape[-3:])
    pooled = torch.stack([flat.mean(dim=1), flat.amax(dim=1)], dim=1)
    k = kernel.shape[-1]
    g = torch.sigmoid(F.conv2d(pooled, kernel, padding=k // 2))
    return g.reshape(*lead, H, W)


# --------------------------------------------------------------------------
# gating modules


class _Gate(nn.Module):
    def __init__(self):
        super().__init__()
        # pinned gates return exact ones, used to reduce to the vanilla layer
        self.pinned = False

    def forward(self, x):
        return x * self.expand(self.weights(x))


class TemporalAttention(_Gate):
    def __init__(self, T: int, r_t: int = 2):
        super().__init__()
        if T % r_t:
            raise ConfigError(f"r_t={r_t} does not divide T={T}")
        self.fc0 = nn.Linear(T, T // r_t, bias=False)
        self.fc1 = nn.Linear(T // r_t, T, bias=False)

    def weights(self, x):
        if self.pinned:
            return torch.ones(x.shape[:2], dtype=x.dtype)
        return ta_weights(x, self.fc0.weight, self.fc1.weight)

    @staticmethod
    def expand(g):
        return g[:, :, None, None, None]


class ChannelAttention(_Gate):
    def __init__(self, C: int, r_c: int = 4):
        super().__init__()
        if C % r_c:
            raise ConfigError(f"r_c={r_c} does not divide C={C}")
        self.fc0 = nn.Linear(C, C // r_c, bias=False)
        self.fc1 = nn.Linear(C // r_c, C, bias=False)

    def weights(self, u):
        if self.pinned:
            return torch.ones(u.shape[:-2], dtype=u.dtype)
        return ca_weights(u, self.fc0.weight, self.fc1.weight)

    @staticmethod
    def expand(g):
        return g[..., None, None]


class SpatialAttention(_Gate):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError("spatial attention kernel must be odd")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def weights(self, u):
        if self.pinned:
            return torch.ones(u.shape[:-3] + u.shape[-2:], dtype=u.dtype)
        return sa_weights(u, self.conv.weight)

    @staticmethod
    def expand(g):
        return g.unsqueeze(-3)


class ChannelSpatialAttention(nn.Module):
    """Serial CA then SA on a membrane tensor."""

    def __init__(self, C: int, r_c: int = 4, kernel_size: int = 7):
        super().__init__()
        self.ca = ChannelAttention(C, r_c)
        self.sa = SpatialAttention(kernel_size)

    def forward(self, u):
        return self.sa(self.ca(u))


def apply_tcsa(X_all, H_prev_seq, ta=None, ca=None, sa=None):
    """Membrane potentials of a TCSA layer given features and carried states.

    ``ta``/``ca``/``sa`` are gate modules or ``None`` (a disabled gate is the
    constant 1). ``X_all`` and ``H_prev_seq`` are ``[T, (B,) C, H, W]``.
    """
    single = X_all.dim() == 4
    if single:
        X_all, H_prev_seq = X_all.unsqueeze(1), H_prev_seq.unsqueeze(1)
    X_ta = ta(X_all) if ta is not None else X_all
    out = []
    for t in range(X_ta.shape[0]):
        u = H_prev_seq[t] + X_ta[t]
        if ca is not None:
            u = ca(u)
        if sa is not None:
            u = sa(u)
        out.append(u)
    U = torch.stack(out)
    return U[:, 0] if single else U


def pin_gates(module: nn.Module, pinned: bool = True) -> nn.Module:
    for m in module.modules():
        if isinstance(m, _Gate):
            m.pinned = pinned
    return module
