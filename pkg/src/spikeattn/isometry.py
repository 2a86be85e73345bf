"""Empirical block dynamical isometry: Monte-Carlo estimates of phi(JJ^T) and varphi(JJ^T).

``phi(A)`` is the expected normalized trace ``E[tr(A)] / dim`` and
``varphi(A) = phi(A^2) - phi(A)^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from torch.autograd.functional import jacobian

from .attention import ChannelSpatialAttention
from .errors import ConfigError
from .residual import ResBlock

KINDS = ("relu", "conv", "orthogonal_linear", "sigmoid", "ca_block", "sa_block", "csa_block", "att_res_block")
MAX_DIM = 256


@dataclass
class ComponentRef:
    kind: str
    p: float = 0.5  # ReLU positive fraction
    gamma: float = 1.0  # orthogonal scale
    epsilon: float = 0.1  # conv weight std
    c_in: int = 1
    k_h: int = 3
    k_w: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown component kind {self.kind!r}")
        if not 0 <= self.p <= 1:
            raise ConfigError("p must lie in [0, 1]")
        if self.gamma <= 0 or self.epsilon <= 0:
            raise ConfigError("gamma and epsilon must be positive")


def reference_phi(c: ComponentRef) -> tuple[float, float | None]:
    """Closed-form ``(phi, varphi)`` for the basic components; ``None`` where undefined."""
    if c.kind == "relu":
        return c.p, c.p - c.p ** 2
    if c.kind == "conv":
        return c.c_in * c.k_h * c.k_w * c.epsilon ** 2, None
    if c.kind == "orthogonal_linear":
        return c.gamma ** 2, 0.0
    if c.kind == "sigmoid":
        return 1 / 16, 0.0
    raise ConfigError(f"no closed form for {c.kind!r}; use check_block")


@dataclass
class JacobianStats:
    phi: float
    varphi: float
    n_samples: int
    input_spec: str = ""


def _jacobian_matrix(f, x):
    J = jacobian(f, x, vectorize=True)
    m_out = math.prod(f(x).shape)
    return J.reshape(m_out, x.numel())


def estimate_phi(draw: Callable, n_samples: int = 100, seed: int = 0, input_spec: str = "") -> JacobianStats:
    """Monte-Carlo ``phi`` / ``varphi`` of ``J J^T``.

    ``draw(gen)`` returns ``(f, x)``: a differentiable map (possibly with freshly
    sampled weights) and an input point. Per-sample traces are summed in draw
    order.
    """
    gen = torch.Generator().manual_seed(seed)
    t1 = np.empty(n_samples)
    t2 = np.empty(n_samples)
    for i in range(n_samples):
        f, x = draw(gen)
        if x.numel() > MAX_DIM:
            raise ConfigError(f"input dimension {x.numel()} exceeds {MAX_DIM}")
        J = _jacobian_matrix(f, x)
        if not torch.isfinite(J).all():
            raise FloatingPointError("non-finite Jacobian entries")
        A = J @ J.T
        m = A.shape[0]
        t1[i] = torch.trace(A).item() / m
        t2[i] = torch.trace(A @ A).item() / m
    phi = float(t1.mean())
    return JacobianStats(phi, float(t2.mean()) - phi * phi, n_samples, input_spec)


def normal_input(shape, std: float = 1.0):
    """Sampler for ``x ~ Normal(0, std^2)`` of a given shape (float64)."""
    def sample(gen):
        return torch.randn(shape, generator=gen, dtype=torch.float64) * std
    return sample


def fixed(f, sampler):
    return lambda gen: (f, sampler(gen))


def haar_orthogonal(rows: int, cols: int, gamma: float, gen) -> torch.Tensor:
    """Scaled partial isometry drawn from the Haar measure."""
    a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    return gamma * (q if rows >= cols else q.T)[:rows, :cols]


def check_orthogonal(w: torch.Tensor, gamma: float, tol: float = 1e-6) -> None:
    """Rows (or columns, whichever are fewer) must be orthogonal with norm ``gamma``."""
    g = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    err = (g - gamma ** 2 * torch.eye(g.shape[0], dtype=g.dtype)).abs().max().item()
    if err > tol:
        raise ConfigError(f"weights violate orthogonality tolerance ({err:.3g} > {tol})")


# --------------------------------------------------------------------------
# attention blocks


@dataclass
class BlockInit:
    C: int = 8
    H: int = 4
    W: int = 4
    r_c: int = 4
    sa_kernel: int = 3
    epsilon: float = 0.1  # SA conv weight std
    gamma_w0: float = 1.0
    gamma_w1: float = 1.0
    zeta: float = 0.1
    orthogonality_tol: float = 1e-6


@dataclass
class BlockVerdict:
    kind: str
    measured: float
    reference: float
    tolerance: float
    stats: JacobianStats

    @property
    def rel_error(self) -> float:
        return abs(self.measured - self.reference) / abs(self.reference)

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


def _init_csa(csa: ChannelSpatialAttention, spec: BlockInit, gen) -> None:
    w0 = haar_orthogonal(*csa.ca.fc0.weight.shape, spec.gamma_w0, gen)
    w1 = haar_orthogonal(*csa.ca.fc1.weight.shape, spec.gamma_w1, gen)
    check_orthogonal(w0, spec.gamma_w0, spec.orthogonality_tol)
    check_orthogonal(w1, spec.gamma_w1, spec.orthogonality_tol)
    with torch.no_grad():
        csa.ca.fc0.weight.copy_(w0)
        csa.ca.fc1.weight.copy_(w1)
        csa.sa.conv.weight.copy_(torch.randn(csa.sa.conv.weight.shape, generator=gen, dtype=torch.float64)
                                 * spec.epsilon)


def csa_reference(spec: BlockInit) -> float:
    """Composed closed form for a CSA block on zero-mean input: the CA path drops out."""
    phi_sa = 2 * spec.sa_kernel ** 2 * spec.epsilon ** 2 / 16
    return (1 / 4 + phi_sa / 4) * (1 / 4)


def att_res_reference(spec: BlockInit) -> float:
    """Identity shortcut plus a ``zeta``-scaled attention branch."""
    return 1 + spec.zeta ** 2 * csa_reference(spec)


def _draw_csa(spec: BlockInit):
    def draw(gen):
        csa = ChannelSpatialAttention(spec.C, spec.r_c, spec.sa_kernel).double()
        _init_csa(csa, spec, gen)
        x = torch.randn(spec.C, spec.H, spec.W, generator=gen, dtype=torch.float64)
        return csa, x
    return draw


def _draw_att_res(spec: BlockInit, variant: str):
    def draw(gen):
        block = ResBlock(spec.C, spec.C, 1, variant, zeta=spec.zeta, r_c=spec.r_c,
                         sa_kernel=spec.sa_kernel).double().eval()
        for m in block.modules():
            if hasattr(m, "relaxed"):
                m.relaxed = True
        with torch.no_grad():
            for conv in (block.conv1.conv, block.conv2.conv):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                                  / math.sqrt(fan_in))
        _init_csa(block.csa, spec, gen)
        x = torch.randn(1, 1, spec.C, spec.H, spec.W, generator=gen, dtype=torch.float64)
        return block, x
    return draw


def check_block(kind: str, spec: BlockInit = BlockInit(), n_samples: int = 200, seed: int = 0,
                tolerance: float = 0.25, variant: str = "V1") -> BlockVerdict:
    """Measure ``phi(J J^T)`` of an attention block and compare with its composed closed form."""
    if spec.C * spec.H * spec.W > MAX_DIM:
        raise ConfigError("block too large for exact Jacobians")
    if kind == "csa_block":
        stats = estimate_phi(_draw_csa(spec), n_samples, seed, "normal(0, 1)")
        ref = csa_reference(spec)
    elif kind == "att_res_block":
        stats = estimate_phi(_draw_att_res(spec, variant), n_samples, seed, "normal(0, 1)")
        ref = att_res_reference(spec)
    else:
        raise ConfigError(f"check_block supports csa_block and att_res_block, not {kind!r}")
    return BlockVerdict(kind, stats.phi, ref, tolerance, stats)


# --------------------------------------------------------------------------
# composition laws


def gaussian_linear(n: int, phi: float, gen) -> torch.Tensor:
    """``n x n`` matrix with iid ``Normal(0, phi / n)`` entries, so ``phi(WW^T) = phi`` in expectation."""
    return torch.randn(n, n, generator=gen, dtype=torch.float64) * math.sqrt(phi / n)


def serial_law(phi1: float, phi2: float, n: int = 64, n_samples: int = 200, seed: int = 0):
    """``(measured, predicted)`` phi of ``W2 W1 x`` versus ``phi1 * phi2``."""
    def draw(gen):
        w1, w2 = gaussian_linear(n, phi1, gen), gaussian_linear(n, phi2, gen)
        return (lambda x: w2 @ (w1 @ x)), torch.randn(n, generator=gen, dtype=torch.float64)
    return estimate_phi(draw, n_samples, seed).phi, phi1 * phi2


def parallel_law(phi1: float, phi2: float, n: int = 64, n_samples: int = 200, seed: int = 0):
    """``(measured, predicted)`` phi of ``W1 x + W2 x`` versus ``phi1 + phi2``."""
    def draw(gen):
        w1, w2 = gaussian_linear(n, phi1, gen), gaussian_linear(n, phi2, gen)
        return (lambda x: w1 @ x + w2 @ x), torch.randn(n, generator=gen, dtype=torch.float64)
    return estimate_phi(draw, n_samples, seed).phi, phi1 + phi2


# --------------------------------------------------------------------------
# depth stability


def stack_input_grad_norm(n_blocks: int, C: int = 8, H: int = 4, W: int = 4, T: int = 2,
                          zeta: float = 0.1, variant: str = "V1", seed: int = 0,
                          gamma: float = 1.0) -> float:
    """Norm of ``d<v, f(U)>/dU`` through ``n_blocks`` attention residual blocks.

    Blocks use Kaiming-normal convs, Haar-orthogonal CA weights and inference-mode
    BN; spikes are true Heavisides with surrogate gradients. ``v`` and ``U`` are
    drawn from a generator independent of the block weights.
    """
    torch.manual_seed(seed)
    blocks = nn.Sequential(*[ResBlock(C, C, 1, variant, zeta=zeta) for _ in range(n_blocks)]).double().eval()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for b in blocks:
            for conv in (b.conv1.conv, b.conv2.conv):
                nn.init.kaiming_normal_(conv.weight, generator=gen)
            if b.csa is not None:
                b.csa.ca.fc0.weight.copy_(haar_orthogonal(*b.csa.ca.fc0.weight.shape, gamma, gen))
                b.csa.ca.fc1.weight.copy_(haar_orthogonal(*b.csa.ca.fc1.weight.shape, gamma, gen))
    probe = torch.Generator().manual_seed(10_000 + seed)
    u = torch.randn(T, 1, C, H, W, generator=probe, dtype=torch.float64, requires_grad=True)
    v = torch.randn(T, 1, C, H, W, generator=probe, dtype=torch.float64)
    (blocks(u) * v).sum().backward()
    return u.grad.norm().item()


# --------------------------------------------------------------------------
# single components and the standard check table


def component_draw(c: ComponentRef, dim: int = 64, input_std: float = 1.0, hw: int = 6):
    """``draw(gen)`` for one basic component on inputs ``Normal(0, input_std^2)``.

    ReLU inputs are shifted so that a fraction ``p`` is positive. Convolutions use
    circular padding, so every output sees a full receptive field.
    """
    if c.kind == "relu":
        shift = float(torch.distributions.Normal(0.0, 1.0).icdf(torch.tensor(1 - c.p))) if 0 < c.p < 1 else 0.0
        return lambda gen: (torch.relu, torch.randn(dim, generator=gen, dtype=torch.float64) * input_std
                            - shift * input_std)
    if c.kind == "sigmoid":
        return lambda gen: (torch.sigmoid, torch.randn(dim, generator=gen, dtype=torch.float64) * input_std)
    if c.kind == "orthogonal_linear":
        def draw(gen):
            w = haar_orthogonal(dim, dim, c.gamma, gen)
            return (lambda x: w @ x), torch.randn(dim, generator=gen, dtype=torch.float64)
        return draw
    if c.kind == "conv":
        def draw(gen):
            w = torch.randn(c.c_in, c.c_in, c.k_h, c.k_w, generator=gen, dtype=torch.float64) * c.epsilon
            ph, pw = c.k_h // 2, c.k_w // 2

            def f(x):
                xp = torch.nn.functional.pad(x.unsqueeze(0), (pw, pw, ph, ph), mode="circular")
                return torch.nn.functional.conv2d(xp, w)[0]
            return f, torch.randn(c.c_in, hw, hw, generator=gen, dtype=torch.float64)
        return draw
    raise ConfigError(f"{c.kind!r} is a composed block; use check_block")


@dataclass
class CheckRow:
    name: str
    measured: float
    reference: float
    tolerance: float  # relative (absolute when reference is 0); 0 means exact to 1e-12

    @property
    def rel_error(self) -> float:
        diff = abs(self.measured - self.reference)
        return diff / abs(self.reference) if self.reference else diff

    @property
    def passed(self) -> bool:
        return self.rel_error <= max(self.tolerance, 1e-12)


def standard_checks(n_samples: int = 100, seed: int = 0, epsilon: float = 0.1,
                    block_tolerance: float = 0.25) -> list[CheckRow]:
    """Reference values, composition laws and the composed attention blocks."""
    rows = []
    ident = estimate_phi(fixed(lambda x: x, normal_input(32)), 4, seed)
    rows += [CheckRow("identity phi", ident.phi, 1.0, 0.0), CheckRow("identity varphi", ident.varphi, 0.0, 0.0)]
    relu = ComponentRef("relu", p=0.5)
    s = estimate_phi(component_draw(relu, dim=128), n_samples * 4, seed)
    ref = reference_phi(relu)
    rows += [CheckRow("relu p=0.5 phi", s.phi, ref[0], 0.05), CheckRow("relu p=0.5 varphi", s.varphi, ref[1], 0.05)]
    s = estimate_phi(component_draw(ComponentRef("sigmoid"), input_std=0.05), n_samples, seed)
    rows.append(CheckRow("sigmoid small-variance phi", s.phi, 1 / 16, 0.10))
    orth = ComponentRef("orthogonal_linear", gamma=1.0)
    s = estimate_phi(component_draw(orth, dim=32), max(4, n_samples // 10), seed)
    rows.append(CheckRow("orthogonal gamma=1 phi", s.phi, 1.0, 0.10))
    conv = ComponentRef("conv", c_in=2, k_h=3, k_w=3, epsilon=epsilon)
    s = estimate_phi(component_draw(conv), n_samples, seed)
    rows.append(CheckRow("conv 2x3x3 phi", s.phi, reference_phi(conv)[0], 0.10))
    m, p = serial_law(1.0, 1.0, seed=seed)
    rows.append(CheckRow("serial law 1*1", m, p, 0.10))
    m, p = parallel_law(0.5, 0.5, seed=seed)
    rows.append(CheckRow("parallel law 0.5+0.5", m, p, 0.10))
    spec = BlockInit(epsilon=epsilon)
    for kind in ("csa_block", "att_res_block"):
        v = check_block(kind, spec, n_samples, seed, block_tolerance)
        rows.append(CheckRow(kind, v.measured, v.reference, block_tolerance))
    return rows
