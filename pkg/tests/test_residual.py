import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv2d_loops, lif_scalar, residual_combine
from spikeattn.attention import pin_gates
from spikeattn.errors import ConfigError
from spikeattn.residual import (
    STAGE_BLOCKS,
    ResBlock,
    ResNetConfig,
    SpikingResNet,
    att_res_block,
    combine,
    ms_res_block,
)

D = torch.float64


def block(c_in=2, c_out=2, stride=1, variant="V1", seed=0, sa_kernel=3):
    torch.manual_seed(seed)
    b = ResBlock(c_in, c_out, stride, variant, r_c=2 if c_out % 2 == 0 else 1, sa_kernel=sa_kernel).double().eval()
    with torch.no_grad():
        for bn in (b.conv1.bn, b.conv2.bn):
            bn.running_mean.uniform_(-0.2, 0.2)
            bn.running_var.uniform_(0.5, 1.5)
            bn.bias.uniform_(-0.1, 0.1)
        b.conv1.conv.weight.mul_(3)
        b.conv2.conv.weight.mul_(3)
    return b


def rnd(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def bn_eval(x, bn):
    scale = bn.weight.detach().numpy() / np.sqrt(bn.running_var.numpy() + bn.eps)
    return (x - bn.running_mean.numpy()[:, None, None]) * scale[:, None, None] + bn.bias.detach().numpy()[:, None, None]


def lif_map(u_seq, p):
    """Per-neuron LIF over [T, C, H, W] numpy input."""
    out = np.zeros_like(u_seq)
    for idx in np.ndindex(*u_seq.shape[1:]):
        s, _, _ = lif_scalar(u_seq[(slice(None),) + idx], 0.0, p.u_th, p.v_reset, p.beta)
        out[(slice(None),) + idx] = s
    return out


def reference_residual(b, u):
    """Step-by-step scalar computation of the residual branch for u [T, C, H, W]."""
    p = b.lif1.lif
    s1 = lif_map(u, p)
    x1 = np.stack([bn_eval(conv2d_loops(s, b.conv1.conv.weight.detach().numpy(), 1, 1), b.conv1.bn) for s in s1])
    s2 = lif_map(x1, p)
    return np.stack([bn_eval(conv2d_loops(s, b.conv2.conv.weight.detach().numpy(), 1, 1), b.conv2.bn) for s in s2])


class TestMsBlock:
    def test_zero_residual_is_identity(self):
        b = block()
        with torch.no_grad():
            b.conv2.conv.weight.zero_()
            b.conv2.bn.bias.zero_()
            b.conv2.bn.running_mean.zero_()
        u = rnd(3, 1, 2, 3, 3)
        assert torch.equal(ms_res_block(u, b), u)

    def test_zero_in_zero_out(self):
        b = block()
        with torch.no_grad():
            for bn in (b.conv1.bn, b.conv2.bn):
                bn.bias.zero_()
                bn.running_mean.zero_()
        assert not ms_res_block(torch.zeros(2, 1, 2, 3, 3, dtype=D), b).any()

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_scalar_reference(self, seed):
        b = block(seed=seed)
        u = rnd(3, 1, 2, 3, 3, seed=seed) * 1.5
        ref = reference_residual(b, u[:, 0].numpy()) + u[:, 0].numpy()
        np.testing.assert_allclose(ms_res_block(u, b)[:, 0].detach().numpy(), ref, rtol=1e-12, atol=1e-12)


class TestAttRes:
    def test_v1_pinned_equals_ms(self):
        b = block()
        pin_gates(b)
        u = rnd(3, 2, 2, 3, 3)
        assert torch.equal(att_res_block(u, b, "V1"), ms_res_block(u, b))

    def test_v1_zero_residual_passes_shortcut(self):
        u = rnd(2, 1, 2, 3, 3)
        b = block()
        assert torch.equal(combine(torch.zeros_like(u), u, b.csa, "V1"), u)

    def test_v2_scalar_hand_case(self):
        b = ResBlock(1, 1, variant="V2", r_c=1, sa_kernel=1).double()
        for p in b.csa.parameters():
            torch.nn.init.zeros_(p)
        one = torch.ones(1, 1, 1, 1, 1, dtype=D)
        assert combine(one, one, b.csa, "V2").item() == 0.5

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["V1", "V2"]))
    def test_matches_elementwise_reference(self, seed, variant):
        b = block(seed=seed, variant=variant)
        u_ori, u_in = rnd(2, 1, 2, 3, 3, seed=seed), rnd(2, 1, 2, 3, 3, seed=seed + 1)
        with torch.no_grad():
            ref = residual_combine(u_ori, u_in, b.csa, variant)
            torch.testing.assert_close(combine(u_ori, u_in, b.csa, variant), ref)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_v1_preserves_shortcut(self, seed):
        b = block(seed=seed)
        u = rnd(2, 1, 2, 3, 3, seed=seed)
        with torch.no_grad():
            out = att_res_block(u, b, "V1")
            u_csa = b.csa(b.residual(u))
        torch.testing.assert_close(out - u_csa, u, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            combine(torch.zeros(1, 1, 2, 3, 3), torch.zeros(1, 1, 2, 4, 4))

    def test_bad_variant(self):
        with pytest.raises(ConfigError):
            ResBlock(2, 2, variant="V3")


class TestProjectionAndNet:
    def test_downsampling_projection(self):
        b = block(2, 4, stride=2)
        assert b.proj is not None and b.proj.conv.kernel_size == (1, 1)
        assert b(rnd(2, 1, 2, 6, 6)).shape == (2, 1, 4, 3, 3)

    def test_zeta_init(self):
        b = ResBlock(4, 4, zeta=0.1)
        assert torch.equal(b.conv2.bn.weight, torch.full((4,), 0.1))

    @pytest.mark.parametrize("depth", [8, 18, 34])
    def test_depths(self, depth):
        cfg = ResNetConfig(depth=depth, widths=(4, 8, 8, 8), input_hw=(8, 8), T=2)
        net = SpikingResNet(cfg)
        assert len(net.blocks) == sum(STAGE_BLOCKS[depth])
        out = net(torch.rand(2, 1, 2, 8, 8))
        assert out.membrane.shape == (2, 1, 4)
        assert [s[0, 0].numel() for s in out.spikes] == net.neuron_counts()

    def test_104_constructible(self):
        assert len(SpikingResNet(ResNetConfig(depth=104, widths=(2, 2, 2, 2), input_hw=(8, 8), T=1)).blocks) == 51

    def test_stage_attention_switch(self):
        net = SpikingResNet(ResNetConfig(depth=8, widths=(4, 4, 4), attention_stages=(True, False, True),
                                         input_hw=(8, 8)))
        assert [b.csa is not None for b in net.blocks] == [True, False, True]

    def test_bad_depth(self):
        with pytest.raises(ConfigError):
            ResNetConfig(depth=12)

    def test_gradient_reaches_input(self):
        net = SpikingResNet(ResNetConfig(depth=8, widths=(4, 4, 4), input_hw=(8, 8), T=2))
        x = torch.rand(2, 1, 2, 8, 8, requires_grad=True)
        net(x).membrane.sum().backward()
        assert math.isfinite(x.grad.norm().item())
