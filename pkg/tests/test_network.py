import pytest
import torch

from spikeattn.attention import AttentionConfig, Location, pin_gates
from spikeattn.errors import ConfigError
from spikeattn.network import NetConfig, SpikingConvNet

SMALL = dict(input_hw=(8, 8), channels=(8, 8), pools=(2, 1), T=4)


def nets(att_name="TCSA", seed=0, **kw):
    cfg = dict(SMALL, **kw)
    torch.manual_seed(seed)
    vanilla = SpikingConvNet(NetConfig(**cfg))
    torch.manual_seed(seed + 1)
    att = SpikingConvNet(NetConfig(attention=AttentionConfig.from_name(att_name, sa_kernel=3), **cfg))
    # copy backbone weights so only the gates differ
    att.load_state_dict(vanilla.state_dict(), strict=False)
    return vanilla.eval(), att.eval()


def spikes_of(net, x):
    with torch.no_grad():
        return net(x).spikes


class TestForward:
    def test_shapes(self):
        v, _ = nets()
        out = v(torch.rand(4, 3, 2, 8, 8))
        assert out.membrane.shape == (4, 3, 4)
        assert [tuple(s.shape) for s in out.spikes] == [(4, 3, 8, 4, 4), (4, 3, 8, 4, 4), (4, 3, 4)]

    def test_wrong_T(self):
        v, _ = nets()
        with pytest.raises(ValueError):
            v(torch.rand(3, 1, 2, 8, 8))

    def test_spikes_binary(self):
        _, a = nets()
        for s in spikes_of(a, torch.rand(4, 2, 2, 8, 8) * 3):
            assert set(s.unique().tolist()) <= {0.0, 1.0}

    def test_pinned_gates_equal_vanilla(self):
        v, a = nets()
        pin_gates(a)
        x = (torch.rand(4, 5, 2, 8, 8) < 0.3).float() * 2
        for sv, sa in zip(spikes_of(v, x), spikes_of(a, x)):
            assert torch.equal(sv, sa)

    def test_unpinned_gates_change_activity(self):
        v, a = nets()
        x = (torch.rand(4, 5, 2, 8, 8) < 0.3).float() * 2
        assert not all(torch.equal(p, q) for p, q in zip(spikes_of(v, x), spikes_of(a, x)))

    @pytest.mark.parametrize("dim,loc", [("TA", "ConvPRE"), ("TA", "ConvPOST"), ("CA", "ConvPRE"),
                                         ("CA", "ConvPOST"), ("CA", "ActivatePRE"), ("SA", "ConvPRE"),
                                         ("SA", "ConvPOST"), ("SA", "ActivatePRE")])
    def test_every_location_runs_and_pins_to_vanilla(self, dim, loc):
        torch.manual_seed(0)
        att = AttentionConfig(frozenset({dim}), {dim: loc}, sa_kernel=3)
        net = SpikingConvNet(NetConfig(attention=att, **SMALL)).eval()
        vanilla = SpikingConvNet(NetConfig(**SMALL)).eval()
        vanilla.load_state_dict(net.state_dict(), strict=False)
        pin_gates(net)
        x = torch.rand(4, 2, 2, 8, 8) * 2
        for p, q in zip(spikes_of(net, x), spikes_of(vanilla, x)):
            assert torch.equal(p, q)

    def test_ta_dropped_for_single_step(self):
        net = SpikingConvNet(NetConfig(attention=AttentionConfig.from_name("TCA"), **dict(SMALL, T=1)))
        assert net.attention.enabled == {"CA"}
        net(torch.rand(1, 1, 2, 8, 8))

    def test_collapsing_map_rejected(self):
        with pytest.raises(ConfigError):
            SpikingConvNet(NetConfig(input_hw=(4, 4), channels=(4, 4, 4), pools=(2, 2, 2)))


class TestDescribe:
    def test_layers_and_gates(self):
        _, a = nets()
        desc = a.describe()
        assert [d["kind"] for d in desc] == ["conv", "conv", "fc"]
        c1 = desc[0]
        assert (c1["c_in"], c1["c_out"], c1["h_out"], c1["w_out"], c1["pool"]) == (2, 8, 8, 8, 2)
        gates = {g["dim"]: g for g in c1["attention"]}
        assert gates["TA"]["r"] == 2 and gates["CA"]["r"] == 4 and gates["SA"]["k"] == 3
        assert (gates["CA"]["C"], gates["CA"]["H"]) == (8, 4)
        assert desc[1]["h_in"] == 4
        assert desc[2] == {"kind": "fc", "in": 8 * 4 * 4, "out": 4, "attention": []}

    def test_conv_pre_uses_input_shape(self):
        att = AttentionConfig(frozenset({"CA"}), {"CA": Location.CONV_PRE}, r_c=2)
        net = SpikingConvNet(NetConfig(attention=att, **SMALL))
        g = net.describe()[0]["attention"][0]
        assert (g["C"], g["H"], g["r"]) == (2, 8, 2)

    def test_neuron_counts(self):
        v, _ = nets()
        assert v.neuron_counts() == [8 * 16, 8 * 16, 4]
