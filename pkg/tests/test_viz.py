import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeattn.network import NetConfig, SpikingConvNet
from spikeattn.training import Dataset
from spikeattn.viz import (
    COLORMAP,
    average_spiking_response,
    collapse_sample,
    colorize,
    emit_heatmap,
    read_ppm,
    tile_channels,
)


class FixedSpikes(torch.nn.Module):
    """Stand-in model replaying stored spike tensors for each sample."""

    def __init__(self, per_sample):
        super().__init__()
        self.per_sample = per_sample

    def forward(self, x):
        idx = x[0, :, 0, 0, 0].long()
        spikes = [torch.stack([self.per_sample[i][layer] for i in idx.tolist()], dim=1)
                  for layer in range(len(self.per_sample[0]))]

        class Out:
            pass
        out = Out()
        out.spikes = spikes
        return out


def dataset_of(n, T=2):
    x = torch.zeros(n, T, 1, 1, 1)
    x[:, :, 0, 0, 0] = torch.arange(n, dtype=torch.float32)[:, None]
    return Dataset(x, torch.zeros(n, dtype=torch.int64))


class TestColormap:
    def test_table(self):
        assert COLORMAP.shape == (256, 3) and COLORMAP.dtype == np.uint8
        assert COLORMAP[0].tolist() == [0, 0, 255]
        assert COLORMAP[255].tolist() == [255, 0, 0]
        assert COLORMAP[100].tolist() == [100, 0, 155]

    def test_rounding(self):
        assert colorize(np.array([[0.5]]))[0, 0].tolist() == COLORMAP[128].tolist()
        assert colorize(np.array([[1 / 255 * 0.49]]))[0, 0].tolist() == COLORMAP[0].tolist()

    def test_range_checked(self):
        with pytest.raises(ValueError):
            colorize(np.array([[1.2]]))
        with pytest.raises(ValueError):
            colorize(np.zeros(3))


class TestGolden:
    @pytest.mark.parametrize("value,name", [(0.0, "zeros_4x3.ppm"), (1.0, "ones_4x3.ppm")])
    def test_bytes(self, tmp_path, golden_dir, value, name):
        emit_heatmap(np.full((3, 4), value), tmp_path / name)
        assert (tmp_path / name).read_bytes() == (golden_dir / name).read_bytes()

    def test_deterministic(self, tmp_path):
        m = np.random.default_rng(0).random((5, 7))
        emit_heatmap(m, tmp_path / "a.ppm")
        emit_heatmap(m, tmp_path / "b.ppm")
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
        assert read_ppm(tmp_path / "a.ppm").shape == (5, 7, 3)

    def test_scale(self, tmp_path):
        emit_heatmap(np.eye(2), tmp_path / "s.ppm", scale=3)
        img = read_ppm(tmp_path / "s.ppm")
        assert img.shape == (6, 6, 3) and img[0, 0].tolist() == [255, 0, 0] and img[0, 5].tolist() == [0, 0, 255]

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_heatmap(np.zeros((2, 2)), tmp_path / "missing" / "x.ppm")


class TestTiling:
    def test_layout(self):
        img = tile_channels(np.zeros((5, 2, 3)))
        # ceil(sqrt(5)) = 3 columns, 2 rows, 1-px separators
        assert img.shape == (2 * 2 + 1, 3 * 3 + 2, 3)
        assert img[2].tolist() == [[255, 255, 255]] * 11
        assert img[0, 3].tolist() == [255, 255, 255]
        assert img[3, 8].tolist() == [255, 255, 255]  # unused sixth cell
        assert img[0, 0].tolist() == [0, 0, 255]


class TestCollapse:
    def test_all_ones(self):
        assert (collapse_sample(np.ones((3, 2, 4, 4))) == 1).all()

    def test_single_slice(self):
        s = np.zeros((2, 2, 3, 3))
        s[1, 0] = np.eye(3)
        np.testing.assert_array_equal(collapse_sample(s), np.eye(3) / 4)

    def test_zero(self):
        assert not collapse_sample(np.zeros((2, 3, 2, 2))).any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        s = (rng.random((3, 4, 2, 2)) < 0.5).astype(float)
        ref = collapse_sample(s)
        np.testing.assert_allclose(collapse_sample(s[rng.permutation(3)][:, rng.permutation(4)]), ref)
        assert ((ref >= 0) & (ref <= 1)).all()

    def test_shape_check(self):
        with pytest.raises(ValueError):
            collapse_sample(np.zeros((2, 2, 2)))


class TestASRV:
    def test_silent_model(self):
        model = FixedSpikes([[torch.zeros(2, 3, 2, 2)]] * 3)
        asr = average_spiking_response(model, dataset_of(3))
        assert not asr.rates(0).any()

    def test_single_sample(self):
        s = (torch.rand(2, 3, 2, 2, generator=torch.Generator().manual_seed(0)) < 0.5).float()
        asr = average_spiking_response(FixedSpikes([[s]]), dataset_of(1))
        np.testing.assert_array_equal(asr.rates(0), s.numpy())

    def test_half(self):
        a, b = torch.zeros(1, 1, 1, 1), torch.ones(1, 1, 1, 1)
        asr = average_spiking_response(FixedSpikes([[a], [b]]), dataset_of(2, T=1))
        assert asr.rates(0, 0)[0, 0, 0] == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            average_spiking_response(FixedSpikes([]), dataset_of(0))

    def test_batching_does_not_change_counts(self):
        torch.manual_seed(0)
        net = SpikingConvNet(NetConfig(input_hw=(8, 8), channels=(4,), pools=(2,), T=3))
        data = Dataset(torch.rand(7, 3, 2, 8, 8) * 2, torch.zeros(7, dtype=torch.int64))
        a = average_spiking_response(net, data, batch_size=2)
        b = average_spiking_response(net, data, batch_size=64)
        for x, y in zip(a.counts, b.counts):
            np.testing.assert_array_equal(x, y)

    def test_rates_are_exact_fractions_and_match_nsar(self):
        torch.manual_seed(1)
        net = SpikingConvNet(NetConfig(input_hw=(8, 8), channels=(4, 4), pools=(2, 1), T=3))
        data = Dataset(torch.rand(5, 3, 2, 8, 8) * 2, torch.zeros(5, dtype=torch.int64))
        asr = average_spiking_response(net, data)
        rec = asr.to_record()
        for layer in range(len(asr.counts)):
            for t in range(3):
                assert asr.neuron_mean(layer, t) == rec.layer_nsar(layer)[t]
            assert asr.counts[layer].dtype == np.int64
            np.testing.assert_array_equal(asr.rates(layer) * 5, asr.counts[layer])
