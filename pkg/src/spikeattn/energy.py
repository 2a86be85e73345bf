"""FLOP ledger, MAC/AC energy model and spiking-activity statistics.

Counting rules
--------------
* conv: ``k_h * k_w * c_in * c_out * h_out * w_out`` per step (pre-pool output size)
* fc: ``in * out`` per step
* the first synaptic layer is MAC (it sees real-valued frames); every later
  conv/fc layer is AC
* spike-driven ACs: each input spike into a conv layer costs ``k_h * k_w * c_out``
  (``exact=True`` counts only the output positions the spike actually reaches);
  into an fc layer it costs ``out``
* attention weight generation (``delta_mac1``): TA ``4*T*T/r_t`` per forward,
  CA ``4*C*C/r_c`` per step, SA ``2*k*k*H*W`` per step
* attention refinement (``delta_mac2``): one multiply per gated element
* avg/max pooling inside the gates is reported as ``pool_ac`` and, like BN and
  AvgPool, left out of the energy terms
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ

    def __post_init__(self):
        if not (self.e_mac > 0 and self.e_ac > 0):
            raise ConfigError("energy constants must be positive")


@dataclass
class LayerFlops:
    layer: str
    kind: str
    flops: float
    op_class: str  # "MAC" or "AC"


@dataclass
class FlopProfile:
    layers: list = field(default_factory=list)
    delta_mac1: float = 0
    delta_mac2: float = 0
    delta_ac: float = 0
    pool_ac: float = 0
    gates: list = field(default_factory=list)  # per-gate breakdown

    @property
    def mac(self) -> float:
        return sum(l.flops for l in self.layers if l.op_class == "MAC")

    @property
    def ac(self) -> float:
        return sum(l.flops for l in self.layers if l.op_class == "AC")


def _require(entry, *keys):
    missing = [k for k in keys if entry.get(k) is None]
    if missing:
        raise ConfigError(f"layer {entry.get('kind', '?')} is missing {missing}")


def _gate_cost(g: dict, T: int) -> tuple[int, int, int]:
    """``(generation MACs, refinement MACs, pooling ACs)`` of one gate over ``T`` steps."""
    _require(g, "dim", "C", "H", "W")
    C, H, W = g["C"], g["H"], g["W"]
    elems = C * H * W
    if g["dim"] == "TA":
        _require(g, "r")
        gen = 4 * T * T // g["r"]
    elif g["dim"] == "CA":
        _require(g, "r")
        gen = 4 * C * C // g["r"] * T
    elif g["dim"] == "SA":
        _require(g, "k")
        gen = 2 * g["k"] * g["k"] * H * W * T
    else:
        raise ConfigError(f"unknown attention dimension {g['dim']!r}")
    return gen, elems * T, 2 * elems * T


def count_flops(arch: list[dict], T: int = 1) -> FlopProfile:
    """Dense FLOP ledger of one forward pass over ``T`` steps.

    ``arch`` is a list of layer dicts as produced by ``SpikingConvNet.describe``:
    conv layers need ``k_h, k_w, c_in, c_out, h_out, w_out``; fc layers ``in, out``;
    optional ``attention`` lists of gate dicts.
    """
    prof = FlopProfile()
    for i, entry in enumerate(arch):
        kind = entry.get("kind")
        if kind == "conv":
            _require(entry, "k_h", "k_w", "c_in", "c_out", "h_out", "w_out")
            fl = entry["k_h"] * entry["k_w"] * entry["c_in"] * entry["c_out"] * entry["h_out"] * entry["w_out"]
        elif kind == "fc":
            _require(entry, "in", "out")
            fl = entry["in"] * entry["out"]
        else:
            raise ConfigError(f"layer {i}: unknown kind {kind!r}")
        prof.layers.append(LayerFlops(f"{kind}{i + 1}", kind, fl * T, "MAC" if i == 0 else "AC"))
        for g in entry.get("attention", ()):
            gen, ref, pool = _gate_cost(g, T)
            prof.delta_mac1 += gen
            prof.delta_mac2 += ref
            prof.pool_ac += pool
            prof.gates.append({"layer": i + 1, "dim": g["dim"], "location": g.get("location"),
                               "mac1": gen, "mac2": ref, "pool_ac": pool})
    return prof


def e_base(profile: FlopProfile, k: EnergyConstants = EnergyConstants()) -> float:
    """``e_mac * MAC-layer FLOPs + e_ac * AC-layer FLOPs`` in pJ."""
    return k.e_mac * profile.mac + k.e_ac * profile.ac


def delta_e_and_r_ee(profile: FlopProfile, k: EnergyConstants = EnergyConstants(),
                     base: float | None = None) -> tuple[float, float]:
    """Energy shift of the attention model and the efficiency ratio ``E_base / (E_base + dE)``.

    ``base`` defaults to ``e_base(profile)``.
    """
    base = e_base(profile, k) if base is None else base
    delta = k.e_mac * (profile.delta_mac1 + profile.delta_mac2) - k.e_ac * profile.delta_ac
    if base + delta <= 0:
        raise ValueError(f"non-physical energy: E_base={base} dE={delta}")
    return delta, base / (base + delta)


# --------------------------------------------------------------------------
# spike records


@dataclass
class SpikeRecord:
    """Integer spike tallies of one or more inference passes.

    ``step_counts[l, t]`` sums layer ``l`` spikes at step ``t`` over all samples;
    ``position_counts[l]`` sums over steps and samples per neuron.
    """

    step_counts: np.ndarray
    neurons: np.ndarray
    n_samples: int = 1
    position_counts: list | None = None

    @property
    def T(self) -> int:
        return self.step_counts.shape[1]

    @classmethod
    def from_spikes(cls, spikes: list) -> "SpikeRecord":
        """From per-layer ``[T, B, ...]`` binary tensors."""
        steps, neurons, positions = [], [], []
        for s in spikes:
            s = s.detach()
            n_batch = s.shape[1]
            per = s[0, 0].numel()
            steps.append(s.reshape(s.shape[0], -1).sum(dim=1).to(torch.int64).numpy())
            neurons.append(per)
            positions.append(s.sum(dim=(0, 1)).to(torch.int64).numpy())
        return cls(np.array(steps, dtype=np.int64), np.array(neurons, dtype=np.int64), n_batch, positions)

    def merge(self, other: "SpikeRecord") -> "SpikeRecord":
        if not np.array_equal(self.neurons, other.neurons) or self.T != other.T:
            raise ValueError("records come from different architectures")
        pos = None
        if self.position_counts is not None and other.position_counts is not None:
            pos = [a + b for a, b in zip(self.position_counts, other.position_counts)]
        return SpikeRecord(self.step_counts + other.step_counts, self.neurons,
                           self.n_samples + other.n_samples, pos)

    def layer_nsar(self, layer: int) -> list[float]:
        n = int(self.neurons[layer]) * self.n_samples
        return [int(c) / n for c in self.step_counts[layer]]


@dataclass
class NasarResult:
    nsar: list
    nasar: float
    spike_count: float  # per sample
    total_spikes: int
    neurons: int


def nasar(rec: SpikeRecord) -> NasarResult:
    """Network spiking-activity rate per step and its mean over steps.

    ``spike_count`` (per sample) equals ``nasar * neurons * T``.
    """
    neurons = int(rec.neurons.sum())
    denom = neurons * rec.n_samples
    per_step = rec.step_counts.sum(axis=0)
    nsar = [int(c) / denom for c in per_step]
    total = int(per_step.sum())
    rate = total / (denom * rec.T)
    return NasarResult(nsar, rate, rate * neurons * rec.T, total, neurons)


def conv_fanout_map(entry: dict, exact: bool = False) -> np.ndarray:
    """ACs triggered by one spike at each input position ``[H_in, W_in]`` of a conv layer."""
    k_h, k_w, c_out = entry["k_h"], entry["k_w"], entry["c_out"]
    if not exact:
        return np.full((entry["h_in"], entry["w_in"]), k_h * k_w * c_out, dtype=np.int64)
    ones = torch.ones(1, 1, entry["h_out"], entry["w_out"], dtype=torch.float64)
    cover = F.conv_transpose2d(ones, torch.ones(1, 1, k_h, k_w, dtype=torch.float64),
                               stride=entry.get("stride", 1))
    p = entry.get("padding", 0)
    cover = cover[0, 0, p:p + entry["h_in"], p:p + entry["w_in"]]
    full = torch.zeros(entry["h_in"], entry["w_in"], dtype=torch.float64)
    full[: cover.shape[0], : cover.shape[1]] = cover
    return full.round().to(torch.int64).numpy() * c_out


def spike_driven_acs(arch: list[dict], rec: SpikeRecord, exact: bool = False) -> list[int]:
    """Integer AC totals per synaptic layer (0 for the MAC input layer).

    The input to layer ``i >= 1`` is the spike output of LIF layer ``i - 1``.
    """
    if rec.position_counts is None:
        raise ValueError("record lacks per-neuron counts")
    acs = [0]
    for i, entry in enumerate(arch[1:], start=1):
        pos = np.asarray(rec.position_counts[i - 1], dtype=np.int64)
        if entry["kind"] == "conv":
            fan = conv_fanout_map(entry, exact)
            acs.append(int((pos.reshape(entry["c_in"], *fan.shape) * fan).sum()))
        else:
            acs.append(int(pos.sum()) * entry["out"])
    return acs


def spiking_profile(arch: list[dict], rec: SpikeRecord, T: int, exact: bool = False) -> FlopProfile:
    """Per-sample ledger where AC layers are charged for the spikes they actually received."""
    prof = count_flops(arch, T)
    acs = spike_driven_acs(arch, rec, exact)
    for layer, ac in zip(prof.layers[1:], acs[1:]):
        layer.flops = ac / rec.n_samples
    return prof


@dataclass
class EnergyReport:
    e_base: float
    e_att: float
    delta_e: float
    r_ee: float
    nasar: float
    nsar: list
    spike_count: float
    delta_mac1: float = 0
    delta_mac2: float = 0
    delta_ac: float = 0
    delta_ac_total: int = 0
    pool_ac: float = 0
    layers: list = field(default_factory=list)

    HEADER = ("# E_base = e_mac*FL(layer 1) + e_ac*sum(spike-driven ACs); "
              "dE = e_mac*(dMAC1 + dMAC2) - e_ac*dAC; r_EE = E_base/(E_base + dE); energies in pJ per sample")

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("e_base_pj", repr(self.e_base)), ("e_att_pj", repr(self.e_att)),
            ("delta_e_pj", repr(self.delta_e)), ("r_ee", repr(self.r_ee)),
            ("nasar", repr(self.nasar)), ("spike_count", repr(self.spike_count)),
            ("delta_mac1", repr(self.delta_mac1)), ("delta_mac2", repr(self.delta_mac2)),
            ("delta_ac", repr(self.delta_ac)), ("pool_ac", repr(self.pool_ac)),
        ] + [(f"nsar_t{t}", repr(v)) for t, v in enumerate(self.nsar)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def table(self) -> str:
        lines = [self.HEADER]
        width = max(len(k) for k, _ in self.rows())
        for k, v in self.rows():
            lines.append(f"{k:<{width}}  {float(v):.6g}")
        if self.layers:
            lines.append("")
            lines.append(f"{'layer':<8}{'kind':<6}{'class':<6}{'flops/sample':>16}")
            for l in self.layers:
                lines.append(f"{l.layer:<8}{l.kind:<6}{l.op_class:<6}{l.flops:>16.1f}")
        return "\n".join(lines)


def compare_runs(arch_vanilla: list[dict], rec_vanilla: SpikeRecord, arch_att: list[dict],
                 rec_att: SpikeRecord, k: EnergyConstants = EnergyConstants(), exact: bool = False) -> EnergyReport:
    """Energy of an attention run relative to the vanilla run on the same inputs."""
    if rec_vanilla.n_samples != rec_att.n_samples:
        raise ValueError("runs must cover the same samples")
    T, n = rec_vanilla.T, rec_vanilla.n_samples
    base_prof = spiking_profile(arch_vanilla, rec_vanilla, T, exact)
    base = e_base(base_prof, k)
    att = count_flops(arch_att, T)
    d_total = sum(spike_driven_acs(arch_vanilla, rec_vanilla, exact)) - sum(spike_driven_acs(arch_att, rec_att, exact))
    att.delta_ac = d_total / n
    delta, r_ee = delta_e_and_r_ee(att, k, base=base)
    na = nasar(rec_att)
    return EnergyReport(base, base + delta, delta, r_ee, na.nasar, na.nsar, na.spike_count,
                        att.delta_mac1, att.delta_mac2, att.delta_ac, d_total, att.pool_ac, base_prof.layers)
