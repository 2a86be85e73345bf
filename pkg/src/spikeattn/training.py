"""Surrogate-gradient BPTT training, rate readout and numerical gradient checks."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TrainingDiverged
from .events import EventStream, aggregate_frames

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adam")
READOUTS = ("membrane", "spikes")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.1
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    T: int = 16
    loss: str = "cross_entropy_on_rate"
    readout: str = "membrane"
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.T < 1:
            raise ConfigError("epochs, batch_size and T must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if self.loss != "cross_entropy_on_rate":
            raise ConfigError(f"unsupported loss {self.loss!r}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    nasar: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    state_dict: dict | None = None

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].loss

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "accuracy", "nasar"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.loss), repr(e.accuracy), repr(e.nasar)])


@dataclass
class Dataset:
    """Frames ``[N, T, C, H, W]`` and integer labels ``[N]``."""

    x: torch.Tensor
    y: torch.Tensor

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[i:i + batch_size])
            yield self.x[idx].transpose(0, 1), self.y[idx]


def frames_dataset(samples: list[tuple[EventStream, int]], dt_ms, T: int) -> Dataset:
    x = np.stack([aggregate_frames(s, dt_ms, T).data for s, _ in samples])
    y = np.array([label for _, label in samples], dtype=np.int64)
    return Dataset(torch.from_numpy(x), torch.from_numpy(y))


def readout(out_seq, mode: str = "membrane"):
    """Mean over the leading time axis.

    ``out_seq`` holds output-layer membrane potentials (or spikes for
    ``mode="spikes"``), shaped ``[T, K]`` or ``[T, B, K]``.
    """
    if out_seq.shape[0] < 1:
        raise ValueError("need at least one time step")
    return out_seq.mean(dim=0)


def _logits(model, out, mode):
    return readout(out.membrane if mode == "membrane" else out.spikes[-1], mode)


def spike_totals(spikes) -> np.ndarray:
    """Spike counts ``[layers, T]`` summed over batch and neurons."""
    return np.array([s.detach().flatten(2).sum(dim=(1, 2)).to(torch.int64).numpy() for s in spikes])


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)


def bptt_train(model, dataset: Dataset, cfg: TrainConfig) -> TrainReport:
    """Unrolled BPTT with surrogate spike gradients; deterministic for a given seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(cfg.seed)
    opt = _make_optimizer(model, cfg)
    neurons = sum(model.neuron_counts())
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(dataset)) if cfg.shuffle else None
        loss_sum, correct, spikes = 0.0, 0, 0
        for x, y in dataset.batches(cfg.batch_size, order):
            out = model(x)
            logits = _logits(model, out, cfg.readout)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch}; "
                    f"max |membrane| = {out.membrane.abs().max().item():.3g}, lr = {cfg.learning_rate}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(y)
            correct += int((logits.argmax(1) == y).sum())
            spikes += int(spike_totals(out.spikes).sum())
        n = len(dataset)
        stats = EpochStats(epoch, loss_sum / n, correct / n, spikes / (neurons * cfg.T * n))
        log.info("epoch %d loss %.4f acc %.3f nasar %.4f", epoch, stats.loss, stats.accuracy, stats.nasar)
        report.epochs.append(stats)
    report.state_dict = copy.deepcopy(model.state_dict())
    return report


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    spike_totals: np.ndarray  # [layers, T] summed over the dataset
    n_samples: int


@torch.no_grad()
def evaluate(model, dataset: Dataset, batch_size: int = 64, readout_mode: str = "membrane") -> EvalResult:
    model.eval()
    correct, loss_sum = 0, 0.0
    totals = None
    for x, y in dataset.batches(batch_size):
        out = model(x)
        logits = _logits(model, out, readout_mode)
        loss_sum += F.cross_entropy(logits, y, reduction="sum").item()
        correct += int((logits.argmax(1) == y).sum())
        t = spike_totals(out.spikes)
        totals = t if totals is None else totals + t
    n = len(dataset)
    return EvalResult(correct / n, loss_sum / n, totals, n)


# --------------------------------------------------------------------------
# gradient verification

_REL_FLOOR = 1e-7


@dataclass
class GradCheck:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(model, sample, label: int, epsilon: float = 1e-4, n_params: int = 50,
                      seed: int = 0, readout_mode: str = "membrane") -> GradCheck:
    """Compare autograd gradients with central differences on randomly chosen parameters.

    The check runs on a float64 copy of ``model`` with the spike replaced by its
    surrogate-integral relaxation and BN in inference mode, so the forward map is
    differentiable. ``sample`` is ``[T, C, H, W]``. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-7)``.
    """
    net = copy.deepcopy(model).double().eval()
    net.set_relaxed(True)
    x = torch.as_tensor(sample, dtype=torch.float64).unsqueeze(1)
    y = torch.tensor([label])

    def loss_fn():
        return F.cross_entropy(_logits(net, net(x), readout_mode), y)

    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss_fn().backward()
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError("non-finite analytic gradient")

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    analytic, numeric = [], []
    with torch.no_grad():
        for k in flat:
            i = int(np.searchsorted(bounds, k, side="right"))
            j = int(k - (bounds[i - 1] if i else 0))
            p = params[i].view(-1)
            g = params[i].grad
            analytic.append(0.0 if g is None else float(g.view(-1)[j]))
            orig = p[j].item()
            p[j] = orig + epsilon
            up = loss_fn().item()
            p[j] = orig - epsilon
            down = loss_fn().item()
            p[j] = orig
            numeric.append((up - down) / (2 * epsilon))
    analytic, numeric = np.array(analytic), np.array(numeric)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("non-finite numerical gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    rel = np.abs(analytic - numeric) / denom
    return GradCheck(float(rel.max()), rel, analytic, numeric)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    """Write ``<path>`` (concatenated little-endian tensors) and ``<path>.json`` (manifest)."""
    path = Path(path)
    manifest, offset = {"tensors": [], "meta": meta or {}}, 0
    with open(path, "wb") as fh:
        for name, t in model.state_dict().items():
            arr = t.detach().cpu().numpy()
            dtype = arr.dtype.newbyteorder("<")
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            manifest["tensors"].append(
                {"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            fh.write(raw)
            offset += len(raw)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(state_dict, meta)``."""
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    raw = path.read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=math.prod(entry["shape"]) if entry["shape"] else 1,
                            offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state, manifest["meta"]


def config_dict(cfg) -> dict:
    return asdict(cfg)
