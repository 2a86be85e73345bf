"""Event streams, frame aggregation and the synthetic moving-bar dataset."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError

FRAME_MAGIC = 0x51455346  # b"FSEQ" little-endian
FRAME_VERSION = 1
_HEADER = struct.Struct("<8i")

# unit vectors (dx, dy) of motion; y grows downwards in image coordinates
DIRECTIONS = {
    "E": (1.0, 0.0),
    "N": (0.0, -1.0),
    "W": (-1.0, 0.0),
    "S": (0.0, 1.0),
    "NE": (0.7071067811865476, -0.7071067811865476),
    "NW": (-0.7071067811865476, -0.7071067811865476),
    "SW": (-0.7071067811865476, 0.7071067811865476),
    "SE": (0.7071067811865476, 0.7071067811865476),
}
DIRECTION_ORDER = ("E", "N", "W", "S", "NE", "NW", "SW", "SE")


class Event(NamedTuple):
    x: int
    y: int
    t_us: int
    polarity: int


@dataclass
class EventStream:
    """Events from one recording, stored as an ``(N, 4)`` int64 array of x, y, t_us, p."""

    width: int
    height: int
    dt_prime_us: int = 1
    events: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=np.int64).reshape(-1, 4)

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event], dt_prime_us: int = 1):
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, dt_prime_us, arr)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        for row in self.events:
            yield Event(*(int(v) for v in row))

    @property
    def duration_us(self) -> int:
        return int(self.events[-1, 2]) + 1 if len(self.events) else 0

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"event stream has empty dimension {self.width}x{self.height}")
        if self.dt_prime_us <= 0:
            raise ConfigError("dt_prime_us must be positive")
        if not len(self.events):
            return
        x, y, t, p = self.events.T
        if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
            raise ValueError("event coordinates out of bounds")
        if t.min() < 0 or np.any(np.diff(t) < 0):
            raise ValueError("timestamps must be non-negative and non-decreasing")
        if not np.all((p == 1) | (p == -1)):
            raise ValueError("polarity must be +1 or -1")

    def concat(self, other: "EventStream") -> "EventStream":
        """Merge two streams of the same sensor, keeping timestamps sorted (stable)."""
        if (self.width, self.height) != (other.width, other.height):
            raise ValueError("cannot merge streams with different resolutions")
        ev = np.concatenate([self.events, other.events])
        order = np.argsort(ev[:, 2], kind="stable")
        return EventStream(self.width, self.height, self.dt_prime_us, ev[order])


@dataclass
class FrameSequence:
    """Network input indexed ``[t][channel][y][x]``.

    For event data channel 0 counts ON events and channel 1 OFF events.
    ``dt_ms`` is ``None`` for replicated static images.
    """

    data: np.ndarray
    dt_ms: Fraction | None = None

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def aggregate_frames(stream: EventStream, dt_ms, T: int) -> FrameSequence:
    """Sum events into ``T`` half-open windows of ``dt_ms`` milliseconds.

    Window ``t`` collects events with ``t*dt <= t_us < (t+1)*dt``; anything at or
    past ``T*dt`` is dropped.
    """
    if stream.width <= 0 or stream.height <= 0:
        raise ConfigError(f"event stream has empty dimension {stream.width}x{stream.height}")
    dt = _as_fraction(dt_ms)
    if dt <= 0:
        raise ConfigError("dt_ms must be positive")
    if T < 1:
        raise ConfigError("T must be >= 1")

    frames = np.zeros((T, 2, stream.height, stream.width), dtype=np.float32)
    ev = stream.events
    if len(ev):
        # exact window index: floor(t_us / (dt * 1000)) in integer arithmetic
        num, den = dt.numerator * 1000, dt.denominator
        win = (ev[:, 2] * den) // num
        keep = win < T
        ev, win = ev[keep], win[keep]
        ch = (ev[:, 3] == -1).astype(np.int64)
        np.add.at(frames, (win, ch, ev[:, 1], ev[:, 0]), 1.0)
    return FrameSequence(frames, dt)


def replicate_static(image, T: int) -> FrameSequence:
    """Repeat a ``[C][H][W]`` image at every time step."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or 0 in image.shape:
        raise ValueError(f"expected a non-empty [C][H][W] image, got shape {image.shape}")
    return FrameSequence(np.repeat(image[None], T, axis=0), None)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_classes: int = 4
    samples_per_class: int = 10
    width: int = 32
    height: int = 32
    duration_us: int = 16_000
    seed: int = 0
    dt_prime_us: int = 100
    bar_width: float = 3.0
    bar_half_length: float = 10.0
    speed_px_per_ms: float = 1.6
    noise_rate: float = 0.002  # OFF-event probability per pixel per native tick

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_classes > len(DIRECTION_ORDER):
            raise ConfigError(
                f"n_classes={self.n_classes} exceeds the {len(DIRECTION_ORDER)} available motion templates"
            )
        for name in ("samples_per_class", "width", "height", "duration_us", "dt_prime_us"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")


def _bar_mask(xs, ys, cx, cy, d, pos, spec: SyntheticDatasetSpec):
    dx, dy = d
    along = (xs - cx) * dx + (ys - cy) * dy
    perp = -(xs - cx) * dy + (ys - cy) * dx
    return (along >= pos) & (along < pos + spec.bar_width) & (np.abs(perp) <= spec.bar_half_length)


def _render_sample(direction: str, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> EventStream:
    d = DIRECTIONS[direction]
    W, H = spec.width, spec.height
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    cx = (W - 1) / 2 + rng.uniform(-W / 8, W / 8)
    cy = (H - 1) / 2 + rng.uniform(-H / 8, H / 8)
    speed = spec.speed_px_per_ms * rng.uniform(0.8, 1.2) * spec.dt_prime_us / 1000.0
    extent = max(W, H) / 2
    start = -extent - spec.bar_width + rng.uniform(-2.0, 2.0)

    n_ticks = spec.duration_us // spec.dt_prime_us
    prev = np.zeros((H, W), dtype=bool)
    chunks = []
    for k in range(n_ticks):
        t_us = k * spec.dt_prime_us
        cur = _bar_mask(xs, ys, cx, cy, d, start + speed * k, spec)
        on_y, on_x = np.nonzero(cur & ~prev)
        off_mask = prev & ~cur
        if spec.noise_rate > 0:
            off_mask |= rng.random((H, W)) < spec.noise_rate
        off_y, off_x = np.nonzero(off_mask)
        if len(on_x) or len(off_x):
            block = np.empty((len(on_x) + len(off_x), 4), dtype=np.int64)
            block[: len(on_x), 0], block[: len(on_x), 1], block[: len(on_x), 3] = on_x, on_y, 1
            block[len(on_x):, 0], block[len(on_x):, 1], block[len(on_x):, 3] = off_x, off_y, -1
            block[:, 2] = t_us
            chunks.append(block)
        prev = cur
    events = np.concatenate(chunks) if chunks else np.zeros((0, 4), dtype=np.int64)
    return EventStream(W, H, spec.dt_prime_us, events)


def synth_events(spec: SyntheticDatasetSpec) -> list[tuple[EventStream, int]]:
    """Moving-bar streams, ``samples_per_class`` per class, ordered by sample then class.

    Class ``k`` is a bar moving along compass direction ``DIRECTION_ORDER[k]``.
    Position, speed and noise are drawn from ``spec.seed`` only.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.samples_per_class):
        for label in range(spec.n_classes):
            out.append((_render_sample(DIRECTION_ORDER[label], spec, rng), label))
    return out


# --------------------------------------------------------------------------
# file formats


def write_events(stream: EventStream, path) -> None:
    """Text format: header ``width,height,dt_prime_us`` then one ``x,y,t_us,p`` per line."""
    lines = [f"{stream.width},{stream.height},{stream.dt_prime_us}"]
    lines.extend(f"{x},{y},{t},{p}" for x, y, t, p in stream.events.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def read_events(path) -> EventStream:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty event file")
    try:
        width, height, dt_prime = (int(v) for v in text[0].split(","))
    except ValueError as exc:
        raise ValueError(f"{path}:1: bad header {text[0]!r}") from exc
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected x,y,t_us,p")
        rows.append([int(v) for v in parts])
    stream = EventStream(width, height, dt_prime, np.array(rows, dtype=np.int64).reshape(-1, 4))
    stream.validate()
    return stream


def save_frames(frames: FrameSequence, path) -> None:
    """Little-endian int32 header ``magic, version, T, C, H, W, dt_num, dt_den`` then float32 data."""
    T, C, H, W = frames.data.shape
    dt = frames.dt_ms if frames.dt_ms is not None else Fraction(0)
    header = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, T, C, H, W, dt.numerator, dt.denominator)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frames.data, dtype="<f4").tobytes())


def load_frames(path) -> FrameSequence:
    raw = Path(path).read_bytes()
    magic, version, T, C, H, W, num, den = _HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise ValueError(f"{path}: not a frame file")
    if version != FRAME_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, C, H, W).copy()
    dt = Fraction(num, den) if num else None
    return FrameSequence(data, dt)
