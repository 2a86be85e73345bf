"""Run configuration: sectioned ``key = value`` files plus command-line overrides.

Grammar (a subset of INI read with :mod:`configparser`)::

    # comment            ; comment
    [section]
    key = value

Sections and keys are fixed by :data:`SCHEMA`; anything else is an error.
Tuples are comma-separated integers. Booleans accept true/false/yes/no/1/0.
Overrides use ``section.key=value`` and win over file values.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, Location
from .energy import EnergyConstants
from .errors import ConfigError
from .events import SyntheticDatasetSpec
from .network import NetConfig
from .neuron import LIFParams, SurrogateParams
from .training import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _fraction(s: str) -> Fraction:
    return Fraction(s.strip())


SCHEMA = {
    "run": {"seed": (int, 0), "out_dir": (str, "runs")},
    "data": {
        "n_classes": (int, 4), "samples_per_class": (int, 24), "test_samples_per_class": (int, 16),
        "width": (int, 32), "height": (int, 32), "duration_us": (int, 16_000), "dt_prime_us": (int, 100),
        "dt_ms": (_fraction, Fraction(1)), "speed_px_per_ms": (float, 1.6), "noise_rate": (float, 0.002),
    },
    "model": {
        "channels": (_ints, (16, 32, 32)), "pools": (_ints, (2, 2, 2)), "kernel": (int, 3), "T": (int, 16),
        "attention": (str, "TCSA"), "ta_location": (str, "ConvPOST"), "ca_location": (str, "ActivatePRE"),
        "sa_location": (str, "ActivatePRE"), "r_t": (int, 2), "r_c": (int, 4), "sa_kernel": (int, 7),
    },
    "lif": {"u_th": (float, 0.5), "v_reset": (float, 0.0), "beta": (float, 0.25),
            "surrogate": (str, "rectangular"), "surrogate_width": (float, 0.0)},
    "train": {"epochs": (int, 15), "batch_size": (int, 16), "learning_rate": (float, 0.05),
              "optimizer": (str, "sgd_momentum"), "momentum": (float, 0.9), "readout": (str, "membrane")},
    "energy": {"e_mac_pj": (float, 4.6), "e_ac_pj": (float, 0.9), "exact_boundaries": (_bool, False)},
    "isometry": {"n_samples": (int, 100), "epsilon": (float, 0.1), "tolerance": (float, 0.25)},
}


@dataclass(frozen=True)
class Seeds:
    """Independent per-consumer seeds split from one root seed."""

    root: int
    data_train: int
    data_test: int
    init: int
    shuffle: int
    probe: int

    @classmethod
    def split(cls, root: int) -> "Seeds":
        children = np.random.SeedSequence(root).spawn(5)
        vals = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
        return cls(root, *vals)


@dataclass
class RunConfig:
    values: dict
    lines: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def seeds(self) -> Seeds:
        return Seeds.split(self.seed)

    def _fail(self, section, key, msg):
        raise ConfigError(f"{section}.{key}: {msg}", line=self.lines.get((section, key)))

    def dataset_spec(self, split: str = "train") -> SyntheticDatasetSpec:
        d = self.values["data"]
        seeds = self.seeds
        spec = SyntheticDatasetSpec(
            n_classes=d["n_classes"],
            samples_per_class=d["samples_per_class"] if split == "train" else d["test_samples_per_class"],
            width=d["width"], height=d["height"], duration_us=d["duration_us"],
            seed=seeds.data_train if split == "train" else seeds.data_test,
            dt_prime_us=d["dt_prime_us"], speed_px_per_ms=d["speed_px_per_ms"], noise_rate=d["noise_rate"],
        )
        try:
            spec.validate()
        except ConfigError as e:
            key = next((k for k in d if k in str(e)), "n_classes")
            self._fail("data", key, str(e))
        return spec

    def lif(self) -> tuple[LIFParams, SurrogateParams]:
        l = self.values["lif"]
        try:
            lif = LIFParams(l["u_th"], l["v_reset"], l["beta"])
        except ConfigError as e:
            key = next((k for k in ("u_th", "v_reset", "beta") if k in str(e)), "u_th")
            self._fail("lif", key, str(e))
        try:
            sg = SurrogateParams(l["surrogate"], l["surrogate_width"] or None)
        except ConfigError as e:
            self._fail("lif", "surrogate", str(e))
        return lif, sg

    def attention(self, name: str | None = None) -> AttentionConfig | None:
        m = self.values["model"]
        name = m["attention"] if name is None else name
        try:
            locs = {"TA": Location(m["ta_location"]), "CA": Location(m["ca_location"]),
                    "SA": Location(m["sa_location"])}
        except ValueError as e:
            key = next(k for k in ("ta_location", "ca_location", "sa_location")
                       if m[k] not in {l.value for l in Location})
            self._fail("model", key, str(e))
        try:
            att = AttentionConfig.from_name(name, locations=locs, r_t=m["r_t"], r_c=m["r_c"],
                                            sa_kernel=m["sa_kernel"])
        except ConfigError as e:
            key = "sa_kernel" if "sa_kernel" in str(e) else "attention"
            if "ActivatePRE" in str(e) or "location" in str(e):
                key = "ta_location"
            self._fail("model", key, str(e))
        return att if att.enabled else None

    def net(self, attention: str | None = None, locations: dict | None = None) -> NetConfig:
        m, d = self.values["model"], self.values["data"]
        lif, sg = self.lif()
        att = self.attention(attention)
        if locations and att is not None:
            att = AttentionConfig(att.enabled, {**att.locations, **locations}, att.r_t, att.r_c, att.sa_kernel)
        if len(m["channels"]) != len(m["pools"]):
            self._fail("model", "pools", "channels and pools must have equal length")
        try:
            return NetConfig(in_channels=2, input_hw=(d["height"], d["width"]), channels=m["channels"],
                             kernel=m["kernel"], pools=m["pools"], n_classes=d["n_classes"], T=m["T"],
                             lif=lif, sg=sg, attention=att)
        except ConfigError as e:
            self._fail("model", "T", str(e))

    def train(self) -> TrainConfig:
        t = self.values["train"]
        try:
            return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                               optimizer=t["optimizer"], momentum=t["momentum"], seed=self.seeds.shuffle,
                               T=self.values["model"]["T"], readout=t["readout"])
        except ConfigError as e:
            key = next((k for k in t if k in str(e)), "epochs")
            self._fail("train", key, str(e))

    def energy(self) -> EnergyConstants:
        e = self.values["energy"]
        try:
            return EnergyConstants(e["e_mac_pj"], e["e_ac_pj"])
        except ConfigError as err:
            self._fail("energy", "e_mac_pj", str(err))

    def validate(self) -> "RunConfig":
        """Build every derived object once so errors surface before any work starts."""
        self.dataset_spec("train")
        self.dataset_spec("test")
        self.net()
        self.train()
        self.energy()
        if self.values["data"]["dt_ms"] <= 0:
            self._fail("data", "dt_ms", "must be positive")
        iso = self.values["isometry"]
        if iso["n_samples"] < 1:
            self._fail("isometry", "n_samples", "must be >= 1")
        return self


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        if m := _SECTION_RE.match(line):
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
        elif section and (m := _KEY_RE.match(line)):
            lines[(section, m.group(1).strip())] = no
    return lines


def _coerce(section, key, raw, line):
    conv, _ = SCHEMA[section][key]
    try:
        return conv(raw)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({e})", line=line) from None


def parse_config(text: str, source: str = "<string>", overrides: list[str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#", ";"), strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside any [section]", line=e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if getattr(e, "errors", None) else None
        raise ConfigError(f"malformed line {e.errors[0][1]!r}" if line else str(e), line=line) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.section}.{e.option}", line=e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", line=e.lineno) from None

    lines = _line_index(text)
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", line=lines.get((section, None)))
        for key, raw in parser[section].items():
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}", line=line)
            values[section][key] = _coerce(section, key, raw, line)

    for item in overrides or []:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        values[section][key] = _coerce(section, key, raw.strip(), None)
        lines.pop((section, key), None)
    return RunConfig(values, lines, source)


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path), overrides)


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable text form of all values."""
    out = []
    for section, keys in cfg.values.items():
        out.append(f"[{section}]")
        for k, v in keys.items():
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)
