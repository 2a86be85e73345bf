"""``spikeattn`` command line: data generation, training, ablations, energy, isometry, images.

Exit codes: 0 success, 1 runtime failure (or a failed isometry check),
2 usage error, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import torch

from .attention import Location
from .config import RunConfig, dump_config, load_config, parse_config
from .energy import compare_runs, nasar
from .errors import ConfigError
from .events import aggregate_frames, save_frames, synth_events, write_events
from .isometry import standard_checks
from .network import SpikingConvNet
from .training import Dataset, bptt_train, evaluate, frames_dataset, load_checkpoint, save_checkpoint
from .viz import average_spiking_response, collapse_sample, emit_heatmap, layer_image, tile_channels, write_ppm

log = logging.getLogger("spikeattn")

DIMENSION_GRID = ("none", "TA", "CA", "SA", "TCA", "TSA", "CSA", "TCSA")
LOCATION_GRID = (
    ("vanilla", None, None),
    ("TA@ConvPRE", "TA", Location.CONV_PRE),
    ("TA@ConvPOST", "TA", Location.CONV_POST),
    ("CA@ConvPRE", "CA", Location.CONV_PRE),
    ("CA@ConvPOST", "CA", Location.CONV_POST),
    ("CA@ActivatePRE", "CA", Location.ACTIVATE_PRE),
    ("SA@ConvPRE", "SA", Location.CONV_PRE),
    ("SA@ConvPOST", "SA", Location.CONV_POST),
    ("SA@ActivatePRE", "SA", Location.ACTIVATE_PRE),
)
ABLATE_HEADER = ["grid", "variant", "accuracy", "nasar", "r_ee", "delta_e_pj", "final_train_loss"]


# --------------------------------------------------------------------------
# shared steps


def build_dataset(cfg: RunConfig, split: str) -> Dataset:
    samples = synth_events(cfg.dataset_spec(split))
    return frames_dataset(samples, cfg.get("data", "dt_ms"), cfg.get("model", "T"))


def build_model(cfg: RunConfig, attention: str | None = None, locations: dict | None = None) -> SpikingConvNet:
    torch.manual_seed(cfg.seeds.init)
    return SpikingConvNet(cfg.net(attention, locations))


def load_model(path, overrides) -> tuple[SpikingConvNet, RunConfig, dict]:
    state, meta = load_checkpoint(path)
    cfg = parse_config(meta["config"], f"{path}.json", overrides).validate()
    model = build_model(cfg, meta.get("attention"))
    model.load_state_dict(state)
    return model, cfg, meta


def train_variant(cfg: RunConfig, train: Dataset, test: Dataset, attention=None, locations=None):
    model = build_model(cfg, attention, locations)
    report = bptt_train(model, train, cfg.train())
    result = evaluate(model, test)
    record = average_spiking_response(model, test).to_record()
    return model, report, result, record


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(cfg: RunConfig, out: Path, args) -> int:
    for split in ("train", "test"):
        d = out / "data" / split
        d.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, (stream, label) in enumerate(synth_events(cfg.dataset_spec(split))):
            stem = f"sample_{i:05d}"
            write_events(stream, d / f"{stem}.events")
            save_frames(aggregate_frames(stream, cfg.get("data", "dt_ms"), cfg.get("model", "T")),
                        d / f"{stem}.frames")
            rows.append([stem, label, len(stream.events)])
        _write_csv(d / "labels.csv", ["sample", "label", "n_events"], rows)
        log.info("%s: %d samples in %s", split, len(rows), d)
    (out / "config.ini").write_text(dump_config(cfg))
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    train, test = build_dataset(cfg, "train"), build_dataset(cfg, "test")
    model, report, result, record = train_variant(cfg, train, test)
    report.to_csv(out / "train_report.csv")
    attention = cfg.get("model", "attention")
    meta = {"config": dump_config(cfg), "attention": attention, "test_accuracy": result.accuracy,
            "test_loss": result.loss, "test_nasar": nasar(record).nasar}
    save_checkpoint(model, out / "model.ckpt", meta)
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"attention={attention} train_loss={report.final_loss:.6f} "
          f"test_accuracy={result.accuracy:.6f} test_nasar={meta['test_nasar']:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model, cfg, meta = load_model(args.checkpoint, args.set)
    test = build_dataset(cfg, "test")
    result = evaluate(model, test)
    record = average_spiking_response(model, test).to_record()
    na = nasar(record).nasar
    _write_csv(out / "eval_report.csv", ["accuracy", "loss", "nasar", "n_samples"],
               [[repr(result.accuracy), repr(result.loss), repr(na), result.n_samples]])
    print(f"test_accuracy={result.accuracy:.6f} test_nasar={na:.6f}")
    recorded = meta.get("test_accuracy")
    if recorded is not None and recorded != result.accuracy:
        log.warning("accuracy %r differs from %r recorded at save time", result.accuracy, recorded)
    return 0


def _ablate_rows(cfg, grid_name, variants, train, test, baseline=None):
    k = cfg.energy()
    exact = cfg.get("energy", "exact_boundaries")
    rows = []
    for label, attention, locations in variants:
        log.info("%s grid: training %s", grid_name, label)
        model, report, result, record = train_variant(cfg, train, test, attention, locations)
        if baseline is None:
            baseline = (model.describe(), record)
        energy = compare_runs(baseline[0], baseline[1], model.describe(), record, k, exact)
        rows.append([grid_name, label, repr(result.accuracy), repr(energy.nasar), repr(energy.r_ee),
                     repr(energy.delta_e), repr(report.final_loss)])
    return rows, baseline


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    train, test = build_dataset(cfg, "train"), build_dataset(cfg, "test")
    baseline, all_rows = None, []
    if args.grid in ("dimension", "both"):
        dims = [(d, d, None) for d in DIMENSION_GRID]
        rows, baseline = _ablate_rows(cfg, "dimension", dims, train, test)
        _write_csv(out / "ablate_dimension.csv", ABLATE_HEADER, rows)
        all_rows += rows
    if args.grid in ("location", "both"):
        locs = [(label, dim or "none", {dim: loc} if dim else None) for label, dim, loc in LOCATION_GRID]
        if baseline is not None:
            # vanilla already trained with identical seeds in the dimension grid
            vanilla = [r for r in all_rows if r[1] == "none"][0]
            rows, _ = _ablate_rows(cfg, "location", locs[1:], train, test, baseline)
            rows.insert(0, ["location", "vanilla"] + vanilla[2:])
        else:
            rows, _ = _ablate_rows(cfg, "location", locs, train, test)
        _write_csv(out / "ablate_location.csv", ABLATE_HEADER, rows)
        all_rows += rows
    _print_table(ABLATE_HEADER, all_rows)
    return 0


def cmd_profile_energy(cfg: RunConfig, out: Path, args) -> int:
    if args.checkpoint:
        model, cfg, _ = load_model(args.checkpoint, args.set)
    else:
        model = build_model(cfg)
    if args.baseline:
        vanilla, _, _ = load_model(args.baseline, args.set)
    else:
        vanilla = build_model(cfg, "none")
    test = build_dataset(cfg, "test")
    rec_v = average_spiking_response(vanilla, test).to_record()
    rec_a = average_spiking_response(model, test).to_record()
    report = compare_runs(vanilla.describe(), rec_v, model.describe(), rec_a, cfg.energy(),
                          cfg.get("energy", "exact_boundaries"))
    (out / "energy.csv").write_text(report.to_csv())
    print(report.table())
    return 0


def cmd_check_isometry(cfg: RunConfig, out: Path, args) -> int:
    iso = cfg.values["isometry"]
    rows = standard_checks(iso["n_samples"], cfg.seed, iso["epsilon"], iso["tolerance"])
    table = [[r.name, repr(r.measured), repr(r.reference), repr(r.rel_error), repr(r.tolerance),
              "pass" if r.passed else "fail"] for r in rows]
    header = ["component", "measured_phi", "reference_phi", "rel_error", "tolerance", "verdict"]
    _write_csv(out / "isometry.csv", header, table)
    _print_table(header, table)
    return 0 if all(r.passed for r in rows) else 1


def cmd_visualize(cfg: RunConfig, out: Path, args) -> int:
    if args.checkpoint:
        model, cfg, _ = load_model(args.checkpoint, args.set)
    else:
        model = build_model(cfg)
    test = build_dataset(cfg, "test")
    asr = average_spiking_response(model, test)
    n_layers = len(asr.counts)
    if not 0 <= args.layer < n_layers:
        raise ConfigError(f"--layer must lie in [0, {n_layers - 1}]")
    T = asr.counts[args.layer].shape[0]
    steps = range(T) if args.step is None else [args.step]
    if args.step is not None and not 0 <= args.step < T:
        raise ConfigError(f"--step must lie in [0, {T - 1}]")
    written = []
    for t in steps:
        path = out / f"asrv_layer{args.layer}_step{t}.ppm"
        write_ppm(tile_channels(layer_image(asr, args.layer, t), args.scale), path)
        written.append(path)
    with torch.no_grad():
        spikes = model(test.x[:1].transpose(0, 1)).spikes[args.layer][:, 0]
    if spikes.dim() == 4:
        path = out / f"sample0_layer{args.layer}.ppm"
        emit_heatmap(collapse_sample(spikes.numpy()), path, args.scale)
        written.append(path)
    for p in written:
        print(p)
    return 0


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate the synthetic moving-bar event dataset"),
    "train": (cmd_train, "train one network and save a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on the test split"),
    "ablate": (cmd_ablate, "train the attention dimension and location grids"),
    "profile-energy": (cmd_profile_energy, "energy and spiking-activity comparison against a vanilla net"),
    "check-isometry": (cmd_check_isometry, "Jacobian statistics against closed-form references"),
    "visualize": (cmd_visualize, "average spiking response heatmaps"),
}


def _print_table(header, rows) -> None:
    cells = [header] + [[_short(c) for c in r] for r in rows]
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())


def _short(v):
    try:
        return f"{float(v):.4g}"
    except ValueError:
        return v


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    common.add_argument("--out-dir", help="directory for every artifact (overrides run.out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="spikeattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("eval", "profile-energy", "visualize"):
            p.add_argument("--checkpoint", help="model checkpoint written by train")
        if name == "profile-energy":
            p.add_argument("--baseline", help="vanilla checkpoint (default: fresh init)")
        if name == "ablate":
            p.add_argument("--grid", choices=("dimension", "location", "both"), default="both")
        if name == "visualize":
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--step", type=int, default=None, help="default: every step")
            p.add_argument("--scale", type=int, default=4, help="pixels per neuron")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.out_dir is not None:
            overrides.append(f"run.out_dir={args.out_dir}")
        cfg = load_config(args.config, overrides).validate()
        out = Path(cfg.get("run", "out_dir"))
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command][0](cfg, out, args)
    except ConfigError as e:
        print(f"config error: {args.config or '<defaults>'}: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - any other failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
