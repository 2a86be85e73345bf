import csv
import json
import os
from pathlib import Path

import pytest

from spikeattn.cli import DIMENSION_GRID, LOCATION_GRID, main
from spikeattn.config import SCHEMA, Seeds, dump_config, load_config, parse_config
from spikeattn.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
TINY = ["--set", "data.samples_per_class=2", "--set", "data.test_samples_per_class=1", "--set", "data.width=16",
        "--set", "data.height=16", "--set", "model.T=4", "--set", "model.channels=4,4",
        "--set", "model.pools=2,2", "--set", "train.epochs=1", "--set", "model.sa_kernel=3", "--quiet"]


def same_but_out_dir(x, y):
    diff = set(x.splitlines()) ^ set(y.splitlines())
    return all(line.startswith("out_dir") for line in diff)


def files_under(path):
    return sorted(str(p.relative_to(path)) for p in Path(path).rglob("*") if p.is_file())


class TestConfig:
    def test_defaults_valid(self):
        cfg = load_config().validate()
        assert cfg.net().T == 16 and cfg.energy().e_mac == 4.6

    def test_shipped_config(self):
        cfg = load_config(ROOT / "configs" / "trend.ini").validate()
        assert cfg.get("lif", "surrogate_width") == 0.5

    def test_types_and_comments(self):
        cfg = parse_config("[model]\nchannels = 4, 8  # two layers\npools=1,2\n[data]\ndt_ms = 1/2\n"
                           "[energy]\nexact_boundaries = yes\n")
        assert cfg.get("model", "channels") == (4, 8)
        assert str(cfg.get("data", "dt_ms")) == "1/2"
        assert cfg.get("energy", "exact_boundaries") is True

    @pytest.mark.parametrize("text,line", [
        ("[model]\nT = 4\nbeta = 1\n", 3),
        ("[model]\n\nT = four\n", 3),
        ("[nope]\nx = 1\n", 1),
        ("T = 4\n", 1),
        ("[train]\nepochs = 2\nepochs = 3\n", 3),
        ("[lif]\nbeta = 1.5\n", 2),
        ("[model]\nta_location = ActivatePRE\n", 2),
        ("[model]\nattention = QA\n", 2),
        ("[data]\nn_classes = 9\n", 2),
        ("[lif]\nsurrogate = gaussian\n", 2),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(ConfigError) as exc:
            parse_config(text).validate()
        assert exc.value.line == line
        assert str(exc.value).startswith(f"line {line}: ")

    def test_overrides_win(self):
        cfg = parse_config("[train]\nepochs = 2\n", overrides=["train.epochs=7"])
        assert cfg.get("train", "epochs") == 7

    @pytest.mark.parametrize("bad", ["epochs=3", "train.nope=1", "train.epochs"])
    def test_bad_override(self, bad):
        with pytest.raises(ConfigError):
            parse_config("", overrides=[bad])

    def test_dump_roundtrip(self):
        cfg = parse_config("[model]\nchannels=4,8\npools=1,1\n")
        assert parse_config(dump_config(cfg)).values == cfg.values

    def test_seed_split(self):
        a, b = Seeds.split(1), Seeds.split(1)
        assert a == b
        assert len({a.data_train, a.data_test, a.init, a.shuffle, a.probe}) == 5
        assert Seeds.split(2) != a

    def test_schema_sections(self):
        assert set(SCHEMA) == {"run", "data", "model", "lif", "train", "energy", "isometry"}


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_no_subcommand(self):
        assert main([]) == 2

    def test_invalid_config(self, tmp_path, capsys):
        p = tmp_path / "bad.ini"
        p.write_text("[model]\nT = 4\nsa_kernel = 4\n")
        assert main(["train", "--config", str(p), "--out-dir", str(tmp_path / "o"), "--quiet"]) == 3
        assert "line 3" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.ini"), "--out-dir", str(tmp_path)]) == 3

    def test_runtime_failure(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out-dir", str(tmp_path),
                     "--quiet"]) == 1


class TestCommands:
    def test_train_deterministic_and_eval_reproduces(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--seed", "7", "--out-dir", str(a)] + TINY) == 0
        assert main(["train", "--seed", "7", "--out-dir", str(b)] + TINY) == 0
        assert files_under(a) == files_under(b) == ["config.ini", "model.ckpt", "model.ckpt.json",
                                                    "train_report.csv"]
        for name in ["model.ckpt", "train_report.csv"]:
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert same_but_out_dir((a / "config.ini").read_text(), (b / "config.ini").read_text())
        ma, mb = (json.loads((d / "model.ckpt.json").read_text()) for d in (a, b))
        assert same_but_out_dir(ma["meta"].pop("config"), mb["meta"].pop("config"))
        assert ma == mb
        train_line = capsys.readouterr().out.strip().splitlines()[-1]
        assert main(["eval", "--checkpoint", str(a / "model.ckpt"), "--out-dir", str(tmp_path / "e"),
                     "--quiet"]) == 0
        eval_line = capsys.readouterr().out.strip()
        assert train_line.split()[2] == eval_line.split()[0]

    def test_different_seed_changes_result(self, tmp_path):
        main(["train", "--seed", "1", "--out-dir", str(tmp_path / "a")] + TINY)
        main(["train", "--seed", "2", "--out-dir", str(tmp_path / "b")] + TINY)
        assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "b" / "model.ckpt").read_bytes()

    def test_ablate_grids(self, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--out-dir", str(out)] + TINY) == 0
        with open(out / "ablate_dimension.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == list(DIMENSION_GRID)
        assert len(rows) == 8
        assert float(rows[0]["r_ee"]) == 1.0
        with open(out / "ablate_location.csv") as fh:
            loc = list(csv.DictReader(fh))
        assert [r["variant"] for r in loc] == [g[0] for g in LOCATION_GRID]
        assert loc[0]["accuracy"] == rows[0]["accuracy"]

    def test_profile_energy(self, tmp_path, capsys):
        assert main(["profile-energy", "--out-dir", str(tmp_path)] + TINY) == 0
        text = (tmp_path / "energy.csv").read_text()
        assert "r_ee" in text and "delta_mac1" in text
        assert "r_ee" in capsys.readouterr().out

    def test_visualize(self, tmp_path):
        assert main(["visualize", "--out-dir", str(tmp_path), "--layer", "1", "--step", "2"] + TINY) == 0
        assert files_under(tmp_path) == ["asrv_layer1_step2.ppm", "sample0_layer1.ppm"]
        assert (tmp_path / "asrv_layer1_step2.ppm").read_bytes().startswith(b"P6\n")

    def test_visualize_bad_layer(self, tmp_path):
        assert main(["visualize", "--out-dir", str(tmp_path), "--layer", "9"] + TINY) == 3

    def test_synth_data(self, tmp_path):
        assert main(["synth-data", "--out-dir", str(tmp_path)] + TINY) == 0
        with open(tmp_path / "data" / "train" / "labels.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 2 * 4

    def test_check_isometry(self, tmp_path, capsys):
        code = main(["check-isometry", "--out-dir", str(tmp_path), "--set", "isometry.n_samples=40", "--quiet"])
        assert code == 0
        out = capsys.readouterr().out
        assert "csa_block" in out and "fail" not in out

    def test_writes_only_under_out_dir(self, tmp_path, monkeypatch):
        work = tmp_path / "cwd"
        work.mkdir()
        monkeypatch.chdir(work)
        out = tmp_path / "out"
        main(["train", "--out-dir", str(out)] + TINY)
        main(["visualize", "--out-dir", str(out), "--checkpoint", str(out / "model.ckpt"), "--step", "0"] + TINY)
        assert os.listdir(work) == []
        assert len(files_under(out)) == 6
