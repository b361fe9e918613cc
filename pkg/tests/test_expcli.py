"""Config parsing, summary CSV, presets and the command line."""

import csv
import json
from decimal import Decimal

import numpy as np
import pytest
import yaml

from curvlab import expcli
from curvlab.activations import parse_activation
from curvlab.errors import IoError, ParseError, ShapeMismatch, TruncatedFile, BadHeader, UnknownKey
from curvlab.expcli import (
    PRESETS,
    SUMMARY_COLUMNS,
    SummaryRow,
    build_splits,
    checkpoint_io,
    default_config,
    emit_config,
    parse_config,
    parse_config_text,
    read_csv_rows,
    run_preset,
    scaled_drops,
    summary_cells,
    with_overrides,
    write_summary_csv,
)
from curvlab.datasets import write_idx
from curvlab.models import Architecture, init_weights
from curvlab.trainer import GapReport


def _gap(train_rob=0.9227, test_rob=0.4721, best_rob=0.5031, train_std=0.95, test_std=0.8, best_std=0.81):
    return GapReport(
        robust_gap=train_rob - test_rob,
        standard_gap=train_std - test_std,
        best_val_rob_acc=0.5,
        best_epoch=3,
        overfit_gap=best_rob - test_rob,
        final_train_rob_acc=train_rob,
        final_test_rob_acc=test_rob,
        final_train_std_acc=train_std,
        final_test_std_acc=test_std,
        best_test_rob_acc=best_rob,
        best_test_std_acc=best_std,
    )


class TestConfig:
    @pytest.mark.parametrize("preset", PRESETS)
    def test_minimal_is_fully_defaulted(self, preset):
        cfg = parse_config_text(f"preset: {preset}\n")
        assert cfg.preset == preset
        full = yaml.safe_load(emit_config(cfg))
        assert set(full) == {"preset", "out_dir", "activation", "sweep", "widths", "seeds", "dataset", "model", "train", "hessian", "lemma1"}
        assert full["train"]["epochs"] == 60 and full["train"]["lr_drop_epochs"] == [30, 45]

    @pytest.mark.parametrize("preset", PRESETS)
    def test_round_trip(self, preset):
        cfg = default_config(preset)
        assert parse_config_text(emit_config(cfg)) == cfg

    def test_round_trip_customised(self):
        text = "preset: pswish_sweep\nseeds: [3]\ndataset:\n  source: synthetic\n  n: 300\ntrain:\n  epochs: 8\n  attack: {steps: 3}\n"
        cfg = parse_config_text(text)
        assert cfg.train.lr_drop_epochs == (4, 6)
        assert cfg.train.attack.steps == 3 and cfg.train.attack.epsilon == 0.08
        assert parse_config_text(emit_config(cfg)) == cfg

    def test_bad_activation(self):
        with pytest.raises(ParseError) as exc:
            parse_config_text("preset: activation_sweep\nactivation: swishy\n")
        assert exc.value.line == 2

    def test_bad_sweep_entry(self):
        with pytest.raises(ParseError) as exc:
            parse_config_text("preset: activation_sweep\nsweep:\n  - silu\n  - swishy\n")
        assert exc.value.line == 2

    @pytest.mark.parametrize(
        "text,line",
        [
            ("preset: activation_sweep\nbogus: 1\n", 2),
            ("preset: activation_sweep\ntrain:\n  epochs: 3\n  lr: 0.1\n", 4),
            ("preset: activation_sweep\ntrain:\n  attack:\n    radius: 0.1\n", 4),
            ("preset: activation_sweep\ndataset:\n  path: x\n", 3),
        ],
    )
    def test_unknown_key(self, text, line):
        with pytest.raises(UnknownKey) as exc:
            parse_config_text(text)
        assert exc.value.line == line

    @pytest.mark.parametrize(
        "text",
        [
            "preset: nope\n",
            "",
            "preset: [unclosed\n",
            "preset: activation_sweep\ndataset:\n  split: [0.5, 0.5, 0.5]\n",
            "preset: activation_sweep\ndataset:\n  source: idx\n  images: missing.idx\n  labels: missing.idx\n",
            "preset: activation_sweep\nseeds: []\n",
        ],
    )
    def test_parse_errors(self, text):
        with pytest.raises(ParseError):
            parse_config_text(text)

    def test_idx_paths_relative_to_config(self, tmp_path):
        write_idx(tmp_path / "img.idx", tmp_path / "lab.idx", np.zeros((4, 2, 2)), [0, 1, 0, 1])
        path = tmp_path / "cfg.yaml"
        path.write_text("preset: activation_sweep\ndataset:\n  source: idx\n  images: img.idx\n  labels: lab.idx\n  subset: null\n")
        cfg = parse_config(path)
        assert len(build_splits(cfg.dataset).train) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            parse_config(tmp_path / "absent.yaml")

    def test_scaled_drops(self):
        assert scaled_drops(60) == (30, 45)
        assert scaled_drops(200) == (100, 150)
        assert scaled_drops(1) == ()

    def test_overrides(self):
        cfg = default_config("activation_sweep")
        new = with_overrides(cfg, beta=2.0, epsilon=0.2, seed=7, out="x")
        assert new.activation == parse_activation("pswish:beta=2")
        assert new.sweep == ("pswish:beta=2",)
        assert new.train.attack.epsilon == 0.2 and new.train.attack.alpha == pytest.approx(0.05)
        assert new.seeds == (7,) and new.out_dir == "x"
        assert with_overrides(cfg, k=0.3).activation == parse_activation("leakyrelu:k=0.3")


class TestSummaryCsv:
    def test_table_row_verbatim(self, tmp_path):
        path = write_summary_csv([SummaryRow("lisht", _gap())], tmp_path / "s.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(SUMMARY_COLUMNS)
        assert lines[1].startswith("lisht,92.27,47.21,50.31,45.06,")

    def test_empty_key(self, tmp_path):
        with pytest.raises(ValueError):
            write_summary_csv([SummaryRow("", _gap())], tmp_path / "s.csv")

    def test_no_rows(self, tmp_path):
        with pytest.raises(ValueError):
            write_summary_csv([], tmp_path / "s.csv")

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(IoError):
            write_summary_csv([SummaryRow("a", _gap())], blocker / "s.csv")

    def test_diff_identity(self, rng):
        for _ in range(200):
            v = rng.uniform(size=6)
            cells = summary_cells(SummaryRow("k", _gap(*v)))
            for i in (1, 5):
                assert Decimal(cells[i + 3]) == Decimal(cells[i]) - Decimal(cells[i + 1])

    def test_extras(self, tmp_path):
        path = write_summary_csv([SummaryRow("a", _gap(), {"seed": 1}), SummaryRow("b", _gap(), {"width": 8})], tmp_path / "s.csv")
        rows = read_csv_rows(path)
        assert rows[0]["seed"] == "1" and rows[0]["width"] == ""
        assert rows[1]["width"] == "8"


class TestCheckpointIo:
    @pytest.fixture
    def state(self):
        m = init_weights(Architecture((3,), (4,), 2, parse_activation("lisht")), 0)
        m.params = m.params.astype(np.float32).astype(np.float64)
        return m

    def test_round_trip(self, tmp_path, state):
        checkpoint_io("save", tmp_path / "m.ckpt", state)
        assert checkpoint_io("load", tmp_path / "m.ckpt") == state

    def test_truncated(self, tmp_path, state):
        p = tmp_path / "m.ckpt"
        checkpoint_io("save", p, state)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises((BadHeader, TruncatedFile)):
            checkpoint_io("load", p)

    def test_spec_mismatch(self, tmp_path, state):
        checkpoint_io("save", tmp_path / "m.ckpt", state)
        other = Architecture((3,), (4,), 2, parse_activation("silu"))
        with pytest.raises(ShapeMismatch):
            checkpoint_io("load", tmp_path / "m.ckpt", expected=other)

    def test_bad_mode(self, tmp_path):
        with pytest.raises(ValueError):
            checkpoint_io("copy", tmp_path / "m.ckpt")


def _tiny(preset, out, **extra):
    text = (
        f"preset: {preset}\nout_dir: {out}\nseeds: [0]\n"
        "dataset: {source: synthetic, n: 120}\nmodel: {hidden: [8]}\n"
        "train: {epochs: 1, batch_size: 32, attack: {steps: 2}, eval_attack: {steps: 2}, eval_every: 1}\n"
    )
    for k, v in extra.items():
        text += f"{k}: {v}\n"
    return parse_config_text(text)


class TestPresets:
    def test_activation_sweep_smoke(self, tmp_path):
        cfg = _tiny("activation_sweep", tmp_path / "out")
        res = run_preset("activation_sweep", cfg)
        out = tmp_path / "out"
        assert not res["failures"]
        rows = read_csv_rows(out / "summary.csv")
        assert [r["sweep_key"] for r in rows] == ["lisht", "silu", "relu", "gelu", "mish"]
        for key in ("lisht", "silu", "relu", "gelu", "mish"):
            run = out / "runs" / key / "seed_0"
            assert {"metrics.csv", "best.ckpt", "final.ckpt"} <= {p.name for p in run.iterdir()}
        manifest = json.loads((out / "manifest.json").read_text())
        listed = {f["path"] for f in manifest["files"]}
        assert {"summary.csv", "summary_median.csv", "failures.csv", "config.yaml"} <= listed
        assert "runs/lisht/seed_0/metrics.csv" in listed

    def test_reproducible_from_emitted_config(self, tmp_path):
        cfg = _tiny("pswish_sweep", tmp_path / "a", sweep="['pswish:beta=0.5', 'pswish:beta=10']")
        run_preset("pswish_sweep", cfg)
        again = parse_config(tmp_path / "a" / "config.yaml")
        again = with_overrides(again, out=tmp_path / "b")
        run_preset("pswish_sweep", again)
        for name in ("summary.csv", "runs/pswish_beta0.5/seed_0/metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_pswish_schema(self, tmp_path):
        cfg = _tiny("pswish_sweep", tmp_path)
        run_preset("pswish_sweep", cfg)
        rows = read_csv_rows(tmp_path / "summary.csv")
        assert [r["sweep_key"] for r in rows] == [f"pswish:beta={b}" for b in ("0.5", "1", "2", "4", "10")]
        for r in rows:
            assert all(r[c] != "" for c in SUMMARY_COLUMNS + ["robust_gap", "standard_gap", "overfit_gap", "curvature"])

    def test_width_sweep_keys(self, tmp_path):
        cfg = _tiny("width_sweep", tmp_path, widths="[4, 6]")
        run_preset("width_sweep", cfg)
        assert [r["sweep_key"] for r in read_csv_rows(tmp_path / "summary.csv")] == ["width=4", "width=6"]

    def test_failed_point_recorded(self, tmp_path, monkeypatch):
        real = expcli.run_training

        def flaky(cfg, spec, seed, run_dir, width=None):
            if spec.kind == "mish":
                raise FloatingPointError("boom")
            return real(cfg, spec, seed, run_dir, width)

        monkeypatch.setattr(expcli, "run_training", flaky)
        res = run_preset("activation_sweep", _tiny("activation_sweep", tmp_path))
        assert [f[0] for f in res["failures"]] == ["mish"]
        assert len(read_csv_rows(tmp_path / "summary.csv")) == 4
        assert read_csv_rows(tmp_path / "failures.csv")[0]["sweep_key"] == "mish"

    def test_hessian_report(self, tmp_path):
        cfg = _tiny("hessian_report", tmp_path, hessian="{n_examples: 3}")
        res = run_preset("hessian_report", cfg)
        assert not res["failures"]
        rows = read_csv_rows(tmp_path / "hessian_summary.csv")
        assert [r["sweep_key"] for r in rows] == ["lisht", "silu"]
        assert all(int(r["count"]) == 3 for r in rows)
        assert (tmp_path / "runs" / "lisht" / "seed_0" / "eigs.csv").exists()

    def test_lemma1_verify(self, tmp_path):
        cfg = parse_config_text(f"preset: lemma1_verify\nout_dir: {tmp_path}\nlemma1: {{trials: 10}}\n")
        res = run_preset("lemma1_verify", cfg)
        assert res["passed"] == res["total"] == 11
        with (tmp_path / "lemma1.csv").open() as fh:
            assert len(list(csv.reader(fh))) == 12


class TestMain:
    def test_curvature(self, tmp_path, capsys):
        assert expcli.main(["curvature", "--activation", "lisht", "--out", str(tmp_path)]) == 0
        assert "curvature 2" in capsys.readouterr().out
        assert (tmp_path / "curvature.csv").exists()

    def test_beta_override(self, tmp_path, capsys):
        assert expcli.main(["curvature", "--beta", "4", "--out", str(tmp_path)]) == 0
        assert "pswish:beta=4" in capsys.readouterr().out

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text("preset: activation_sweep\nactivation: swishy\n")
        assert expcli.main(["train", "--config", str(path)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_train_and_attack(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text(emit_config(_tiny("activation_sweep", tmp_path / "run")))
        assert expcli.main(["train", "--config", str(path), "--activation", "silu"]) == 0
        assert (tmp_path / "run" / "final.ckpt").exists()
        code = expcli.main(["attack", "--config", str(path), "--activation", "silu", "--checkpoint", str(tmp_path / "run" / "final.ckpt")])
        assert code == 0
        rows = read_csv_rows(tmp_path / "run" / "attack.csv")
        assert [r["attack"] for r in rows] == ["clean", "pgd-2x1", "fgsm"]

    def test_lemma1_cli(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(f"preset: lemma1_verify\nout_dir: {tmp_path}\nlemma1: {{trials: 3}}\n")
        assert expcli.main(["lemma1-verify", "--config", str(path)]) == 0
