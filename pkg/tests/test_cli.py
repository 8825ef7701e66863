import argparse
import json
import logging
import runpy
import sys

import pytest

from robustface.cli.config import DEFAULT_CONFIG, apply_overrides, get_config, resolve_mode
from robustface.cli.main import THREAD_VARIABLES, main
from robustface.cli.parser import budget
from robustface.errors import ConfigError

RUN_CONFIG = {
    "dataset": {"val_fraction": 0.5},
    "model": {"hidden_dims": [12], "embed_dim": 6, "project_dim": 4},
    "train": {"batch_size": 8, "triplets_per_epoch": 16},
    "attack": {"iterations": 2},
}


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch):
    for name in THREAD_VARIABLES:
        monkeypatch.setenv(name, "1")
    yield
    logger = logging.getLogger("robustface")
    for handler in list(logger.handlers):
        if getattr(handler, "_robustface", False):
            logger.removeHandler(handler)


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--out", str(out), "--identities", "4", "--images-per-identity", "4",
                 "--height", "6", "--width", "6", "--seed", "3", "-q"]) == 0
    return out


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(RUN_CONFIG), encoding="utf-8")
    return path


def train(config_path, data_dir, out, mode="standard", *extra):
    return main(["train", mode, "--config", str(config_path), "--data", str(data_dir / "manifest.csv"),
                 "--out", str(out), "--epochs", "1", "-q", *extra])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults(self):
        assert get_config() == DEFAULT_CONFIG
        assert get_config() is not DEFAULT_CONFIG

    def test_unknown_key_names_its_pointer(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"bogus": 1}}', encoding="utf-8")
        with pytest.raises(ConfigError, match="/train/bogus"):
            get_config(str(path))

    def test_type_errors(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"attack": {"iterations": "seven"}}', encoding="utf-8")
        with pytest.raises(ConfigError, match="/attack/iterations"):
            get_config(str(path))

    def test_integer_accepted_for_float(self):
        assert apply_overrides(get_config(), {"/attack/epsilon": 0})["attack"]["epsilon"] == 0

    def test_overrides_skip_none(self):
        cfg = apply_overrides(get_config(), {"/seed": None, "/train/epochs": 4})
        assert cfg["seed"] == 0 and cfg["train"]["epochs"] == 4

    def test_mode_defaults_are_materialized(self):
        cfg = resolve_mode(get_config(), "pretrain-semi")
        assert cfg["mode"] == "pretrain-semi"
        assert cfg["train"]["epochs"] == 50 and cfg["train"]["label_fraction"] == 0.1
        explicit = resolve_mode(apply_overrides(get_config(), {"/train/epochs": 3}), "finetune")
        assert explicit["train"]["epochs"] == 3 and explicit["train"]["learning_rate"] == 0.01

    def test_budget_parsing(self):
        assert budget("8/255") == pytest.approx(8 / 255)
        assert budget("0") == 0.0
        with pytest.raises(argparse.ArgumentTypeError):
            budget("-1")
        with pytest.raises(argparse.ArgumentTypeError):
            budget("eight")


class TestSynth:
    def test_default_counts(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "-q"]) == 0
        rows = (tmp_path / "d" / "manifest.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0] == "path,identity"
        assert len(rows) == 201
        assert len({row.split(",")[1] for row in rows[1:]}) == 20
        assert len(list((tmp_path / "d" / "images").iterdir())) == 200

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--identities", "3", "--seed", "5", "-q"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_single_identity_refused(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--identities", "1", "-q"]) == 1

    def test_non_empty_directory_needs_force(self, data_dir):
        args = ["synth", "--out", str(data_dir), "--identities", "2", "-q"]
        assert main(args) == 1
        assert main(args + ["--force"]) == 0


class TestTrain:
    def test_one_epoch_run_directory(self, config_path, data_dir, tmp_path):
        out = tmp_path / "run"
        assert train(config_path, data_dir, out) == 0
        log = (out / "log.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(log) == 1 and json.loads(log[0])["epoch"] == 1
        assert sorted(p.name for p in out.glob("*.ckpt")) == ["epoch_00001.ckpt"]
        assert not (out / ".lock").exists()
        persisted = json.loads((out / "config.json").read_text(encoding="utf-8"))
        assert persisted["mode"] == "standard"
        assert persisted["model"]["input_dim"] == 36
        assert persisted["train"]["learning_rate"] == 0.05
        index = json.loads((out / "run_index.json").read_text(encoding="utf-8"))
        assert set(index["files"]) == {"config.json", "log.jsonl", "epoch_00001.ckpt"}

    def test_identical_invocations_reproduce_the_run(self, config_path, data_dir, tmp_path):
        out = tmp_path / "run"
        assert train(config_path, data_dir, out) == 0
        first = (out / "run_index.json").read_bytes()
        ckpt = (out / "epoch_00001.ckpt").read_bytes()
        assert train(config_path, data_dir, out) == 0
        assert (out / "run_index.json").read_bytes() == first
        assert (out / "epoch_00001.ckpt").read_bytes() == ckpt

    def test_finetune_requires_init(self, config_path, data_dir, tmp_path):
        assert train(config_path, data_dir, tmp_path / "run", "finetune") == 1

    def test_finetune_from_standard_checkpoint(self, config_path, data_dir, tmp_path):
        assert train(config_path, data_dir, tmp_path / "std") == 0
        init = tmp_path / "std" / "epoch_00001.ckpt"
        assert train(config_path, data_dir, tmp_path / "ft", "finetune", "--init", str(init)) == 0
        assert (tmp_path / "ft" / "epoch_00001.ckpt").exists()

    def test_resume_matches_uninterrupted_run(self, config_path, data_dir, tmp_path):
        assert train(config_path, data_dir, tmp_path / "full", "standard", "--epochs", "2") == 0
        assert train(config_path, data_dir, tmp_path / "split") == 0
        init = tmp_path / "split" / "epoch_00001.ckpt"
        assert train(config_path, data_dir, tmp_path / "split", "standard", "--init", str(init),
                     "--resume", "--epochs", "2") == 0
        assert len((tmp_path / "split" / "log.jsonl").read_text(encoding="utf-8").splitlines()) == 2
        assert (tmp_path / "split" / "epoch_00002.ckpt").read_bytes() == (
            tmp_path / "full" / "epoch_00002.ckpt").read_bytes()

    def test_pretrain(self, config_path, data_dir, tmp_path):
        assert train(config_path, data_dir, tmp_path / "pre", "pretrain-semi") == 0
        persisted = json.loads((tmp_path / "pre" / "config.json").read_text(encoding="utf-8"))
        assert persisted["train"]["label_fraction"] == 0.1

    def test_bad_config_is_a_usage_error(self, data_dir, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"train": {"bogus": 1}}', encoding="utf-8")
        assert train(path, data_dir, tmp_path / "run") == 1
        assert "/train/bogus" in capsys.readouterr().err

    def test_locked_run_directory(self, config_path, data_dir, tmp_path):
        (tmp_path / "run").mkdir()
        (tmp_path / "run" / ".lock").write_text("1", encoding="utf-8")
        assert train(config_path, data_dir, tmp_path / "run") == 1

    def test_missing_manifest_is_a_data_error(self, config_path, tmp_path):
        assert train(config_path, tmp_path / "nowhere", tmp_path / "run") == 2


@pytest.fixture
def checkpoint(config_path, data_dir, tmp_path):
    assert train(config_path, data_dir, tmp_path / "std") == 0
    return tmp_path / "std" / "epoch_00001.ckpt"


def evaluate(checkpoint, config_path, data_dir, out, *extra):
    return main(["evaluate", str(checkpoint), "--config", str(config_path), "--data", str(data_dir / "manifest.csv"),
                 "--triplets", "30", "--out", str(out), "-q", *extra])


class TestEvaluate:
    def test_zero_budget(self, checkpoint, config_path, data_dir, tmp_path, capsys):
        assert evaluate(checkpoint, config_path, data_dir, tmp_path / "m", "--epsilon", "0") == 0
        table = capsys.readouterr().out.splitlines()
        assert [line.split()[0] for line in table] == ["SA", "RA", "SA&RA"]
        metrics = json.loads((tmp_path / "m" / "metrics.json").read_text(encoding="utf-8"))
        assert metrics["ra"] == 1.0
        assert metrics["n_triplets"] == 30 and metrics["split"] == "val"

    def test_same_inputs_same_json(self, checkpoint, config_path, data_dir, tmp_path):
        for name in ("a", "b"):
            assert evaluate(checkpoint, config_path, data_dir, tmp_path / name, "--epsilon", "8/255") == 0
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    def test_sweep_and_fgsm(self, checkpoint, config_path, data_dir, tmp_path, capsys):
        assert evaluate(checkpoint, config_path, data_dir, tmp_path / "m", "--sweep", "0", "4/255", "--fgsm") == 0
        metrics = json.loads((tmp_path / "m" / "metrics.json").read_text(encoding="utf-8"))
        assert [r["attack"]["iterations"] for r in metrics["sweep"]] == [0, 1]
        assert all("fgsm" in r["tags"] for r in metrics["sweep"])
        assert capsys.readouterr().out.splitlines()[0].split() == ["epsilon", "SA", "RA", "SA&RA"]

    def test_transfer(self, checkpoint, config_path, data_dir, tmp_path):
        assert evaluate(checkpoint, config_path, data_dir, tmp_path / "m", "--transfer-from", str(checkpoint),
                        "--variant", "attacked_anchor") == 0
        metrics = json.loads((tmp_path / "m" / "metrics.json").read_text(encoding="utf-8"))
        assert metrics["tags"] == ["attacked_anchor", "transfer"]

    def test_incompatible_dataset(self, checkpoint, config_path, tmp_path):
        other = tmp_path / "other"
        assert main(["synth", "--out", str(other), "--identities", "3", "--height", "5", "--width", "5", "-q"]) == 0
        assert evaluate(checkpoint, config_path, other, tmp_path / "m") == 2

    def test_corrupted_checkpoint(self, checkpoint, config_path, data_dir, tmp_path):
        data = bytearray(checkpoint.read_bytes())
        data[40] ^= 0xFF
        checkpoint.write_bytes(bytes(data))
        assert evaluate(checkpoint, config_path, data_dir, tmp_path / "m") == 2


def attack(checkpoint, data_dir, out, *extra):
    return main(["attack", str(checkpoint), "--data", str(data_dir / "manifest.csv"), "--out", str(out),
                 "--batch-size", "5", "-q", *extra])


class TestAttack:
    def test_zero_budget_copies_images(self, checkpoint, data_dir, tmp_path):
        out = tmp_path / "adv"
        assert attack(checkpoint, data_dir, out, "--epsilon", "0") == 0
        for source in (data_dir / "images").iterdir():
            adv = out / "images" / f"{source.stem}.adv.pgm"
            assert adv.read_bytes() == source.read_bytes()
        audit = json.loads((out / "audit.json").read_text(encoding="utf-8"))
        assert audit["max_abs_delta"] == 0.0
        assert len(audit["images"]) == 16

    def test_audit_bounds(self, checkpoint, data_dir, tmp_path):
        out = tmp_path / "adv"
        assert attack(checkpoint, data_dir, out, "--epsilon", "8/255", "--iterations", "3") == 0
        audit = json.loads((out / "audit.json").read_text(encoding="utf-8"))
        assert all(r["max_abs_delta"] <= 8 / 255 + 1e-7 for r in audit["images"])
        assert all(r["quantization_error"] <= 1 / 255 for r in audit["images"])
        rows = (out / "manifest.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0] == "path,identity" and len(rows) == 17


def test_no_subcommand():
    assert main([]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "bogus-mode", "-q"],
        ["train", "standard", "--epsilon", "8/zero"],
        ["train", "standard", "--epsilon", "-1"],
        ["evaluate"],
        ["attack", "model.ckpt", "--batch-size", "many"],
        ["no-such-command"],
    ],
)
def test_argument_errors_exit_with_usage_status(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert "usage: robustface" in err
    assert "error:" in err


def test_help_exits_cleanly(capsys):
    assert main(["train", "--help"]) == 0
    assert "pretrain-semi" in capsys.readouterr().out


def test_module_entry_point_exits_with_main_status(monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", ["robustface", "train", "bogus-mode"])
    with pytest.raises(SystemExit) as excinfo:
        runpy.run_module("robustface", run_name="__main__")
    assert excinfo.value.code == 1
    assert "usage: robustface" in capsys.readouterr().err
