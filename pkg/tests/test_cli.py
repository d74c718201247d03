import csv
import json
import math
import os

import pytest
import torch

from tdrl import read_checkpoint, read_dataset, read_summary
from tdrl.cli import main

TOY_GENERATOR = {
    "n": 3,
    "lags": 1,
    "length": 6,
    "num_seqs": 40,
    "burn_in": 10,
    "hidden": 8,
}
TINY_TRAINING = {
    "model": {"enc_dec_width": 16, "flow_width": 8},
    "train": {"batch": 16, "max_epochs": 2, "patience": 1, "val_fraction": 0.25},
    "eval": {"path_multiplier": 2.0, "hidden": 4},
}


@pytest.fixture(autouse=True)
def restore_torch_state():
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)


def write_config(tmpdir, name, document):
    path = tmpdir.join(name)
    path.write(json.dumps(document))
    return str(path)


def generator_config(tmpdir, family="heteronoise_fixed", **overrides):
    generator = dict(TOY_GENERATOR, family=family, **overrides)
    if family == "modular":
        generator.update(num_seqs=20, num_domains=3, partition=[1, 1, 1])
    return write_config(tmpdir, f"{family}.json", {"generator": generator})


def generate(tmpdir, family="heteronoise_fixed", name="data", **overrides):
    out = str(tmpdir.join(name))
    config = generator_config(tmpdir, family, **overrides)
    assert main(["gen", "--config", config, "--out", out, "--deterministic"]) == 0
    return out


class TestGen:
    def test_byte_identical(self, tmpdir):
        config = generator_config(tmpdir)
        outs = [str(tmpdir.join(name)) for name in ("a", "b")]
        for out in outs:
            argv = ["gen", "--config", config, "--out", out, "--deterministic"]
            assert main(argv) == 0
        assert sorted(os.listdir(outs[0])) == [
            "manifest.json",
            "payload.bin",
            "run.json",
        ]
        for filename in os.listdir(outs[0]):
            with open(os.path.join(outs[0], filename), "rb") as a:
                with open(os.path.join(outs[1], filename), "rb") as b:
                    assert a.read() == b.read(), filename

    def test_run_manifest(self, tmpdir):
        out = generate(tmpdir)
        with open(os.path.join(out, "run.json")) as f:
            record = json.load(f)
        assert record["command"][:2] == ["tdrl", "gen"]
        assert "--out" not in record["command"]
        assert record["seeds"]["generator"] == 0
        assert record["config"]["generator"]["family"] == "heteronoise_fixed"
        assert record["input_hash"] is not None

    def test_seed_flag(self, tmpdir):
        config = generator_config(tmpdir)
        out = str(tmpdir.join("seeded"))
        assert main(["gen", "--config", config, "--out", out, "--seed", "3"]) == 0
        assert read_dataset(out).spec.seed == 3

    def test_modular_shapes(self, tmpdir):
        dataset = read_dataset(generate(tmpdir, "modular"))
        assert dataset.x.shape == (60, 6, 3)
        assert sorted(set(dataset.domains.tolist())) == [0, 1, 2]

    def test_missing_family(self, tmpdir, capsys):
        config = write_config(tmpdir, "bad.json", {"generator": {"n": 3}})
        out = str(tmpdir.join("out"))
        assert main(["gen", "--config", config, "--out", out]) == 2
        assert "generator.family" in capsys.readouterr().err

    def test_missing_generator(self, tmpdir):
        assert main(["gen", "--out", str(tmpdir.join("out"))]) == 2

    def test_invalid_json(self, tmpdir):
        path = tmpdir.join("broken.json")
        path.write("{")
        assert main(["gen", "--config", str(path), "--out", str(tmpdir)]) == 2

    def test_invalid_thread_cap(self, tmpdir, monkeypatch, capsys):
        monkeypatch.setenv("TDRL_THREADS", "many")
        config, out = generator_config(tmpdir), tmpdir.join("out")
        assert main(["gen", "--config", config, "--out", str(out)]) == 2
        assert "TDRL_THREADS" in capsys.readouterr().err
        assert not out.check()


def train_run(tmpdir, data, name="run", extra=None):
    document = dict(TINY_TRAINING)
    document.update(extra or {})
    config = write_config(tmpdir, f"{name}.json", document)
    out = str(tmpdir.join(name))
    code = main(["train", "--data", data, "--config", config, "--out", out])
    return code, out


class TestTrain:
    def test_artifacts(self, tmpdir, capsys):
        code, out = train_run(tmpdir, generate(tmpdir))
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "epoch,recon,kld,total"
        assert len(lines) >= 2
        with open(os.path.join(out, "history.csv")) as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == "epoch"
        assert 2 <= len(rows) <= 3
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert float(summary["beta"]) == 0.002
        assert summary["stop_reason"] in ("max_epochs", "early_stopping")
        checkpoint = read_checkpoint(os.path.join(out, "checkpoint"))
        assert checkpoint.beta == 0.002

    def test_beta_grid(self, tmpdir):
        grid = dict(TINY_TRAINING["train"], beta_grid=[0.01, 0.1], max_epochs=1)
        code, out = train_run(tmpdir, generate(tmpdir), extra={"train": grid})
        assert code == 0
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert float(summary["beta"]) in (0.01, 0.1)
        assert "val_total@beta=0.01" in summary
        assert "val_total@beta=0.1" in summary

    def test_dataset_fields_rejected(self, tmpdir):
        extra = {"model": {"partition": [1, 1, 1]}}
        code, _ = train_run(tmpdir, generate(tmpdir), extra=extra)
        assert code == 2

    def test_corrupt_dataset(self, tmpdir):
        data = generate(tmpdir)
        payload = os.path.join(data, "payload.bin")
        with open(payload, "r+b") as f:
            f.seek(200)
            byte = f.read(1)
            f.seek(200)
            f.write(bytes([byte[0] ^ 0xFF]))
        code, _ = train_run(tmpdir, data)
        assert code == 3

    def test_missing_dataset(self, tmpdir):
        code, _ = train_run(tmpdir, str(tmpdir.join("nothing")))
        assert code == 3


def evaluate(tmpdir, data, name, *extra):
    config = write_config(tmpdir, "eval.json", TINY_TRAINING)
    out = str(tmpdir.join(name))
    argv = ["eval", "--data", data, "--config", config, "--out", out]
    return main(argv + list(extra) + ["--deterministic"]), out


class TestEval:
    def test_oracle(self, tmpdir):
        code, out = evaluate(tmpdir, generate(tmpdir), "oracle", "--oracle")
        assert code == 0
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert list(summary)[:4] == ["mcc", "mode", "mcc_pearson", "assignment"]
        assert float(summary["mcc"]) == pytest.approx(1.0)
        assert summary["assignment"] == "0 1 2"
        assert "skeleton_edges" in summary
        assert 0.0 <= float(summary["f1"]) <= 1.0
        for name in ("corr.csv", "scatter.png", "skeleton_scores.csv", "run.json"):
            assert os.path.isfile(os.path.join(out, name))
        assert not os.path.exists(os.path.join(out, "change_factors.csv"))

    def test_repeatable(self, tmpdir):
        data = generate(tmpdir)
        outs = [evaluate(tmpdir, data, name, "--oracle")[1] for name in ("a", "b")]
        for name in ("summary.txt", "corr.csv", "skeleton_scores.csv", "run.json"):
            with open(os.path.join(outs[0], name)) as a:
                with open(os.path.join(outs[1], name)) as b:
                    assert a.read() == b.read(), name

    def test_checkpoint(self, tmpdir):
        data = generate(tmpdir)
        _, run = train_run(tmpdir, data)
        code, out = evaluate(
            tmpdir, data, "eval", "--checkpoint", os.path.join(run, "checkpoint")
        )
        assert code == 0
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert 0.0 <= float(summary["mcc"]) <= 1.0
        # ten held-out sequences are too few for the skeleton recovery
        assert math.isnan(float(summary["f1"]))
        with open(os.path.join(out, "change_factors.csv")) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["theta_dyn_0", "theta_dyn_1", "theta_obs_0", "theta_obs_1"]
        assert len(rows) == 2

    def test_needs_checkpoint_or_oracle(self, tmpdir):
        code, _ = evaluate(tmpdir, generate(tmpdir), "eval")
        assert code == 2


class TestCheck:
    def check(self, tmpdir, capsys, *argv):
        config = write_config(
            tmpdir, "check.json", {"check": {"num_prev": 32, "num_current": 2}}
        )
        out = str(tmpdir.join("check"))
        code = main(["check", "--out", out, "--config", config] + list(argv))
        return code, out, capsys.readouterr().out

    def test_gaussian_additive_dataset(self, tmpdir, capsys):
        data = generate(tmpdir, "gaussian_additive")
        code, out, stdout = self.check(tmpdir, capsys, "--data", data)
        assert code == 0
        assert stdout.startswith("verdict: dependent")
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert summary["verdict"] == "dependent"
        assert summary["all_zero_rows"] == "False"
        assert os.path.isfile(os.path.join(out, "condition_rows.csv"))

    def test_heteronoise_generator(self, tmpdir, capsys):
        generator = dict(TOY_GENERATOR, family="heteronoise_fixed")
        config = {"generator": generator, "check": {"num_prev": 32, "num_current": 2}}
        path = write_config(tmpdir, "hetero.json", config)
        out = str(tmpdir.join("check"))
        assert main(["check", "--config", path, "--out", out]) == 0
        assert capsys.readouterr().out.startswith("verdict: independent")

    def test_iid_generator(self, tmpdir, capsys):
        config = {"generator": dict(TOY_GENERATOR, family="iid")}
        path = write_config(tmpdir, "iid.json", config)
        out = str(tmpdir.join("check"))
        assert main(["check", "--config", path, "--out", out]) == 0
        summary = read_summary(os.path.join(out, "summary.txt"))
        assert summary["verdict"] == "dependent"
        assert summary["all_zero_rows"] == "True"

    def test_nothing_to_check(self, tmpdir, capsys):
        code, _, _ = self.check(tmpdir, capsys)
        assert code == 2


class TestReport:
    def test_report(self, tmpdir):
        data = generate(tmpdir)
        for name in ("e1", "e2"):
            assert evaluate(tmpdir, data, name, "--oracle")[0] == 0
        out = str(tmpdir.join("report.csv"))
        dirs = [str(tmpdir.join("e1")), str(tmpdir.join("e2"))]
        assert main(["report"] + dirs + ["--out", out]) == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert [row["source"] for row in rows] == dirs
        assert all(float(row["mcc"]) == pytest.approx(1.0) for row in rows)

    def test_no_summaries(self, tmpdir):
        empty = tmpdir.mkdir("empty")
        out = str(tmpdir.join("report.csv"))
        assert main(["report", str(empty), "--out", out]) == 3
