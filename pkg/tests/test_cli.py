"""End-to-end command wiring: exit codes, precedence, idempotence."""

import hashlib
import json

import numpy as np
import pytest

from physloc import cli
from physloc import dataio as dio
from physloc.errors import NumericError


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    assert run(["synth", "--n", "30", "--seed", "11", "--out", str(root / "data")]) == 0
    assert run(["extract", "--manifest", str(root / "data/manifest.jsonl"),
                "--out", str(root / "data/sig.cache")]) == 0
    return root / "data"


TRAIN_FAST = ["--epochs", "2", "--batch-size", "8", "--lr", "1e-3",
              "--embed-dim", "16", "--max-len", "16", "--patch-grid", "4"]


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("clirun")
    rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
              "--cache", str(corpus / "sig.cache"),
              "--out", str(out / "full"), *TRAIN_FAST])
    assert rc == 0
    return out / "full"


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as ei:
            run([])
        assert ei.value.code == 1

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as ei:
            run(["synth", "--n", "5"])
        assert ei.value.code == 1

    def test_report_requires_logs(self, tmp_path):
        with pytest.raises(SystemExit) as ei:
            run(["report", "--out", str(tmp_path)])
        assert ei.value.code == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as ei:
            run(["deploy"])
        assert ei.value.code == 1


class TestSynth:
    def test_rerun_byte_identical(self, tmp_path):
        for name in ("one", "two"):
            assert run(["synth", "--n", "12", "--seed", "4",
                        "--out", str(tmp_path / name)]) == 0
        assert tree_digest(tmp_path / "one") == tree_digest(tmp_path / "two")

    def test_manifest_count(self, tmp_path):
        run(["synth", "--n", "12", "--seed", "4", "--out", str(tmp_path / "d")])
        assert len(dio.load_manifest(tmp_path / "d/manifest.jsonl")) == 12
        assert (tmp_path / "d/config.json").exists()


class TestExtract:
    def test_cache_counts_and_idempotence(self, corpus, tmp_path):
        a, b = tmp_path / "a.cache", tmp_path / "b.cache"
        for out in (a, b):
            assert run(["extract", "--manifest", str(corpus / "manifest.jsonl"),
                        "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        entries, cfg = dio.read_signature_cache(a)
        assert len(entries) == 30
        assert all(vec.shape == (cfg.total_dim,) for _, vec in entries)
        assert cfg.total_dim == 82

    def test_missing_image_names_id(self, corpus, tmp_path, capsys):
        samples = dio.load_manifest(corpus / "manifest.jsonl")
        victim = samples[3]
        (tmp_path / "images").mkdir()
        for s in samples:
            if s.id != victim.id:
                src = dio.resolve_image_path(corpus / "manifest.jsonl", s)
                (tmp_path / s.image).write_bytes(src.read_bytes())
        dio.write_manifest(tmp_path / "manifest.jsonl", samples)
        rc = run(["extract", "--manifest", str(tmp_path / "manifest.jsonl"),
                  "--out", str(tmp_path / "sig.cache")])
        assert rc == 2
        assert victim.id in capsys.readouterr().err


class TestTrain:
    def test_prints_stable_hash(self, corpus, tmp_path, capsys):
        lines = []
        for name in ("r1", "r2"):
            rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                      "--cache", str(corpus / "sig.cache"),
                      "--out", str(tmp_path / name), *TRAIN_FAST,
                      "--seed", "7"])
            assert rc == 0
            lines.append(capsys.readouterr().out.strip().split()[-1])
        assert lines[0] == lines[1]

    def test_lambda_flag_recorded(self, corpus, tmp_path):
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "zero"), *TRAIN_FAST,
                  "--lambda", "0"])
        assert rc == 0
        cfg = json.loads((tmp_path / "zero/config.json").read_text())
        assert cfg["lambda"] == 0.0

    def test_config_file_and_flag_precedence(self, corpus, tmp_path):
        cfg_file = tmp_path / "run.json"
        cfg_file.write_text(json.dumps({
            "epochs": 3, "batch_size": 8, "lr": 2e-3, "embed_dim": 16,
            "max_len": 16, "patch_grid": 4}))
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "run"),
                  "--config", str(cfg_file), "--epochs", "2"])
        assert rc == 0
        resolved = json.loads((tmp_path / "run/config.json").read_text())
        assert resolved["epochs"] == 2       # flag beat file
        assert resolved["lr"] == 2e-3        # file beat default
        assert resolved["batch_size"] == 8

    def test_echoed_config_is_refeedable(self, corpus, trained, tmp_path, capsys):
        capsys.readouterr()
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "again"),
                  "--config", str(trained / "config.json")])
        assert rc == 0
        assert ((tmp_path / "again/checkpoint.ckpt").read_bytes()
                == (trained / "checkpoint.ckpt").read_bytes())

    def test_unknown_config_key_rejected(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"learning_rate": 1e-3}))
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "x"), "--config", str(bad)])
        assert rc == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_numeric_failure_exits_three(self, corpus, tmp_path, monkeypatch, capsys):
        from physloc import training as tr_mod

        def explode(*a, **kw):
            raise NumericError("synthetic blowup")

        monkeypatch.setattr(tr_mod, "train", explode)
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "x"), *TRAIN_FAST])
        assert rc == 3
        assert "numeric" in capsys.readouterr().err


class TestEval:
    def test_table_and_json_agree(self, corpus, trained, tmp_path, capsys):
        rc = run(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                  "--manifest", str(corpus / "manifest.jsonl")])
        assert rc == 0
        table = capsys.readouterr().out
        rc = run(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                  "--manifest", str(corpus / "manifest.jsonl"),
                  "--format", "json", "--out", str(tmp_path / "rep.json")])
        assert rc == 0
        payload = json.loads((tmp_path / "rep.json").read_text())
        r1_table = next(line.split()[1] for line in table.splitlines()
                        if line.startswith("R@1"))
        assert float(r1_table) == pytest.approx(payload["r_at_1"], abs=5e-5)
        assert payload["checkpoint"] == str(trained / "checkpoint.ckpt")

    def test_holdout_region(self, corpus, trained, tmp_path):
        samples = dio.load_manifest(corpus / "manifest.jsonl")
        region = sorted({s.region for s in samples})[0]
        rc = run(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                  "--manifest", str(corpus / "manifest.jsonl"),
                  "--holdout", region, "--format", "json",
                  "--out", str(tmp_path / "rep.json")])
        assert rc == 0
        payload = json.loads((tmp_path / "rep.json").read_text())
        assert payload["region"] == region
        assert set(payload["per_region"]) == {region}

    def test_unknown_region_exits_two(self, corpus, trained, capsys):
        rc = run(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"),
                  "--manifest", str(corpus / "manifest.jsonl"),
                  "--holdout", "atlantis"])
        assert rc == 2
        assert capsys.readouterr().err


class TestReport:
    def test_comparison_artifacts(self, corpus, trained, tmp_path):
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "zero"), *TRAIN_FAST,
                  "--lambda", "0"])
        assert rc == 0
        rc = run(["report", str(trained / "metrics.jsonl"),
                  str(tmp_path / "zero/metrics.jsonl"),
                  "--out", str(tmp_path / "rpt")])
        assert rc == 0
        assert (tmp_path / "rpt/comparison.csv").exists()
        assert (tmp_path / "rpt/loss_total.png").exists()
        assert (tmp_path / "rpt/loss_components.png").exists()
        rows = (tmp_path / "rpt/comparison.csv").read_text().splitlines()
        assert len(rows) == 3  # header + two runs
        assert "zero" in rows[2]

    def test_mismatched_runs_flagged(self, corpus, trained, tmp_path):
        rc = run(["train", "--manifest", str(corpus / "manifest.jsonl"),
                  "--cache", str(corpus / "sig.cache"),
                  "--out", str(tmp_path / "wider"), *TRAIN_FAST[:-4],
                  "--embed-dim", "24", "--max-len", "16", "--patch-grid", "4"])
        assert rc == 0
        rc = run(["report", str(trained / "metrics.jsonl"),
                  str(tmp_path / "wider/metrics.jsonl"),
                  "--out", str(tmp_path / "rpt")])
        assert rc == 0
        rows = (tmp_path / "rpt/comparison.csv").read_text().splitlines()
        assert rows[1].endswith("False")
        assert rows[2].endswith("True")
