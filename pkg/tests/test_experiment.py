"""Experiment orchestration: artifacts, determinism, failure isolation."""

import json
from pathlib import Path

import numpy as np
import pytest

from warpseg import data as datamod
from warpseg import experiment as expmod
from warpseg import train as trainmod
from warpseg.config import Config, DataConfig, ExperimentConfig
from warpseg.data import PhantomConfig
from warpseg.experiment import ensure_dataset, load_cases, run_experiment
from warpseg.nets import net_from_checkpoint
from warpseg.train import RunLog, TrainConfig


def tiny_config(data_dir, modes=("plain", "stn1"), seeds=(0,)):
    return Config(
        data=DataConfig(dir=str(data_dir), counts=(8, 3, 3),
                        phantom=PhantomConfig(side=64, seed=5)),
        train=TrainConfig(stn_epochs=2, unet_min_epochs=2, unet_max_epochs=2,
                          patience=0, batch_size=4, seed=0),
        experiment=ExperimentConfig(modes=modes, seeds=seeds,
                                    overlay_cases=2),
    )


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("exp")
    cfg = tiny_config(base / "data")
    rep_a = run_experiment(cfg, base / "out_a")
    rep_b = run_experiment(cfg, base / "out_b")
    return cfg, base, rep_a, rep_b


class TestArtifacts:
    def test_report_files_written(self, twin_runs):
        _, base, rep, _ = twin_runs
        out = base / "out_a"
        for name in ("report.json", "report-deterministic.json",
                     "checksum.txt", "report.txt"):
            assert (out / name).exists(), name
        assert rep.ok
        doc = json.loads((out / "report.json").read_text())
        assert doc["ok"] is True
        assert doc["checksum"] == rep.checksum
        assert (out / "checksum.txt").read_text().strip() == rep.checksum

    def test_rows_cover_modes_with_stats(self, twin_runs):
        _, _, rep, _ = twin_runs
        assert [r["mode"] for r in rep.rows] == ["plain", "stn1"]
        for row in rep.rows:
            assert row["kidney"]["n"] == 3  # seeds(1) x test cases(3)
            assert 0.0 <= row["kidney"]["mean"] <= 100.0
            assert row["failures"] == []
            rec = row["per_seed"][0]
            assert rec["epochs_run"] == 2
            assert rec["activation_bytes"] > 0
            assert len(rec["kidney"]) == 3

    def test_checkpoints_load_back(self, twin_runs):
        _, base, rep, _ = twin_runs
        ck = base / "out_a" / "checkpoints"
        kind1, stn1 = net_from_checkpoint(ck / "shared-seed0-stn1.wnet")
        assert kind1 == "stn1" and stn1.side == 64
        kind_u, unet = net_from_checkpoint(ck / "plain-seed0-unet.wnet")
        assert kind_u == "unet" and unet.spec.side == 64
        sha = trainmod.state_checksum(unet.state_dict())
        assert sha == rep.rows[0]["per_seed"][0]["unet_checkpoint"]

    def test_logs_load_back(self, twin_runs):
        _, base, _, _ = twin_runs
        logs = base / "out_a" / "logs"
        stn1_log = RunLog.load(logs / "stn1-seed0.jsonl")
        assert stn1_log.kind == "stn1"
        assert len(stn1_log.records) == 2
        unet_log = RunLog.load(logs / "stn1-seed0-unet.jsonl")
        assert unet_log.kind == "unet[stn1]"
        assert unet_log.final["epochs_run"] == 2

    def test_overlays_for_first_seed(self, twin_runs):
        _, base, _, _ = twin_runs
        for mode in ("plain", "stn1"):
            d = base / "out_a" / "overlays" / mode
            assert len(list(d.glob("*.ppm"))) == 2
            assert len(list(d.glob("*.pgm"))) == 2

    def test_table_readable(self, twin_runs):
        _, _, rep, _ = twin_runs
        assert "kidney Dice" in rep.table
        assert "plain" in rep.table and "stn1" in rep.table
        assert "PARTIAL" not in rep.table


class TestDeterminism:
    def test_checksums_identical(self, twin_runs):
        _, base, rep_a, rep_b = twin_runs
        assert rep_a.checksum == rep_b.checksum
        a = (base / "out_a" / "report-deterministic.json").read_bytes()
        b = (base / "out_b" / "report-deterministic.json").read_bytes()
        assert a == b

    def test_wall_clock_outside_checksum(self, twin_runs):
        _, base, _, _ = twin_runs
        doc = json.loads(
            (base / "out_a" / "report-deterministic.json").read_text())
        for row in doc["rows"]:
            for rec in row["per_seed"]:
                assert "seconds" not in rec
        assert "seconds_total" not in doc

    def test_dice_values_match_across_runs(self, twin_runs):
        _, _, rep_a, rep_b = twin_runs
        for ra, rb in zip(rep_a.rows, rep_b.rows):
            assert ra["per_seed"][0]["kidney"] == rb["per_seed"][0]["kidney"]
            assert ra["per_seed"][0]["unet_checkpoint"] == \
                rb["per_seed"][0]["unet_checkpoint"]


class TestFailureIsolation:
    def test_sub_run_failure_marks_report(self, tmp_path, monkeypatch):
        cfg = tiny_config(tmp_path / "data")
        real = trainmod.train_unet

        def flaky(tc, train_cases, val_cases, mode, **kw):
            if mode == "stn1":
                raise RuntimeError("injected fault")
            return real(tc, train_cases, val_cases, mode, **kw)

        monkeypatch.setattr(trainmod, "train_unet", flaky)
        rep = run_experiment(cfg, tmp_path / "out")
        assert rep.ok is False
        plain_row, stn1_row = rep.rows
        assert plain_row["per_seed"] and not plain_row["failures"]
        assert not stn1_row["per_seed"]
        assert stn1_row["failures"][0]["error"] == "injected fault"
        assert stn1_row["kidney"] is None
        assert "FAILED seed 0: injected fault" in rep.table
        assert "PARTIAL REPORT" in rep.table
        doc = json.loads((tmp_path / "out" / "report.json").read_text())
        assert doc["ok"] is False


class TestDataset:
    def test_generates_once_then_reuses(self, tmp_path):
        dc = DataConfig(dir=str(tmp_path / "d"), counts=(8, 3, 3),
                        phantom=PhantomConfig(side=64, seed=5))
        idx1 = ensure_dataset(dc)
        stamp = (tmp_path / "d" / "index.json").stat().st_mtime_ns
        idx2 = ensure_dataset(dc)
        assert (tmp_path / "d" / "index.json").stat().st_mtime_ns == stamp
        assert idx1.entries == idx2.entries

    def test_count_mismatch_rejected(self, tmp_path):
        dc = DataConfig(dir=str(tmp_path / "d"), counts=(8, 3, 3),
                        phantom=PhantomConfig(side=64, seed=5))
        ensure_dataset(dc)
        bigger = DataConfig(dir=str(tmp_path / "d"), counts=(10, 3, 3),
                            phantom=PhantomConfig(side=64, seed=5))
        with pytest.raises(ValueError, match="counts"):
            ensure_dataset(bigger)

    def test_side_mismatch_rejected(self, tmp_path):
        dc = DataConfig(dir=str(tmp_path / "d"), counts=(8, 3, 3),
                        phantom=PhantomConfig(side=64, seed=5))
        index = ensure_dataset(dc)
        other = DataConfig(dir=str(tmp_path / "d"), counts=(8, 3, 3),
                           phantom=PhantomConfig(side=128, seed=5))
        with pytest.raises(ValueError, match="side"):
            load_cases(other, index)


class TestAugmentedMode:
    def test_plain_aug_gets_the_hook(self, tmp_path, monkeypatch):
        cfg = tiny_config(tmp_path / "data", modes=("plain", "plain+aug"))
        seen = []
        real = trainmod.train_unet

        def spy(tc, train_cases, val_cases, mode, stn1=None, stn2=None,
                index=None, augment=None):
            seen.append((mode, augment is not None))
            return real(tc, train_cases, val_cases, mode, stn1=stn1,
                        stn2=stn2, index=index, augment=augment)

        monkeypatch.setattr(trainmod, "train_unet", spy)
        rep = run_experiment(cfg, tmp_path / "out")
        assert rep.ok
        assert seen == [("plain", False), ("plain", True)]
        assert [r["mode"] for r in rep.rows] == ["plain", "plain+aug"]
