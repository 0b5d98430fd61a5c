"""YAML run configuration: parsing, validation, seed overrides."""

import dataclasses
from pathlib import Path

import pytest
import yaml

from warpseg.config import (
    CONFIG_VERSION,
    Config,
    DataConfig,
    ExperimentConfig,
    default_config,
    load_config,
    parse_config,
    with_seed,
)


def doc(**over):
    base = {
        "version": 1,
        "data": {"dir": "d", "counts": [40, 10, 10], "side": 64, "seed": 3},
        "train": {"lr0": 0.02, "seed": 4},
        "experiment": {"modes": ["plain", "stn1"], "seeds": [0, 1],
                       "overlay_cases": 2},
    }
    base.update(over)
    return base


class TestParsing:
    def test_full_document(self):
        cfg = parse_config(doc(), base_dir="/tmp/x")
        assert cfg.data.dir == str(Path("/tmp/x") / "d")
        assert cfg.data.counts == (40, 10, 10)
        assert cfg.data.phantom.side == 64
        assert cfg.data.phantom.seed == 3
        assert cfg.train.lr0 == 0.02
        assert cfg.experiment.modes == ("plain", "stn1")

    def test_absolute_dir_untouched(self):
        d = doc()
        d["data"]["dir"] = "/abs/data"
        cfg = parse_config(d, base_dir="/elsewhere")
        assert cfg.data.dir == "/abs/data"

    def test_missing_sections_default(self):
        cfg = parse_config({"version": 1})
        assert cfg.data.counts == (400, 100, 100)
        assert cfg.train.lr0 == 0.01
        assert cfg.experiment.seeds == (0, 1, 2)

    def test_version_required(self):
        with pytest.raises(ValueError, match="version"):
            parse_config(doc(version=2))
        with pytest.raises(ValueError, match="version"):
            parse_config({"data": {}})

    def test_root_must_be_mapping(self):
        with pytest.raises(ValueError, match="mapping"):
            parse_config(["not", "a", "dict"])

    def test_unknown_section_rejected(self):
        with pytest.raises(ValueError, match="sections: extras"):
            parse_config(doc(extras={}))

    def test_unknown_keys_rejected_per_section(self):
        d = doc()
        d["data"]["sied"] = 64
        with pytest.raises(ValueError, match="data keys: sied"):
            parse_config(d)
        d = doc()
        d["train"]["lr"] = 0.1
        with pytest.raises(ValueError, match="train keys: lr"):
            parse_config(d)
        d = doc()
        d["experiment"]["mode"] = "plain"
        with pytest.raises(ValueError, match="experiment keys: mode"):
            parse_config(d)

    def test_phantom_validation_propagates(self):
        d = doc()
        d["data"]["side"] = 100
        with pytest.raises(ValueError, match="side"):
            parse_config(d)

    def test_counts_validation(self):
        d = doc()
        d["data"]["counts"] = [10, 5]
        with pytest.raises(ValueError, match="counts"):
            parse_config(d)
        d["data"]["counts"] = [0, 5, 5]
        with pytest.raises(ValueError, match="training case"):
            parse_config(d)

    def test_bad_experiment_mode(self):
        d = doc()
        d["experiment"]["modes"] = ["warp"]
        with pytest.raises(ValueError, match="unknown experiment mode"):
            parse_config(d)

    def test_fractions_sum_to_one(self):
        cfg = parse_config(doc())
        fr = cfg.data.fractions
        assert fr["train"] + fr["val"] + fr["test"] == pytest.approx(1.0)
        assert cfg.data.total == 60


class TestRoundTrip:
    def test_yaml_file_load(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text(yaml.safe_dump(doc()))
        cfg = load_config(p)
        assert cfg.data.dir == str(tmp_path / "d")
        assert cfg.train.seed == 4

    def test_to_dict_reparses_identically(self):
        cfg = parse_config(doc())
        d = cfg.to_dict()
        # feed the plain-data view back through the parser
        d2 = {
            "version": d["version"],
            "data": dict(d["data"]),
            "train": dict(d["train"]),
            "experiment": dict(d["experiment"]),
        }
        # patch is None in TrainConfig; YAML would carry it as null
        reparsed = parse_config(d2, base_dir=".")
        assert reparsed.train == cfg.train
        assert reparsed.experiment == cfg.experiment
        assert reparsed.data.phantom == cfg.data.phantom

    def test_default_config_parses(self):
        cfg = default_config()
        assert cfg.experiment.modes == ("plain", "plain+aug", "stn1",
                                        "stn1+stn2")
        assert cfg.data.phantom.side == 64


class TestSeedOverride:
    def test_data_scope(self):
        cfg = parse_config(doc())
        out = with_seed(cfg, 9, "data")
        assert out.data.phantom.seed == 9
        assert out.train.seed == cfg.train.seed

    def test_train_scope(self):
        cfg = parse_config(doc())
        out = with_seed(cfg, 9, "train")
        assert out.train.seed == 9
        assert out.data.phantom.seed == cfg.data.phantom.seed

    def test_experiment_scope(self):
        cfg = parse_config(doc())
        out = with_seed(cfg, 9, "experiment")
        assert out.experiment.seeds == (9,)

    def test_none_is_identity(self):
        cfg = parse_config(doc())
        assert with_seed(cfg, None, "train") is cfg

    def test_unknown_scope(self):
        cfg = parse_config(doc())
        with pytest.raises(ValueError, match="scope"):
            with_seed(cfg, 1, "model")
