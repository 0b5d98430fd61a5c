"""Experiment orchestration: trains the configured mode set and reports a table.

One run trains every (mode, seed) pair from the config, evaluates on the
held-out test split in the original frame, and writes into the output
directory:

    report.txt                  human-readable table
    report.json                 full report including wall-clock times
    report-deterministic.json   the checksummed block (no wall-clock)
    checksum.txt                sha256 of the deterministic block
    checkpoints/                trained networks per (mode, seed)
    logs/                       per-run epoch records
    overlays/<mode>/            prediction/reference contours over the image

A sub-run failure marks its row and flips the report to not-ok instead of
aborting the remaining runs; the table then carries failure markers.
The checksum covers only deterministic quantities, so re-running the same
config and seeds reproduces it byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import pipeline, ppm, preprocess, train
from .config import Config
from .nets import save_checkpoint

TRAIN_MODE = {"plain": "plain", "plain+aug": "plain",
              "stn1": "stn1", "stn1+stn2": "stn1+stn2"}


@dataclass
class Report:
    ok: bool
    config: dict
    rows: list
    checksum: str
    table: str
    seconds_total: float

    def to_dict(self) -> dict:
        return {"ok": self.ok, "config": self.config, "rows": self.rows,
                "checksum": self.checksum,
                "seconds_total": round(self.seconds_total, 3)}


def ensure_dataset(data_cfg) -> datamod.DatasetIndex:
    """Load the dataset index, generating the dataset first if absent."""
    index_path = Path(data_cfg.dir) / "index.json"
    if not index_path.exists():
        datamod.generate_dataset(data_cfg.phantom, data_cfg.total, data_cfg.dir,
                                 fractions=data_cfg.fractions)
    index = datamod.load_index(index_path)
    got = tuple(len(index.ids(s)) for s in ("train", "val", "test"))
    want = tuple(int(c) for c in data_cfg.counts)
    if got != want:
        raise ValueError(
            f"dataset at {data_cfg.dir} has train/val/test counts {got}, "
            f"config asks for {want}; point `data.dir` elsewhere or regenerate")
    return index


def load_cases(data_cfg, index: datamod.DatasetIndex) -> dict:
    cases = {}
    for entry in index.entries:
        case = datamod.read_case(datamod.case_path(data_cfg.dir, entry["id"]))
        if case.image.shape[0] != data_cfg.phantom.side:
            raise ValueError(
                f"case {case.id} side {case.image.shape[0]} does not match "
                f"config side {data_cfg.phantom.side}")
        cases[case.id] = case
    return cases


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class _SeedArtifacts:
    """Per-seed trained front ends, shared by the modes that need them."""

    stn1: object = None
    stn1_seconds: float = 0.0
    stn1_log: object = None
    stn2: object = None
    stn2_seconds: float = 0.0
    stn2_log: object = None


class _Runner:
    def __init__(self, cfg: Config, out_dir, echo):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.echo = echo
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.out / "logs").mkdir(exist_ok=True)
        self.index = ensure_dataset(cfg.data)
        cases = load_cases(cfg.data, self.index)
        side = cfg.data.phantom.side
        self.raw_test = [cases[i] for i in self.index.ids("test")]
        self.prep = {cid: preprocess.preprocess_case(c, side=side)
                     for cid, c in cases.items()}
        self.train_cases = [self.prep[i] for i in self.index.ids("train")]
        self.val_cases = [self.prep[i] for i in self.index.ids("val")]
        self.reference = datamod.select_reference(self.train_cases)
        self.stn_cache: dict[int, _SeedArtifacts] = {}
        ph = cfg.data.phantom
        ranges = pipeline.AugmentRanges(angle_deg=ph.angle_deg,
                                        scale_range=ph.scale_range,
                                        translate_frac=ph.translate_frac)
        self.augment_hook = lambda case, rng: pipeline.augment(case, rng, ranges)

    def _ckpt(self, mode: str, seed: int, part: str) -> Path:
        return self.out / "checkpoints" / f"{mode}-seed{seed}-{part}.wnet"

    def stns_for(self, seed: int, need_stn2: bool) -> _SeedArtifacts:
        art = self.stn_cache.setdefault(seed, _SeedArtifacts())
        tc = dataclasses.replace(self.cfg.train, seed=seed)
        if art.stn1 is None:
            t0 = time.perf_counter()
            art.stn1, art.stn1_log = train.train_stn1(
                tc, self.train_cases, self.val_cases, self.reference)
            art.stn1_seconds = time.perf_counter() - t0
            save_checkpoint(self._ckpt("shared", seed, "stn1"), "stn1",
                            {"side": art.stn1.side}, art.stn1.state_dict())
            art.stn1_log.save(self.out / "logs" / f"stn1-seed{seed}.jsonl")
        if need_stn2 and art.stn2 is None:
            t0 = time.perf_counter()
            art.stn2, art.stn2_log = train.train_stn2(
                tc, self.train_cases, self.val_cases, art.stn1)
            art.stn2_seconds = time.perf_counter() - t0
            save_checkpoint(self._ckpt("shared", seed, "stn2"), "stn2",
                            {"side": art.stn2.side, "min_side": art.stn2.min_side},
                            art.stn2.state_dict())
            art.stn2_log.save(self.out / "logs" / f"stn2-seed{seed}.jsonl")
        return art

    def run_one(self, mode: str, seed: int) -> dict:
        """Train and evaluate one (mode, seed); -> per-seed record."""
        tmode = TRAIN_MODE[mode]
        tc = dataclasses.replace(self.cfg.train, seed=seed)
        t0 = time.perf_counter()
        stn1 = stn2 = None
        stn_seconds = 0.0
        if tmode != "plain":
            art = self.stns_for(seed, need_stn2=(tmode == "stn1+stn2"))
            stn1, stn2 = art.stn1, (art.stn2 if tmode == "stn1+stn2" else None)
            stn_seconds = art.stn1_seconds + (
                art.stn2_seconds if tmode == "stn1+stn2" else 0.0)
        hook = self.augment_hook if mode == "plain+aug" else None
        unet, log = train.train_unet(tc, self.train_cases, self.val_cases, tmode,
                                     stn1=stn1, stn2=stn2, index=self.index,
                                     augment=hook)
        save_checkpoint(self._ckpt(mode, seed, "unet"), "unet",
                        unet.spec.to_dict(), unet.state_dict())
        log.save(self.out / "logs" / f"{mode}-seed{seed}-unet.jsonl")
        results, summary = pipeline.evaluate_cases(
            self.raw_test, stn1, stn2, unet, tmode)
        record = {
            "seed": seed,
            "kidney": [r.dice["kidney"] for r in results],
            "tumor": [r.dice["tumor"] for r in results],
            "kidney_mean": summary["kidney"]["mean"],
            "tumor_mean": summary["tumor"]["mean"],
            "best_epoch": log.final["best_epoch"],
            "epochs_run": log.final["epochs_run"],
            "activation_bytes": log.final["unet_activation_bytes"],
            "unet_checkpoint": log.final["checkpoint_sha256"],
            "seconds": round(time.perf_counter() - t0 + stn_seconds, 3),
        }
        self._overlays(mode, seed, results)
        return record

    def _overlays(self, mode: str, seed: int, results):
        count = self.cfg.experiment.overlay_cases
        if count <= 0 or seed != self.cfg.experiment.seeds[0]:
            return
        out = self.out / "overlays" / mode
        out.mkdir(parents=True, exist_ok=True)
        for case, res in list(zip(self.raw_test, results))[:count]:
            rgb = ppm.overlay(case.image, case.labels, res.prediction)
            ppm.write_ppm(out / f"{case.id}.ppm", rgb)
            ppm.write_pgm(out / f"{case.id}.pgm", ppm.to_gray8(case.image))


def run_experiment(cfg: Config, out_dir, echo=None) -> Report:
    """Train/evaluate every configured (mode, seed); write the report bundle."""
    echo = echo or (lambda msg: None)
    t_start = time.perf_counter()
    runner = _Runner(cfg, out_dir, echo)
    rows = []
    ok = True
    for mode in cfg.experiment.modes:
        row = {"mode": mode, "per_seed": [], "failures": []}
        for seed in cfg.experiment.seeds:
            echo(f"[{mode} seed {seed}] training...")
            try:
                record = runner.run_one(mode, int(seed))
                row["per_seed"].append(record)
                echo(f"[{mode} seed {seed}] kidney {record['kidney_mean']:.2f} "
                     f"tumor {record['tumor_mean']:.2f} "
                     f"({record['seconds']:.1f}s)")
            except Exception as exc:  # noqa: BLE001 - sub-run isolation is the contract
                ok = False
                row["failures"].append({"seed": int(seed), "error": str(exc)})
                echo(f"[{mode} seed {seed}] FAILED: {exc}")
        kid = [d for r in row["per_seed"] for d in r["kidney"]]
        tum = [d for r in row["per_seed"] for d in r["tumor"]]
        row["kidney"] = _stats(kid) if kid else None
        row["tumor"] = _stats(tum) if tum else None
        row["seconds"] = round(sum(r["seconds"] for r in row["per_seed"]), 3)
        row["activation_bytes"] = (row["per_seed"][0]["activation_bytes"]
                                   if row["per_seed"] else None)
        rows.append(row)

    report = Report(ok=ok, config=cfg.to_dict(), rows=rows,
                    checksum="", table="",
                    seconds_total=time.perf_counter() - t_start)
    report.checksum = _checksum(report)
    report.table = format_table(report)
    _save(report, Path(out_dir))
    return report


def _deterministic_block(report: Report) -> dict:
    rows = []
    for row in report.rows:
        rows.append({
            "mode": row["mode"],
            "kidney": row["kidney"],
            "tumor": row["tumor"],
            "activation_bytes": row["activation_bytes"],
            "failures": row["failures"],
            "per_seed": [{k: v for k, v in rec.items() if k != "seconds"}
                         for rec in row["per_seed"]],
        })
    return {"version": 1, "config": report.config, "rows": rows}


def _checksum(report: Report) -> str:
    block = json.dumps(_deterministic_block(report), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(block.encode()).hexdigest()


def format_table(report: Report) -> str:
    head = (f"{'mode':<12} {'seeds':>5} {'kidney Dice':>16} {'tumor Dice':>16} "
            f"{'wall s':>9} {'act MiB':>8}")
    lines = [head, "-" * len(head)]
    for row in report.rows:
        n = len(row["per_seed"])
        if n:
            kid = f"{row['kidney']['mean']:6.2f} ± {row['kidney']['std']:5.2f}"
            tum = f"{row['tumor']['mean']:6.2f} ± {row['tumor']['std']:5.2f}"
            mib = f"{row['activation_bytes'] / 2**20:8.2f}"
        else:
            kid = tum = "-"
            mib = "-"
        lines.append(f"{row['mode']:<12} {n:>5} {kid:>16} {tum:>16} "
                     f"{row['seconds']:>9.1f} {mib:>8}")
        for failure in row["failures"]:
            lines.append(f"  FAILED seed {failure['seed']}: {failure['error']}")
    if not report.ok:
        lines.append("PARTIAL REPORT: one or more sub-runs failed.")
    return "\n".join(lines)


def _save(report: Report, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    with open(out / "report-deterministic.json", "w") as f:
        json.dump(_deterministic_block(report), f, indent=1, sort_keys=True)
    with open(out / "checksum.txt", "w") as f:
        f.write(report.checksum + "\n")
    with open(out / "report.txt", "w") as f:
        f.write(report.table + "\n")
