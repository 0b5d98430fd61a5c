"""Command-line surface for the whole toolchain.

Every data-dependent subcommand reads one versioned YAML config (see
`config.py` for the schema) plus optional `--seed` / `--out` overrides.
Exit code is 0 only when the requested work finished completely.

    warpseg synth       -c run.yaml              generate the phantom dataset
    warpseg preprocess  -c run.yaml --out DIR    write normalized copies
    warpseg train-stn1  -c run.yaml --out DIR    pose/size normalizer
    warpseg train-stn2  -c run.yaml --out DIR    ROI cropper (needs stn1)
    warpseg train-unet  -c run.yaml --out DIR --mode plain|plain+aug|stn1|stn1+stn2
    warpseg infer       -c run.yaml --out DIR --mode M --case ID
    warpseg eval        -c run.yaml --out DIR --mode M [--split test]
    warpseg experiment  -c run.yaml --out DIR    full mode-set comparison
    warpseg gradcheck   [--quick]                finite-difference audit
    warpseg selftest                             fast invariant bundle
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as configmod
from . import data as datamod
from . import experiment as experimentmod
from . import gradcheck as gradcheckmod
from . import pipeline, ppm, preprocess, train
from .kernels import backend_name
from .nets import net_from_checkpoint, save_checkpoint

TRAIN_MODES = configmod.EXPERIMENT_MODES


def _load_dataset(cfg):
    """-> (index, raw cases by id); generates the dataset if absent."""
    index = experimentmod.ensure_dataset(cfg.data)
    return index, experimentmod.load_cases(cfg.data, index)


def _prepared_splits(cfg, index, raw):
    side = cfg.data.phantom.side
    prep = {cid: preprocess.preprocess_case(c, side=side) for cid, c in raw.items()}
    return ([prep[i] for i in index.ids("train")],
            [prep[i] for i in index.ids("val")],
            [prep[i] for i in index.ids("test")])


def _run_dir(args) -> Path:
    out = Path(args.out or "runs/default")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_net(out: Path, name: str, expect: str):
    path = out / name
    if not path.exists():
        raise FileNotFoundError(
            f"{path} not found; train it first (warpseg train-{expect})")
    kind, net = net_from_checkpoint(path)
    if kind != expect:
        raise ValueError(f"{path}: expected a {expect} checkpoint, found {kind}")
    return net


def _nets_for_mode(cfg, out: Path, mode: str):
    tmode = experimentmod.TRAIN_MODE[mode]
    stn1 = _load_net(out, "stn1.wnet", "stn1") if tmode != "plain" else None
    stn2 = _load_net(out, "stn2.wnet", "stn2") if tmode == "stn1+stn2" else None
    unet = _load_net(out, f"unet-{mode}.wnet", "unet")
    return tmode, stn1, stn2, unet


def _augment_hook(cfg):
    ph = cfg.data.phantom
    ranges = pipeline.AugmentRanges(angle_deg=ph.angle_deg,
                                    scale_range=ph.scale_range,
                                    translate_frac=ph.translate_frac)
    return lambda case, rng: pipeline.augment(case, rng, ranges)


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = configmod.with_seed(configmod.load_config(args.config), args.seed, "data")
    out_dir = args.out or cfg.data.dir
    index = datamod.generate_dataset(cfg.data.phantom, cfg.data.total, out_dir,
                                     fractions=cfg.data.fractions)
    counts = {s: len(index.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {cfg.data.total} cases to {out_dir} "
          f"(train {counts['train']} / val {counts['val']} / test {counts['test']})")
    return 0


def cmd_preprocess(args) -> int:
    cfg = configmod.load_config(args.config)
    index, raw = _load_dataset(cfg)
    out_dir = Path(args.out or (cfg.data.dir + "_prep"))
    out_dir.mkdir(parents=True, exist_ok=True)
    side = cfg.data.phantom.side
    for cid, case in raw.items():
        datamod.write_case(datamod.case_path(out_dir, cid),
                           preprocess.preprocess_case(case, side=side))
    datamod.save_index(out_dir / "index.json", index)
    print(f"wrote {len(raw)} normalized cases to {out_dir}")
    return 0


def cmd_train_stn1(args) -> int:
    cfg = configmod.with_seed(configmod.load_config(args.config), args.seed, "train")
    out = _run_dir(args)
    index, raw = _load_dataset(cfg)
    tr, va, _ = _prepared_splits(cfg, index, raw)
    reference = datamod.select_reference(tr)
    stn1, log = train.train_stn1(cfg.train, tr, va, reference)
    save_checkpoint(out / "stn1.wnet", "stn1", {"side": stn1.side},
                    stn1.state_dict())
    log.save(out / "stn1.jsonl")
    print(f"pose network: validation soft overlap "
          f"{log.final['val_soft_dice']:.2f} after {len(log.records)} epochs "
          f"-> {out / 'stn1.wnet'}")
    return 0


def cmd_train_stn2(args) -> int:
    cfg = configmod.with_seed(configmod.load_config(args.config), args.seed, "train")
    out = _run_dir(args)
    stn1 = _load_net(out, "stn1.wnet", "stn1")
    index, raw = _load_dataset(cfg)
    tr, va, _ = _prepared_splits(cfg, index, raw)
    stn2, log = train.train_stn2(cfg.train, tr, va, stn1)
    save_checkpoint(out / "stn2.wnet", "stn2",
                    {"side": stn2.side, "min_side": stn2.min_side},
                    stn2.state_dict())
    log.save(out / "stn2.jsonl")
    print(f"crop network: validation loss {log.final['val_loss']:.4f} "
          f"after {len(log.records)} epochs -> {out / 'stn2.wnet'}")
    return 0


def cmd_train_unet(args) -> int:
    cfg = configmod.with_seed(configmod.load_config(args.config), args.seed, "train")
    out = _run_dir(args)
    mode = args.mode
    tmode = experimentmod.TRAIN_MODE[mode]
    stn1 = _load_net(out, "stn1.wnet", "stn1") if tmode != "plain" else None
    stn2 = _load_net(out, "stn2.wnet", "stn2") if tmode == "stn1+stn2" else None
    index, raw = _load_dataset(cfg)
    tr, va, _ = _prepared_splits(cfg, index, raw)
    hook = _augment_hook(cfg) if mode == "plain+aug" else None
    unet, log = train.train_unet(cfg.train, tr, va, tmode, stn1=stn1, stn2=stn2,
                                 index=index, augment=hook)
    save_checkpoint(out / f"unet-{mode}.wnet", "unet", unet.spec.to_dict(),
                    unet.state_dict())
    log.save(out / f"unet-{mode}.jsonl")
    print(f"segmenter [{mode}]: best val mean overlap "
          f"{log.final['best_val_mean_dice']:.2f} at epoch "
          f"{log.final['best_epoch']} ({log.final['epochs_run']} run) "
          f"-> {out / f'unet-{mode}.wnet'}")
    return 0


def cmd_infer(args) -> int:
    cfg = configmod.load_config(args.config)
    out = _run_dir(args)
    tmode, stn1, stn2, unet = _nets_for_mode(cfg, out, args.mode)
    index, raw = _load_dataset(cfg)
    if args.case not in raw:
        raise KeyError(f"case {args.case!r} not in the dataset "
                       f"({len(raw)} cases at {cfg.data.dir})")
    case = raw[args.case]
    res = pipeline.infer(case, stn1, stn2, unet, tmode)
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    ppm.write_pgm(pred_dir / f"{case.id}-pred.pgm",
                  (res.prediction * 100).astype(np.uint8))
    ppm.write_ppm(pred_dir / f"{case.id}-overlay.ppm",
                  ppm.overlay(case.image, case.labels, res.prediction))
    print(f"{case.id}: kidney {res.dice['kidney']:.2f} "
          f"tumor {res.dice['tumor']:.2f} ({res.seconds * 1000:.0f} ms) "
          f"-> {pred_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = configmod.load_config(args.config)
    out = _run_dir(args)
    tmode, stn1, stn2, unet = _nets_for_mode(cfg, out, args.mode)
    index, raw = _load_dataset(cfg)
    ids = index.ids(args.split)
    if not ids:
        raise ValueError(f"split {args.split!r} is empty")
    results, summary = pipeline.evaluate_cases(
        [raw[i] for i in ids], stn1, stn2, unet, tmode)
    doc = {"mode": args.mode, "split": args.split, "summary": summary,
           "cases": [{"id": r.case_id, **{k: round(v, 4) for k, v in r.dice.items()}}
                     for r in results]}
    path = out / f"eval-{args.mode}-{args.split}.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    print(f"[{args.mode} on {args.split}] "
          f"kidney {summary['kidney']['mean']:.2f} ± {summary['kidney']['std']:.2f}  "
          f"tumor {summary['tumor']['mean']:.2f} ± {summary['tumor']['std']:.2f}  "
          f"({summary['kidney']['n']} cases) -> {path}")
    return 0


def cmd_experiment(args) -> int:
    cfg = configmod.with_seed(configmod.load_config(args.config), args.seed,
                              "experiment")
    out = args.out or "runs/experiment"
    report = experimentmod.run_experiment(cfg, out, echo=print)
    print(report.table)
    print(f"report checksum {report.checksum}")
    print(f"artifacts in {out}")
    return 0 if report.ok else 1


def cmd_gradcheck(args) -> int:
    results = gradcheckmod.run(quick=args.quick)
    print(gradcheckmod.format_results(results))
    return 0 if all(r.ok for r in results) else 1


def cmd_selftest(args) -> int:
    from . import geometry, losses
    from .autodiff import Tensor
    from .nets import build_crop_stn, build_pose_stn

    failures = []

    def check(name, fn):
        try:
            fn()
            print(f"ok: {name}")
        except Exception as exc:  # noqa: BLE001 - report and keep testing
            failures.append(name)
            print(f"FAIL: {name}: {exc}")

    check("compute backend available", lambda: print(f"  backend: {backend_name()}"))

    def identity_at_init():
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 16, 16)).astype(np.float32)
        stn1 = build_pose_stn(16, seed=0).eval()
        theta, wimg, wmask = stn1(Tensor(x))
        assert np.array_equal(wimg.data[:, 0], x[:, 0]), "pose warp is not identity"
        stn2 = build_crop_stn(16, seed=0).eval()
        theta2, crop, _ = stn2(Tensor(x[:, :1]), 16)
        assert np.array_equal(crop.data, x[:, :1]), "crop is not identity"
    check("fresh transformers are exact identities", identity_at_init)

    def geometry_identities():
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = geometry.SimilarityParams(rng.uniform(-1, 1), rng.uniform(0.7, 1.4),
                                          rng.uniform(0.7, 1.4), rng.uniform(-.3, .3),
                                          rng.uniform(-.3, .3))
            m = geometry.similarity_to_map(p)
            r = geometry.compose(m, geometry.invert(m))
            assert np.abs(r.m - geometry.AffineMap2D.identity().m).max() < 1e-10
    check("compose/invert round trip", geometry_identities)

    def loss_pins():
        rng = np.random.default_rng(2)
        a = (rng.random((1, 1, 8, 8)) < 0.5).astype(np.float64)
        val = losses.soft_dice(Tensor(a), a).item()
        assert abs(val - 100.0) < 1e-9, f"self overlap {val}"
    check("overlap of a mask with itself is 100", loss_pins)

    def tiny_train():
        cfg = datamod.PhantomConfig(side=64, seed=9)
        cases = [preprocess.preprocess_case(datamod.generate_phantom(cfg, i), side=64)
                 for i in range(4)]
        tc = train.TrainConfig(seed=0, stn_epochs=1, unet_min_epochs=1,
                               unet_max_epochs=1, patience=0, f0=4, batch_size=2)
        unet, log = train.train_unet(tc, cases[:3], cases[3:], "plain")
        assert np.isfinite(log.records[0]["train_loss"])
    check("one training epoch end to end", tiny_train)

    def file_round_trip():
        import tempfile
        cfg = datamod.PhantomConfig(side=64, seed=4)
        case = datamod.generate_phantom(cfg, 0)
        with tempfile.TemporaryDirectory() as d:
            datamod.write_case(Path(d) / "c.wseg", case)
            back = datamod.read_case(Path(d) / "c.wseg")
            assert np.array_equal(back.image, case.image)
            assert np.array_equal(back.labels, case.labels)
    check("case file round trip", file_round_trip)

    if failures:
        print(f"{len(failures)} self-test(s) failing: {', '.join(failures)}")
        return 1
    print("all self-tests passed")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpseg",
        description="Pose-normalizing, ROI-cropping segmentation toolchain.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, seed=True, out=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("-c", "--config", required=True,
                           help="versioned YAML run configuration")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the relevant seed from the config")
        if out:
            p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "generate the phantom dataset")
    add("preprocess", cmd_preprocess, "write intensity/canvas-normalized copies",
        seed=False)
    add("train-stn1", cmd_train_stn1, "train the pose/size normalizer")
    add("train-stn2", cmd_train_stn2, "train the ROI cropper")
    p = add("train-unet", cmd_train_unet, "train the segmenter")
    p.add_argument("--mode", choices=TRAIN_MODES, default="plain")
    p = add("infer", cmd_infer, "segment one case and restore it", seed=False)
    p.add_argument("--mode", choices=TRAIN_MODES, default="plain")
    p.add_argument("--case", required=True, help="case id to segment")
    p = add("eval", cmd_eval, "evaluate a trained mode on a split", seed=False)
    p.add_argument("--mode", choices=TRAIN_MODES, default="plain")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    add("experiment", cmd_experiment, "train and compare the configured modes")
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit",
            config=False, seed=False, out=False)
    p.add_argument("--quick", action="store_true",
                   help="one representative configuration per op")
    add("selftest", cmd_selftest, "fast end-to-end invariant checks",
        config=False, seed=False, out=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        if os.environ.get("WARPSEG_DEBUG"):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
