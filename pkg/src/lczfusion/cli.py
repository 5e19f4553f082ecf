"""Command-line surface.

Every command resolves its parameters from built-in defaults, then an
optional JSON config file (--config), then explicit flags (flags win), and
writes the fully resolved set to resolved_config.json beside its outputs so
any run can be replayed exactly.  Commands write only inside --out.

Exit codes: 0 success, 1 check failure (gradcheck), 2 usage or domain
errors, 3 data/format errors, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import (DEFAULT_OVERLAP_MIN, DEFAULT_RATIOS, PolygonSet,
                     extract_patches, load_dataset, load_manifest,
                     split as split_records, write_manifest)
from .errors import (ConsistencyError, DataError, DimensionError, DomainError,
                     FormatError, LczError, NumericError)
from .fusion import classify, sweep_to_csv
from .gradcheck import CHECKS, FD_THRESHOLD, run_suite
from .graph import ingest_masks
from .layers import cross_entropy
from .lczt import read_tensor
from .metrics import compute_metrics
from .rng import make_rng
from .synth import SynthConfig, synth_generate
from .train import (TrainConfig, evaluate, save_trainlog, train_stream,
                    two_phase_fit)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# defaults materialized into every resolved_config.json
DEFAULTS = {
    "make-synthetic": {
        "task": None, "classes": 4, "samples_per_class": 100,
        "noise_sigma": 0.05, "seed": 0, "out": None,
    },
    "train": {
        "stream": None, "data": None, "out": None,
        "batch_size": 64, "max_epochs": 100, "lr": 0.002,
        "lr_decay_factor": 0.4, "lr_patience": 5, "early_stop_patience": 10,
        "seed": 0, "alpha": 0.6, "augment": True,
        "hidden": 32, "widths": "64,64,128,256",
    },
    "eval": {
        "checkpoint": None, "data": None, "split": "test", "out": None,
        "batch_size": 64,
    },
    "fuse-eval": {
        "google_ckpt": None, "sentinel_ckpt": None, "data": None,
        "split": "val", "alpha": 0.6, "step": 0.05, "out": None,
        "batch_size": 64,
    },
    "sweep-alpha": {
        "google_ckpt": None, "sentinel_ckpt": None, "data": None,
        "split": "val", "step": 0.05, "out": None, "batch_size": 64,
    },
    "gradcheck": {"only": None, "out": None},
    "ingest-masks": {"rgb": None, "mask": None, "patch_id": None, "out": None},
    "extract-patches": {
        "sentinel": None, "google": None, "mask": None, "polygons": None,
        "per_polygon": 5, "overlap_min": DEFAULT_OVERLAP_MIN, "seed": 0,
        "city": "scene", "out": None,
    },
    "split": {
        "data": None, "strategy": None, "ratios": "0.7,0.2,0.1", "seed": 0,
        "out": None,
    },
}

REQUIRED = {
    "make-synthetic": ("task", "out"),
    "train": ("stream", "data", "out"),
    "eval": ("checkpoint", "data", "out"),
    "fuse-eval": ("google_ckpt", "sentinel_ckpt", "data", "out"),
    "sweep-alpha": ("google_ckpt", "sentinel_ckpt", "data", "out"),
    "gradcheck": (),
    "ingest-masks": ("rgb", "mask", "patch_id", "out"),
    "extract-patches": ("sentinel", "google", "polygons", "out"),
    "split": ("data", "strategy", "out"),
}


class UsageError(LczError):
    pass


def _parse_ints(text, n, what):
    parts = [p for p in str(text).split(",") if p != ""]
    try:
        values = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"{what} must be comma-separated integers") from exc
    if len(values) != n:
        raise UsageError(f"{what} needs exactly {n} values, got {len(values)}")
    return values


def _parse_floats(text, n, what):
    parts = [p for p in str(text).split(",") if p != ""]
    try:
        values = tuple(float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"{what} must be comma-separated numbers") from exc
    if len(values) != n:
        raise UsageError(f"{what} needs exactly {n} values, got {len(values)}")
    return values


def resolve_config(command: str, flag_values: dict, config_path) -> dict:
    cfg = dict(DEFAULTS[command])
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError("config file must hold a JSON object")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(
                f"unknown config keys for {command}: {sorted(unknown)}"
            )
        cfg.update(doc)
    for key, value in flag_values.items():
        if key in cfg and value is not None:
            cfg[key] = value
    for key in REQUIRED[command]:
        if cfg.get(key) is None:
            raise UsageError(f"{command} requires --{key.replace('_', '-')}")
    return cfg


def write_resolved(command: str, cfg: dict, out_dir, threads) -> None:
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "version": __version__, "threads": threads}
    doc.update(cfg)
    with open(os.path.join(out_dir, "resolved_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=int(cfg["batch_size"]),
        max_epochs=int(cfg["max_epochs"]),
        lr=float(cfg["lr"]),
        lr_decay_factor=float(cfg["lr_decay_factor"]),
        lr_patience=int(cfg["lr_patience"]),
        early_stop_patience=int(cfg["early_stop_patience"]),
        seed=int(cfg["seed"]),
        alpha=float(cfg["alpha"]),
        augment=bool(cfg["augment"]),
        hidden=int(cfg["hidden"]),
        widths=_parse_ints(cfg["widths"], 4, "widths"),
    )


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def cmd_make_synthetic(cfg: dict) -> int:
    synth_cfg = SynthConfig(
        task=cfg["task"], classes=int(cfg["classes"]),
        samples_per_class=int(cfg["samples_per_class"]),
        noise_sigma=float(cfg["noise_sigma"]), seed=int(cfg["seed"]),
    )
    records = synth_generate(synth_cfg, cfg["out"])
    print(f"wrote {len(records)} samples to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    tc = _train_config(cfg)
    model, log = train_stream(cfg["stream"], cfg["data"], tc)
    os.makedirs(cfg["out"], exist_ok=True)
    ckpt_path = os.path.join(cfg["out"], f"{cfg['stream']}.ckpt")
    save_checkpoint(ckpt_path, model)
    save_trainlog(log, os.path.join(cfg["out"], "trainlog.csv"))
    last = log.epochs[-1]
    print(f"{cfg['stream']}: {len(log.epochs)} epochs ({log.stop_reason}), "
          f"best val loss at oa={last.val_oa:.4f}, checkpoint {ckpt_path}")
    return EXIT_OK


def _load_split_samples(cfg: dict, stream):
    splits = None if cfg["split"] == "all" else (cfg["split"],)
    samples = load_dataset(cfg["data"], stream=stream, splits=splits)
    if not samples:
        raise DataError(f"no samples in split {cfg['split']!r} of {cfg['data']}")
    return samples


def cmd_eval(cfg: dict) -> int:
    model = load_checkpoint(cfg["checkpoint"])
    stream = "google" if model.KIND == "gcn" else "sentinel"
    samples = _load_split_samples(cfg, stream)
    labels = np.array([s.label for s in samples])
    loss, oa, probs = evaluate(model, samples, int(cfg["batch_size"]))
    report = compute_metrics(labels, classify(probs),
                             model.num_classes).to_json_dict()
    report["loss"] = loss
    report["split"] = cfg["split"]
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "metrics.json"), report)
    print(f"oa={report['overall_accuracy']:.4f} kappa={report['kappa']:.4f} "
          f"loss={loss:.4f} on {len(samples)} samples")
    return EXIT_OK


def _run_fusion(cfg: dict, alpha: float, step: float) -> dict:
    tc = TrainConfig(alpha=alpha, batch_size=int(cfg["batch_size"]))
    return two_phase_fit(cfg["google_ckpt"], cfg["sentinel_ckpt"], cfg["data"],
                         tc, split=cfg["split"], sweep_step=step)


def cmd_fuse_eval(cfg: dict) -> int:
    report = _run_fusion(cfg, float(cfg["alpha"]), float(cfg["step"]))
    os.makedirs(cfg["out"], exist_ok=True)
    _write_json(os.path.join(cfg["out"], "fusion_report.json"), report)
    with open(os.path.join(cfg["out"], "sweep.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(sweep_to_csv(report["sweep"]))
    fused = report["fused"]["overall_accuracy"]
    print(f"fused oa={fused:.4f} at alpha={cfg['alpha']} "
          f"(google {report['google_only']['overall_accuracy']:.4f}, "
          f"sentinel {report['sentinel_only']['overall_accuracy']:.4f})")
    return EXIT_OK


def cmd_sweep_alpha(cfg: dict) -> int:
    report = _run_fusion(cfg, 0.5, float(cfg["step"]))
    os.makedirs(cfg["out"], exist_ok=True)
    csv_text = sweep_to_csv(report["sweep"])
    with open(os.path.join(cfg["out"], "sweep.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(csv_text)
    best = max(report["sweep"], key=lambda r: r["oa"])
    print(f"{len(report['sweep'])} rows; best oa={best['oa']:.4f} "
          f"at alpha={best['alpha']:.2f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    names = cfg["only"]
    if names is not None:
        unknown = set(names) - set(CHECKS)
        if unknown:
            raise UsageError(f"unknown gradcheck names {sorted(unknown)}")
    results = run_suite(names=names)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: max_rel_err={r.max_rel_err:.3e} "
              f"threshold={r.threshold:g} {status} ({r.seconds:.2f}s)")
    if cfg["out"] is not None:
        os.makedirs(cfg["out"], exist_ok=True)
        _write_json(os.path.join(cfg["out"], "gradcheck.json"), {
            "threshold": FD_THRESHOLD,
            "checks": [{"name": r.name, "max_rel_err": r.max_rel_err,
                        "passed": r.passed} for r in results],
        })
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_ingest_masks(cfg: dict) -> int:
    rgb = read_tensor(cfg["rgb"])
    mask = read_tensor(cfg["mask"])
    inst = ingest_masks(mask, rgb, patch_id=cfg["patch_id"])
    os.makedirs(cfg["out"], exist_ok=True)
    out_path = os.path.join(cfg["out"], f"{cfg['patch_id']}.instances.json")
    inst.save(out_path)
    print(f"{len(inst.instances)} instances -> {out_path}")
    return EXIT_OK


def cmd_extract_patches(cfg: dict) -> int:
    sentinel = read_tensor(cfg["sentinel"])
    google = read_tensor(cfg["google"])
    mask = None if cfg["mask"] is None else read_tensor(cfg["mask"])
    polygons = PolygonSet.load(cfg["polygons"])
    rng = make_rng(int(cfg["seed"]))
    records = extract_patches(
        sentinel, google, polygons, int(cfg["per_polygon"]), rng, cfg["out"],
        overlap_min=float(cfg["overlap_min"]), mask_scene=mask,
        city=cfg["city"],
    )
    write_manifest(records, os.path.join(cfg["out"], "manifest.jsonl"))
    print(f"extracted {len(records)} samples "
          f"from {len(polygons.polygons)} polygons")
    return EXIT_OK


def cmd_split(cfg: dict) -> int:
    records = load_manifest(cfg["data"], check_paths=False)
    ratios = _parse_floats(cfg["ratios"], 3, "ratios")
    rng = make_rng(int(cfg["seed"]))
    assigned = split_records(records, cfg["strategy"], ratios=ratios, rng=rng)
    out_dir = os.path.abspath(cfg["out"])
    os.makedirs(out_dir, exist_ok=True)
    data_dir = os.path.dirname(os.path.abspath(cfg["data"]))
    if out_dir != data_dir:
        prefix = os.path.relpath(data_dir, out_dir)
        for rec in assigned:
            rec.sentinel_path = os.path.join(prefix, rec.sentinel_path)
            rec.google_path = os.path.join(prefix, rec.google_path)
            rec.mask_path = os.path.join(prefix, rec.mask_path)
    write_manifest(assigned, os.path.join(out_dir, "manifest.jsonl"))
    counts = {name: sum(1 for r in assigned if r.split == name)
              for name in ("train", "test", "val")}
    print(f"split {len(assigned)} samples: {counts}")
    return EXIT_OK


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse-eval": cmd_fuse_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "gradcheck": cmd_gradcheck,
    "ingest-masks": cmd_ingest_masks,
    "extract-patches": cmd_extract_patches,
    "split": cmd_split,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lczfusion",
        description="Dual-stream local-climate-zone scene classification",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap (execution is currently serial)")

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset")
    p.add_argument("--task", choices=("spectral", "layout", "product"))
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", "--samples", type=int,
                   dest="samples_per_class")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("train", help="train one stream on a split manifest")
    p.add_argument("--stream", choices=("google", "sentinel"))
    p.add_argument("--data", help="manifest.jsonl with split assignments")
    p.add_argument("--out")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay-factor", type=float, dest="lr_decay_factor")
    p.add_argument("--lr-patience", type=int, dest="lr_patience")
    p.add_argument("--early-stop-patience", type=int,
                   dest="early_stop_patience")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-augment", action="store_const", const=False,
                   dest="augment")
    p.add_argument("--hidden", type=int, help="GCN hidden width")
    p.add_argument("--widths", help="spectral-stream widths, e.g. 64,64,128,256")
    common(p)

    p = sub.add_parser("eval", help="evaluate one checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test", "all"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("fuse-eval",
                       help="fused metrics for two frozen checkpoints")
    p.add_argument("--google-ckpt", dest="google_ckpt")
    p.add_argument("--sentinel-ckpt", dest="sentinel_ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--step", type=float, help="alpha sweep step")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("sweep-alpha", help="alpha sweep CSV only")
    p.add_argument("--google-ckpt", dest="google_ckpt")
    p.add_argument("--sentinel-ckpt", dest="sentinel_ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--step", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--only", action="append", choices=sorted(CHECKS),
                   help="run a subset (repeatable)")
    p.add_argument("--out", help="optional report directory")
    common(p)

    p = sub.add_parser("ingest-masks",
                       help="instance raster + RGB patch -> instance sidecar")
    p.add_argument("--rgb", help="320x320x3 u8 LCZT file")
    p.add_argument("--mask", help="320x320 u16 LCZT file")
    p.add_argument("--patch-id", dest="patch_id")
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("extract-patches",
                       help="sample aligned patch pairs inside polygons")
    p.add_argument("--sentinel", help="HxWx10 scene LCZT file (digital numbers)")
    p.add_argument("--google", help="10Hx10Wx3 u8 scene LCZT file")
    p.add_argument("--mask", help="optional 10Hx10W u16 instance raster")
    p.add_argument("--polygons", help="polygon JSON file")
    p.add_argument("--per-polygon", type=int, dest="per_polygon")
    p.add_argument("--overlap-min", type=float, dest="overlap_min")
    p.add_argument("--city")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("split", help="assign train/test/val to a manifest")
    p.add_argument("--data", help="manifest.jsonl to split")
    p.add_argument("--strategy", choices=("sample_pool", "polygon_pool"))
    p.add_argument("--ratios", help="train,test,val e.g. 0.7,0.2,0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    common(p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    flag_values = {k: v for k, v in vars(args).items()
                   if k not in ("command", "config", "threads")}
    try:
        cfg = resolve_config(command, flag_values, args.config)
        write_resolved(command, cfg, cfg.get("out"), args.threads)
        return HANDLERS[command](cfg)
    except UsageError as exc:
        _fail(exc)
        return EXIT_USAGE
    except DomainError as exc:
        _fail(exc)
        return EXIT_USAGE
    except NumericError as exc:
        _fail(exc)
        return EXIT_NUMERIC
    except (DataError, DimensionError, FormatError, ConsistencyError) as exc:
        _fail(exc)
        return EXIT_DATA
    except OSError as exc:
        _fail(exc)
        return EXIT_DATA


def _fail(exc: Exception) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
