"""Operator entry points: train, predict, evaluate, trace, gradcheck, synth.

Configuration is a strict JSON document (unknown keys are rejected) with
`model`, `train` and `data` sections; command-line flags override file
values and the fully resolved configuration is echoed into the run
manifest. Exit codes: 0 success, 2 configuration/validation error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import metrics, topology, training, volume
from .errors import ConfigError, HRSTError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

TINY_GRADCHECK_CONFIG = topology.ModelConfig(
    variant=2, embed_dim=8, patch_size=4, window=2, heads=(2, 4),
    in_channels=1, num_classes=2,
)


def build_id() -> str:
    h = hashlib.sha1()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()[:12]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                   outputs: list[str], started: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "build_id": build_id(),
        "started_utc": started,
        "ended_utc": _utc_now(),
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _strict_section(raw: dict, allowed: set[str], where: str) -> dict:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return raw


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _strict_section(raw, {"model", "train", "data"}, "config")
    return raw


_MODEL_KEYS = {
    "variant", "embed_dim", "patch_size", "window", "heads",
    "in_channels", "num_classes", "mlp_ratio",
}
_TRAIN_KEYS = {
    "epochs", "crop", "seed", "base_lr", "warmup_epochs", "min_lr",
    "val_every", "batch_size", "val_overlap", "weight_decay",
}
_SYN_KEYS = {
    "seed", "dims", "channels", "num_classes", "blobs_per_class",
    "radius_range", "noise_sigma", "num_cases", "val_cases",
}


def model_config_from(section: dict) -> topology.ModelConfig:
    kw = dict(_strict_section(section, _MODEL_KEYS, "config.model"))
    if "heads" in kw:
        kw["heads"] = tuple(kw["heads"])
    cfg = topology.ModelConfig(**kw)
    cfg.validate()
    return cfg


def train_config_from(section: dict) -> training.TrainConfig:
    kw = dict(_strict_section(section, _TRAIN_KEYS, "config.train"))
    if "epochs" not in kw or "crop" not in kw:
        raise ConfigError("config.train requires 'epochs' and 'crop'")
    kw["crop"] = tuple(kw["crop"])
    return training.TrainConfig(**kw)


def _synthetic_pairs(section: dict):
    kw = dict(_strict_section(section, _SYN_KEYS, "config.data.synthetic"))
    num_cases = int(kw.pop("num_cases", 1))
    val_cases = int(kw.pop("val_cases", 0))
    base_seed = int(kw.pop("seed", 0))
    if "dims" in kw:
        kw["dims"] = tuple(kw["dims"])
    if "radius_range" in kw:
        kw["radius_range"] = tuple(kw["radius_range"])
    make = lambda s: volume.generate_synthetic(volume.SyntheticSpec(seed=s, **kw))
    train_set = [make(base_seed + i) for i in range(num_cases)]
    val_set = [make(base_seed + 10_000 + j) for j in range(val_cases)] or None
    return train_set, val_set


def _dir_pairs(path: str):
    d = Path(path)
    if not d.is_dir():
        raise ConfigError(f"data directory not found: {path}")
    pairs = []
    for img in sorted(d.glob("*_img.rvol")):
        lbl = d / img.name.replace("_img.rvol", "_lbl.rvol")
        if not lbl.is_file():
            raise ConfigError(f"no labels for {img.name} (expected {lbl.name})")
        pairs.append((volume.read_volume(img), volume.read_labels(lbl)))
    if not pairs:
        raise ConfigError(f"no *_img.rvol cases in {path}")
    return pairs


def datasets_from(section: dict):
    _strict_section(section, {"synthetic", "train_dir", "val_dir"}, "config.data")
    if "synthetic" in section:
        return _synthetic_pairs(section["synthetic"])
    if "train_dir" not in section:
        raise ConfigError("config.data needs either 'synthetic' or 'train_dir'")
    train_set = _dir_pairs(section["train_dir"])
    val_set = _dir_pairs(section["val_dir"]) if "val_dir" in section else None
    return train_set, val_set


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    started = _utc_now()
    raw = load_config(args.config)
    model_section = dict(raw.get("model", {}))
    train_section = dict(raw.get("train", {}))
    if args.variant is not None:
        model_section["variant"] = args.variant
    if args.embed_dim is not None:
        model_section["embed_dim"] = args.embed_dim
    if args.window is not None:
        model_section["window"] = args.window
    if args.seed is not None:
        train_section["seed"] = args.seed
    if args.epochs is not None:
        train_section["epochs"] = args.epochs
    model_cfg = model_config_from(model_section)
    train_cfg = train_config_from(train_section)
    train_set, val_set = datasets_from(dict(raw.get("data", {})))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = training.train(train_cfg, model_cfg, train_set, val_set, out_dir=str(out))
    resolved = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "data": raw.get("data", {}),
    }
    write_manifest(
        out, "train", resolved, {"train_seed": train_cfg.seed},
        ["best.ckpt", "latest.ckpt", "train_log.csv"], started,
    )
    best = result.checkpoint
    print(
        f"trained {train_cfg.epochs} epochs, best val DSC {best.best_val_dsc:.4f} "
        f"at epoch {best.epoch}; outputs in {out}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    started = _utc_now()
    ckpt = training.load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    vol = volume.read_volume(args.input)
    roi = tuple(args.roi) if args.roi else vol.dims
    m = cfg.input_multiple
    bad = [r for r in roi if r % m != 0 or r < m]
    if bad:
        raise ConfigError(
            f"roi {roi} violates the model constraint: dims must be positive "
            f"multiples of {m} (see trace)"
        )
    model = lambda tile: topology.forward(cfg, ckpt.params, tile)
    logits = volume.sliding_window_infer(model, vol, roi, args.overlap)
    # argmax tie rule: the lowest class id wins
    pred = volume.LabelVolume(np.argmax(logits.data, axis=0), cfg.num_classes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    volume.write_labels(pred, out, spacing=vol.spacing)
    outputs = [out.name]
    if args.logits:
        volume.write_volume(logits, args.logits)
        outputs.append(Path(args.logits).name)
    write_manifest(
        out.parent, "predict",
        {"checkpoint": str(args.checkpoint), "input": str(args.input),
         "roi": list(roi), "overlap": args.overlap},
        {}, outputs, started,
    )
    print(f"wrote prediction {out}")
    return EXIT_OK


def _region_spec_for(args, gt_cases) -> metrics.RegionSpec:
    if args.regions == "brats":
        return metrics.brats_region_spec()
    if args.regions == "perclass":
        top = max(int(lab.data.max()) for _, lab in gt_cases)
        return metrics.perclass_region_spec(max(top + 1, 2))
    raw = json.loads(Path(args.regions).read_text())
    return metrics.RegionSpec(tuple((k, tuple(v)) for k, v in raw.items()))


def cmd_evaluate(args) -> int:
    started = _utc_now()
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    pred_files = {p.name: p for p in pred_dir.glob("*.rvol")}
    gt_files = {p.name: p for p in gt_dir.glob("*.rvol")}
    if set(pred_files) != set(gt_files):
        only_pred = sorted(set(pred_files) - set(gt_files))
        only_gt = sorted(set(gt_files) - set(pred_files))
        raise ConfigError(
            f"case filenames differ: only in predictions {only_pred}, "
            f"only in ground truth {only_gt}"
        )
    if not gt_files:
        raise ConfigError(f"no .rvol cases found in {gt_dir}")
    names = sorted(gt_files)
    gt_cases = [(n, volume.read_labels(gt_files[n])) for n in names]
    spec = _region_spec_for(args, gt_cases)

    def one(n_lab):
        name, gt_lab = n_lab
        pred_lab = volume.read_labels(pred_files[name], num_classes=gt_lab.num_classes)
        spacing = volume.read_label_spacing(gt_files[name])
        return metrics.evaluate_case(pred_lab, gt_lab, spec, spacing, case_id=name)

    workers = max(1, int(os.environ.get("HRST_NUM_THREADS", "1")))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(one, gt_cases))
    else:
        reports = [one(c) for c in gt_cases]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [reports[0].csv_header()]
    lines += [r.csv_row() for r in reports]
    cols = list(zip(*(r.csv_row().split(",")[1:] for r in reports)))
    mean_cells = ["mean"] + [str(float(np.mean([float(v) for v in col]))) for col in cols]
    lines.append(",".join(mean_cells))
    out.write_text("\n".join(lines) + "\n")
    write_manifest(
        out.parent, "evaluate",
        {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "regions": args.regions},
        {}, [out.name], started,
    )
    print("\n".join(lines))
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = topology.ModelConfig(
        variant=args.variant, embed_dim=args.embed_dim, patch_size=args.patch,
        window=args.window, heads=tuple(args.heads), in_channels=args.in_channels,
        num_classes=args.classes,
    )
    cfg.validate()
    report = topology.shape_trace(cfg, tuple(args.dims))
    print(topology.trace_text(report))
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = TINY_GRADCHECK_CONFIG
    report = training.finite_difference_check(
        cfg, seed=args.seed, tolerance=args.tolerance, num_samples=args.samples
    )
    print(report.text())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_synth(args) -> int:
    started = _utc_now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(args.count):
        spec = volume.SyntheticSpec(
            seed=args.seed + i, dims=tuple(args.dims), channels=args.channels,
            num_classes=args.classes, blobs_per_class=args.blobs,
            radius_range=tuple(args.radius), noise_sigma=args.sigma,
        )
        vol, lab = volume.generate_synthetic(spec)
        img_path = out / f"case{i:03d}_img.rvol"
        lbl_path = out / f"case{i:03d}_lbl.rvol"
        volume.write_volume(vol, img_path)
        volume.write_labels(lab, lbl_path)
        outputs += [img_path.name, lbl_path.name]
    write_manifest(
        out, "synth",
        {"seed": args.seed, "dims": list(args.dims), "channels": args.channels,
         "classes": args.classes, "blobs": args.blobs, "radius": list(args.radius),
         "sigma": args.sigma, "count": args.count},
        {"base_seed": args.seed}, outputs, started,
    )
    print(f"wrote {args.count} synthetic cases to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrstnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--variant", type=int, choices=(2, 3, 4))
    t.add_argument("--embed-dim", type=int, dest="embed_dim")
    t.add_argument("--window", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment a volume with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--roi", type=int, nargs=3)
    pr.add_argument("--overlap", type=float, default=0.5)
    pr.add_argument("--logits")
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="score predictions against ground truth")
    ev.add_argument("--pred-dir", required=True, dest="pred_dir")
    ev.add_argument("--gt-dir", required=True, dest="gt_dir")
    ev.add_argument("--out", required=True)
    ev.add_argument("--regions", default="brats",
                    help="'brats', 'perclass' or a JSON file of name -> label ids")
    ev.set_defaults(func=cmd_evaluate)

    tr = sub.add_parser("trace", help="print the shape/parameter trace")
    tr.add_argument("--variant", type=int, default=4, choices=(2, 3, 4))
    tr.add_argument("--embed-dim", type=int, default=96, dest="embed_dim")
    tr.add_argument("--patch", type=int, default=4)
    tr.add_argument("--window", type=int, default=4)
    tr.add_argument("--heads", type=int, nargs="+", default=[3, 6, 12, 24])
    tr.add_argument("--in-channels", type=int, default=4, dest="in_channels")
    tr.add_argument("--classes", type=int, default=4)
    tr.add_argument("--dims", type=int, nargs=3, default=[128, 128, 128])
    tr.add_argument("--json")
    tr.set_defaults(func=cmd_trace)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--samples", type=int, default=200)
    gc.set_defaults(func=cmd_gradcheck)

    sy = sub.add_parser("synth", help="generate synthetic volume/label cases")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32])
    sy.add_argument("--channels", type=int, default=1)
    sy.add_argument("--classes", type=int, default=2)
    sy.add_argument("--blobs", type=int, default=1)
    sy.add_argument("--radius", type=int, nargs=2, default=[3, 5])
    sy.add_argument("--sigma", type=float, default=0.1)
    sy.add_argument("--count", type=int, default=1)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except HRSTError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
