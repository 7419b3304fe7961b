"""``cxgan`` command line: synth, train, explain, evaluate, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .checkpoint import file_hash, load_checkpoint
from .core import (
    ConfigError,
    ContractError,
    CxError,
    DataError,
    DatasetSplit,
    Image,
    Label,
    LossWeights,
    MetricError,
    RangeTag,
    SchemeError,
    StateError,
    to_model_range,
)
from .evaluation import LITERAL_THRESHOLD, MetricsReport, comparison_table, evaluate_dataset
from .explain import explain_many
from .imgio import read_png01, write_f32, write_mask_png, write_panel, write_png16
from .ingest import DatasetLayout, PreprocessConfig, load_dataset
from .nets import DiscriminatorSpec, GeneratorSpec, Scheme, scaled_specs
from .syndata import SynthConfig, dataset_hash, export_dataset, generate_dataset, read_export
from .train import EarlyStopConfig, OptimizerConfig, TrainConfig, train_cascaded, train_integrated

log = logging.getLogger("cxgan")

DEVICE_ENV = "CXGAN_DEVICE"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STATE = 0, 2, 3, 4

# name -> (type, default); ``None`` defaults mean "derive"
KEYS: dict[str, tuple[type, Any]] = {
    "seed": (int, 0),
    "deterministic": (bool, True),
    "out": (str, None),
    # synthetic data
    "n": (int, 10000),
    "size": (int, 128),
    "noise_sigma": (float, 1.0),
    "blur_sigma": (float, 2.5),
    "circle_radius": (int, None),
    "circle_amplitude": (float, 0.8),
    "max_offset": (int, 5),
    # data on disk
    "data": (str, None),
    "pipeline": (str, "none"),
    "augment": (bool, False),
    "output_size": (int, None),
    "mask_dir": (str, None),
    "split": (str, "test"),
    # training
    "scheme": (str, None),
    "epochs": (int, 100),
    "batch_size": (int, 1),
    "learning_rate": (float, 2e-4),
    "beta1": (float, 0.5),
    "beta2": (float, 0.9),
    "patience": (int, 10),
    "early_stop_metric": (str, "auto"),
    "lambda_cc": (float, 10.0),
    "lambda_l1": (float, 100.0),
    "base_channels": (int, None),
    "depth": (int, None),
    "disc_layers": (int, None),
    "non_saturating": (bool, True),
    "literal_backward_cycle": (bool, False),
    "buffer_capacity": (int, 50),
    "val_fraction": (float, 0.1),
    "max_val": (int, 64),
    "checkpoint_every": (int, 1),
    "save_samples": (bool, True),
    "resume": (str, None),
    # inference / evaluation
    "checkpoint": (list, None),
    "input": (str, None),
    "threshold_fraction": (float, 0.5),
    "effect_sign": (float, -1.0),
    "panels": (int, 8),
}

PROFILES: dict[str, dict[str, Any]] = {
    "desk32": {"n": 500, "size": 32, "epochs": 100, "batch_size": 1,
               "base_channels": 16, "depth": 3, "disc_layers": 2},
    "desk64": {"n": 2000, "size": 64, "epochs": 100, "batch_size": 1,
               "base_channels": 16, "depth": 4, "disc_layers": 3},
}


def _coerce(key: str, value: Any) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown configuration key {key!r}")
    typ, _ = KEYS[key]
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if typ is list:
            return [str(v) for v in value] if isinstance(value, (list, tuple)) else [str(value)]
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def resolve_config(flags: dict[str, Any], config_path: Optional[str] = None,
                   profile: Optional[str] = None) -> dict[str, Any]:
    """Defaults, then profile, then config file, then explicit flags."""
    cfg = {k: d for k, (_, d) in KEYS.items()}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg.update(PROFILES[profile])
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        for k, v in loaded.items():
            cfg[k] = _coerce(k, v)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return cfg


def select_device() -> str:
    name = os.environ.get(DEVICE_ENV, "cpu")
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"{DEVICE_ENV}={name!r} is not a torch device") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"{DEVICE_ENV}={name!r} but CUDA is not available")
    return str(dev)


def _require(cfg: dict, key: str) -> Any:
    if cfg.get(key) is None:
        raise ConfigError(f"missing required setting --{key.replace('_', '-')}")
    return cfg[key]


def _write_snapshot(out: Path, command: str, cfg: dict, extra: Optional[dict] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "config": cfg, **(extra or {})}
    (out / "run_config.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def _synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        image_size=cfg["size"], n_samples=cfg["n"], noise_sigma=cfg["noise_sigma"],
        blur_sigma=cfg["blur_sigma"], circle_radius=cfg["circle_radius"],
        circle_amplitude=cfg["circle_amplitude"], max_offset=cfg["max_offset"], seed=cfg["seed"],
    )


def load_data(cfg: dict, require_gt: bool = False) -> DatasetSplit:
    """Synthetic export (has ``manifest.json``) or a positive/negative folder tree."""
    root = Path(_require(cfg, "data"))
    if not root.is_dir():
        raise DataError(f"data path {root} does not exist")
    if (root / "manifest.json").exists():
        split, _ = read_export(root, require_gt=require_gt)
        return split
    presets = {"cxr": PreprocessConfig.cxr, "brats": PreprocessConfig.brats}
    if cfg["pipeline"] not in ("none", *presets):
        raise ConfigError(f"--pipeline must be none, cxr or brats, got {cfg['pipeline']!r}")
    pre = presets.get(cfg["pipeline"])
    if pre is None:
        pcfg = PreprocessConfig(output_size=cfg["output_size"])
    else:
        pcfg = pre(augment=cfg["augment"], output_size=cfg["output_size"])
    return load_dataset(DatasetLayout(root, mask_dir=cfg["mask_dir"]), pcfg, seed=cfg["seed"])


def _specs(cfg: dict, size: int) -> tuple[GeneratorSpec, DiscriminatorSpec]:
    g, d = scaled_specs(size, depth=cfg["depth"])
    base = cfg["base_channels"] or g.base_channels
    layers = cfg["disc_layers"] or d.n_layers
    return GeneratorSpec(size, base, g.depth), DiscriminatorSpec(size, base, layers)


def _data_size(split: DatasetSplit, cfg: dict) -> int:
    if split.transform is not None:
        return _require(cfg, "output_size")
    return split.train[0].image.shape[0]


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    """Generate a synthetic disk dataset and export it."""
    out = Path(_require(cfg, "out"))
    scfg = _synth_config(cfg)
    split = generate_dataset(scfg)
    export_dataset(split, out, scfg)
    digest = dataset_hash(split)
    _write_snapshot(out, "synth", cfg, {"dataset_hash": digest})
    print(f"wrote {len(split.train)} train / {len(split.test)} test samples to {out} (hash {digest[:16]})")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    """Train a model (integrated or cascaded) on a dataset."""
    out = Path(_require(cfg, "out"))
    scheme = cfg["scheme"] or "integrated"
    if scheme not in ("integrated", "cascaded"):
        raise ConfigError(f"--scheme must be integrated or cascaded, got {scheme!r}")
    split = load_data(cfg)
    size = _data_size(split, cfg)
    gspec, dspec = _specs(cfg, size)
    weights = LossWeights(cfg["lambda_cc"], cfg["lambda_l1"])
    opt = OptimizerConfig(cfg["learning_rate"], cfg["beta1"], cfg["beta2"], cfg["batch_size"])
    stop = EarlyStopConfig(cfg["patience"], cfg["early_stop_metric"])
    tcfg = TrainConfig(
        max_epochs=cfg["epochs"], seed=cfg["seed"], deterministic=cfg["deterministic"],
        non_saturating=cfg["non_saturating"], literal_backward_cycle=cfg["literal_backward_cycle"],
        buffer_capacity=cfg["buffer_capacity"], val_fraction=cfg["val_fraction"], max_val=cfg["max_val"],
        run_dir=str(out), checkpoint_every=cfg["checkpoint_every"], save_samples=cfg["save_samples"],
        resume=cfg["resume"], device=select_device(),
    )
    _write_snapshot(out, "train", cfg)
    if scheme == "integrated":
        bundle = train_integrated(split, gspec, dspec, weights, opt, stop, tcfg, cfg)
        print(f"integrated: best epoch {bundle.epoch}, checkpoint {out / 'best.ckpt'}")
    else:
        res = train_cascaded(split, gspec, dspec, weights, opt, stop, tcfg, cfg)
        print(f"cascaded: phase 1 best epoch {res.ci.epoch}, phase 2 best epoch {res.rgan.epoch}, "
              f"{len(res.pairs)} synthesized pairs; checkpoint {out / 'phase2_rgan' / 'best.ckpt'}")
    return EXIT_OK


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint file or a run directory (integrated or cascaded layout)."""
    p = Path(path)
    if p.is_dir():
        for cand in (p / "best.ckpt", p / "phase2_rgan" / "best.ckpt"):
            if cand.exists():
                return cand
        raise StateError(f"no best.ckpt under run directory {p}")
    if not p.exists():
        raise StateError(f"checkpoint {p} does not exist")
    return p


def _load_bundle(path):
    ckpt = resolve_checkpoint(path)
    bundle = load_checkpoint(ckpt)
    dev = select_device()
    for net in bundle.networks().values():
        net.to(dev)
    return bundle, ckpt, file_hash(ckpt)


def _check_scheme(requested: Optional[str], actual: Scheme) -> None:
    if requested is None:
        return
    ok = {"integrated": (Scheme.INTEGRATED,), "cascaded": (Scheme.CASCADED_RGAN, Scheme.CASCADED_CI)}
    if requested not in ok:
        raise ConfigError(f"--scheme must be integrated or cascaded, got {requested!r}")
    if actual not in ok[requested]:
        raise SchemeError(f"checkpoint holds a {actual.value} model, not {requested}")


def _one_checkpoint(cfg: dict) -> str:
    ck = _require(cfg, "checkpoint")
    if len(ck) != 1:
        raise ConfigError("this command takes exactly one --checkpoint")
    return ck[0]


def cmd_explain(cfg: dict) -> int:
    """Write counterfactuals and attribution maps for images."""
    out = Path(_require(cfg, "out"))
    src = Path(_require(cfg, "input"))
    bundle, ckpt, digest = _load_bundle(_one_checkpoint(cfg))
    _check_scheme(cfg["scheme"], bundle.scheme)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
    elif src.exists():
        files = [src]
    else:
        raise DataError(f"input {src} does not exist")
    if not files:
        raise DataError(f"no PNG images in {src}")
    images = []
    for f in files:
        arr = read_png01(f)
        if arr.shape != (bundle.input_size, bundle.input_size):
            raise DataError(f"{f}: image is {arr.shape[0]}x{arr.shape[1]}, checkpoint expects "
                            f"{bundle.input_size}x{bundle.input_size}")
        images.append(to_model_range(Image(arr)))
    t = cfg["threshold_fraction"]
    out.mkdir(parents=True, exist_ok=True)
    for f, ex in zip(files, explain_many(bundle, images, t)):
        stem = f.stem
        write_f32(out / f"{stem}_map.f32", ex.map.data)
        write_png16(out / f"{stem}_cf.png", (ex.counterfactual.data + 1.0) / 2.0)
        write_mask_png(out / f"{stem}_mask.png", ex.mask.data)
        sidecar = {
            "source": str(f), "checkpoint": str(ckpt), "checkpoint_hash": digest,
            "scheme": bundle.scheme.value, "threshold_fraction": t,
            "shape": list(ex.map.shape), "map_dtype": "float32-le", "map_range": "[-2, 2]",
            "counterfactual_range": "storage01", **ex.meta,
        }
        (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    _write_snapshot(out, "explain", cfg, {"checkpoint_hash": digest})
    print(f"explained {len(files)} image(s) into {out}")
    return EXIT_OK


def _evaluate_one(cfg: dict, ck: str, split: DatasetSplit) -> tuple[MetricsReport, Any]:
    bundle, ckpt, digest = _load_bundle(ck)
    samples = getattr(split, cfg["split"])
    report = evaluate_dataset(bundle, samples, cfg["threshold_fraction"], digest, cfg["effect_sign"])
    report.provenance["checkpoint"] = str(ckpt)
    return report, bundle


def cmd_evaluate(cfg: dict) -> int:
    """Score a checkpoint against ground-truth masks."""
    out = Path(_require(cfg, "out"))
    if cfg["split"] not in ("train", "test"):
        raise ConfigError(f"--split must be train or test, got {cfg['split']!r}")
    split = load_data(cfg)
    report, bundle = _evaluate_one(cfg, _one_checkpoint(cfg), split)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    table = report.summary_table(_method_name(bundle.scheme))
    (out / "summary.txt").write_text(table)
    (out / "aggregates.json").write_text(json.dumps(
        {"aggregates": report.aggregates, "provenance": report.provenance,
         "skipped": report.skipped, "literal_threshold": LITERAL_THRESHOLD}, indent=1, sort_keys=True) + "\n")
    _write_snapshot(out, "evaluate", cfg, {"checkpoint_hash": report.provenance["checkpoint_hash"]})
    print(table, end="")
    if report.skipped:
        print(f"{len(report.skipped)} positive sample(s) skipped for missing ground truth", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _method_name(scheme: Scheme) -> str:
    return {
        Scheme.INTEGRATED: "CX-GAN (integrated)",
        Scheme.CASCADED_RGAN: "Cascaded (CycleGAN + RGAN)",
        Scheme.CASCADED_CI: "CycleGAN (subtraction)",
    }[scheme]


def cmd_report(cfg: dict) -> int:
    """Evaluate one or more checkpoints side by side and write per-sample panels."""
    out = Path(_require(cfg, "out"))
    if cfg["split"] not in ("train", "test"):
        raise ConfigError(f"--split must be train or test, got {cfg['split']!r}")
    split = load_data(cfg)
    reports: dict[str, MetricsReport] = {}
    out.mkdir(parents=True, exist_ok=True)
    for ck in _require(cfg, "checkpoint"):
        report, bundle = _evaluate_one(cfg, ck, split)
        name = _method_name(bundle.scheme)
        if name in reports:
            name = f"{name} [{Path(ck).name}]"
        reports[name] = report
        slug = bundle.scheme.value
        report.to_csv(out / f"metrics_{slug}.csv")
        _panels(bundle, split, cfg, out / "panels" / slug)
    table = comparison_table(reports)
    (out / "summary.txt").write_text(table)
    _write_snapshot(out, "report", cfg, {"checkpoint_hashes": [r.provenance["checkpoint_hash"]
                                                                for r in reports.values()]})
    print(table, end="")
    return EXIT_OK


def _panels(bundle, split: DatasetSplit, cfg: dict, out: Path) -> None:
    samples = [s for s in getattr(split, cfg["split"]) if s.label is Label.POSITIVE][: cfg["panels"]]
    if not samples:
        return
    images = [s.image if s.image.range_tag is RangeTag.MODEL11 else to_model_range(s.image) for s in samples]
    out.mkdir(parents=True, exist_ok=True)
    for s, ex in zip(samples, explain_many(bundle, images, cfg["threshold_fraction"])):
        tiles = [(ex.source.data + 1) / 2, ex.map.data, (ex.counterfactual.data + 1) / 2]
        signed = [False, True, False]
        if s.ground_truth is not None:
            tiles.append(np.asarray(s.ground_truth.data, dtype=np.float64))
            signed.append(True)
        write_panel(out / f"{s.sample_id.replace('/', '_')}.png", tiles, signed)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

# which flags each subcommand exposes
_FLAGS = {
    "synth": ["n", "size", "seed", "noise_sigma", "blur_sigma", "circle_radius", "circle_amplitude",
              "max_offset", "out"],
    "train": ["data", "scheme", "out", "seed", "deterministic", "epochs", "batch_size", "learning_rate",
              "beta1", "beta2", "patience", "early_stop_metric", "lambda_cc", "lambda_l1", "base_channels",
              "depth", "disc_layers", "non_saturating", "literal_backward_cycle", "buffer_capacity",
              "val_fraction", "max_val", "checkpoint_every", "save_samples", "resume", "pipeline",
              "augment", "output_size", "mask_dir"],
    "explain": ["checkpoint", "input", "out", "threshold_fraction", "scheme"],
    "evaluate": ["checkpoint", "data", "out", "split", "threshold_fraction", "effect_sign", "pipeline",
                 "output_size", "mask_dir", "seed"],
    "report": ["checkpoint", "data", "out", "split", "threshold_fraction", "effect_sign", "panels",
               "pipeline", "output_size", "mask_dir", "seed"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cxgan", description="Counterfactual explanation GAN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in _FLAGS.items():
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        p.add_argument("--config", help="JSON file of settings (flags override it)")
        p.add_argument("--profile", choices=sorted(PROFILES), help="desk-scale preset")
        for k in keys:
            typ, default = KEYS[k]
            flag = "--" + k.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=k, default=None, action=argparse.BooleanOptionalAction)
            elif typ is list:
                p.add_argument(flag, dest=k, default=None, action="append")
            else:
                p.add_argument(flag, dest=k, default=None, type=str, help=f"default: {default}")
    return parser


def run(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in KEYS}
    try:
        cfg = resolve_config(flags, args.config, args.profile)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except CxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
