"""``protolab`` command line: synth, train, eval, predict, ablate.

Every subcommand reads one JSON config, applies ``--set key=value`` overrides
(dotted keys address nested sections), honours ``PROTOLAB_SEED``, and writes the
resolved config to ``<out>/config.resolved.json`` before doing any work.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .data import SynthConfig, load_split, save_mask, split_ids, synth_generate, write_dataset
from .encoder import ConfigError
from .metrics import evaluate
from .model import ABLATIONS, ModelConfig, PrototypeLab, load_checkpoint, param_count
from .training import TrainConfig, fit

log = logging.getLogger("protolab")

SEED_ENV = "PROTOLAB_SEED"
RESOLVED = "config.resolved.json"
ABLATION_HEADER = ("row", "config", "params", "mdsc", "miou", "hd")

DEFAULTS: dict = {
    "seed": 0,
    "image_size": 64,
    "dataset": None,
    "checkpoint": None,
    "images": None,
    "split": "test",
    "threshold": 0.5,
    "resume": None,
    "rows": [1, 2, 3, 4, 5, 6],
    "synth": {k: v for k, v in asdict(SynthConfig()).items() if k != "seed"},
    "model": {"width": 16, "proto_dim": 32, "row": 6, "blocks": 2, "pool_mode": "normalized"},
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
}


class UsageError(Exception):
    """Bad config or arguments; reported without a traceback."""


# ------------------------------------------------------------------ config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict) and not isinstance(val, dict):
            raise UsageError(f"config key {path + key!r} must be an object")
        if isinstance(out[key], dict):
            out[key] = _merge(out[key], val, f"{path}{key}.")
        else:
            out[key] = val
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    *parents, leaf = key.strip().split(".")
    node = cfg
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if leaf not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[leaf] = _parse_value(raw)


def resolve_config(path, overrides=(), env=None) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- ``PROTOLAB_SEED``."""
    env = os.environ if env is None else env
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"malformed config {path}: {e}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    cfg = _merge(DEFAULTS, user)
    for a in overrides:
        apply_override(cfg, a)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    _validate(cfg)
    return cfg


def _build(cls, section: dict, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid {cls.__name__}: {e}") from None


def synth_config(cfg: dict) -> SynthConfig:
    sc = _build(SynthConfig, cfg["synth"], seed=cfg["seed"])
    try:
        sc.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return sc


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"], seed=cfg["seed"])


def model_config(cfg: dict, row: int | None = None) -> ModelConfig:
    m = dict(cfg["model"])
    configured = m.pop("row")
    row = configured if row is None else row
    pool_mode = m.pop("pool_mode", "normalized")
    if row not in ABLATIONS:
        raise UsageError(f"model.row must be one of {sorted(ABLATIONS)}, got {row!r}")
    try:
        return replace(ModelConfig.desk(**m, row=row), pool_mode=pool_mode)
    except TypeError as e:
        raise UsageError(f"invalid model section: {e}") from None


def _validate(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int):
        raise UsageError(f"seed must be an integer, got {cfg['seed']!r}")
    if not isinstance(cfg["image_size"], int) or cfg["image_size"] <= 0 or cfg["image_size"] % 32:
        raise UsageError(f"image_size must be a positive multiple of 32, got {cfg['image_size']!r}")
    try:
        synth_config(cfg)
        train_config(cfg)
        model_config(cfg)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    bad_rows = [r for r in cfg["rows"] if r not in ABLATIONS]
    if bad_rows:
        raise UsageError(f"rows must be drawn from {sorted(ABLATIONS)}, got {bad_rows}")


def _prepare_out(out, force: bool, must_be_empty: bool) -> Path:
    out = Path(out)
    if must_be_empty and out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: dict, out: Path) -> None:
    (out / RESOLVED).write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _need(cfg: dict, key: str, what: str) -> Path:
    if not cfg.get(key):
        raise UsageError(f"config key {key!r} ({what}) is required for this command")
    p = Path(cfg[key])
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: dict, out: Path) -> Path:
    samples = synth_generate(synth_config(cfg))
    splits = split_ids([s.id for s in samples], cfg["seed"])
    write_dataset(samples, out, splits)
    log.info("wrote %d samples to %s", len(samples), out)
    return out


def _splits(cfg: dict):
    root = _need(cfg, "dataset", "dataset directory")
    size = cfg["image_size"]
    return (load_split(root, "train", size), load_split(root, "val", size), load_split(root, "test", size))


def cmd_train(cfg: dict, out: Path) -> Path:
    train, val, _ = _splits(cfg)
    model = PrototypeLab(model_config(cfg), seed=cfg["seed"])
    resume = cfg.get("resume")
    if resume and not Path(resume).is_dir():
        raise UsageError(f"resume checkpoint not found: {resume}")
    result = fit(model, train, val, train_config(cfg), out, resume_from=resume)
    log.info("best checkpoint: %s", result.best_checkpoint)
    return result.best_checkpoint


def cmd_eval(cfg: dict, out: Path) -> Path:
    ckpt = _need(cfg, "checkpoint", "checkpoint")
    root = _need(cfg, "dataset", "dataset directory")
    samples = load_split(root, cfg["split"], cfg["image_size"])
    report = evaluate(load_checkpoint(ckpt), samples, cfg["threshold"])
    path = report.to_csv(out / "report.csv")
    log.info("mDSC %.4f over %d images", report.means["dsc"], len(report.rows))
    return path


def cmd_predict(cfg: dict, out: Path) -> Path:
    ckpt = _need(cfg, "checkpoint", "checkpoint")
    images = _need(cfg, "images", "images directory")
    model = load_checkpoint(ckpt)
    (out / "masks").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    from PIL import Image

    paths = sorted(images.glob("*.png"))
    if not paths:
        raise UsageError(f"no PNG images in {images}")
    for p in paths:
        with Image.open(p) as im:
            w, h = im.size
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        img = rgb.transpose(2, 0, 1)
        size = cfg["image_size"]
        if (h, w) != (size, size):
            img = np.asarray(Image.fromarray((rgb * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR),
                             dtype=np.float32).transpose(2, 0, 1) / 255.0
        prob = model.predict(img[None])[0, 0]
        if (h, w) != (size, size):
            prob = np.asarray(Image.fromarray(prob.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        save_mask(prob, out / "masks" / p.name, cfg["threshold"], image=rgb.transpose(2, 0, 1),
                  overlay_path=out / "overlays" / p.name)
    log.info("wrote %d masks to %s", len(paths), out / "masks")
    return out / "masks"


def cmd_ablate(cfg: dict, out: Path) -> Path:
    train, val, test = _splits(cfg)
    tcfg = train_config(cfg)
    rows = []
    for row in cfg["rows"]:
        name = ABLATIONS[row][0]
        model = PrototypeLab(model_config(cfg, row), seed=cfg["seed"])
        result = fit(model, train, val, tcfg, out / f"row{row}")
        report = evaluate(load_checkpoint(result.best_checkpoint), test, cfg["threshold"])
        m = report.means
        rows.append((row, name, param_count(model), m["dsc"], m["iou"], m["hd"]))
        log.info("#%d %s params %d mDSC %.4f", row, name, rows[-1][2], m["dsc"])
    path = out / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(float(v)) for v in r[3:]])
    return path


COMMANDS = {
    "synth": (cmd_synth, True),
    "train": (cmd_train, False),
    "eval": (cmd_eval, False),
    "predict": (cmd_predict, False),
    "ablate": (cmd_ablate, False),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults used for missing keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value; dotted keys reach nested sections")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty output dir")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    fn, must_be_empty = COMMANDS[args.command]
    try:
        cfg = resolve_config(args.config, args.overrides)
        out = _prepare_out(args.out, args.force, must_be_empty)
        _write_resolved(cfg, out)
        fn(cfg, out)
    except (UsageError, ConfigError, FileNotFoundError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"protolab {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
