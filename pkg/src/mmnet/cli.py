"""Command-line entry point: ``python -m mmnet <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mmnet import data, evaluation, mmt, supervision
from mmnet.autodiff import Tensor
from mmnet.config import Config, ConfigError, build_config, config_to_kv, format_kv, load_config, parse_kv_text
from mmnet.model import MMNet
from mmnet.tps import TPSError, warp_image

log = logging.getLogger("mmnet")


class CLIError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    flag_keys = {"lr": "train.lr", "max_iters": "train.max_iters", "batch_size": "train.batch_size",
                 "seed": "train.seed", "alpha": "eval.alpha", "normalizer": "eval.normalizer",
                 "tps_lambda": "tps.lambda"}
    for attr, key in flag_keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    return out


def _config(args) -> Config:
    cfg = load_config(getattr(args, "config", None), _overrides(args))
    env = os.environ.get("MMNET_SEED")
    if env is not None and getattr(args, "seed", None) is None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"MMNET_SEED must be an integer, got {env!r}") from None
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def load_model(checkpoint, overrides: dict[str, str] | None = None) -> tuple[MMNet, Config]:
    d = _require_dir(checkpoint, "checkpoint directory")
    cfg_path = d / mmt.CONFIG
    values = parse_kv_text(cfg_path.read_text(), str(cfg_path)) if cfg_path.is_file() else {}
    values.update(overrides or {})
    cfg = build_config(values)
    arrays = mmt.load_checkpoint(d)
    model = MMNet(cfg.model, {k: Tensor(v) for k, v in arrays.items()})
    expected = MMNet(cfg.model, seed=0).params
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise mmt.FormatError(f"checkpoint lacks parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for k, p in expected.items():
        if arrays[k].shape != p.shape:
            raise mmt.FormatError(f"{k}: checkpoint shape {arrays[k].shape} vs model {p.shape}")
    return model, cfg


def _match_scale(model: MMNet, requested) -> int:
    if requested is not None:
        s = int(requested)
    elif model.config.scale is not None:
        s = model.config.scale
    else:
        s = min(model.config.scales)
        log.warning("no matching scale selected in the checkpoint; using the finest scale %d", s)
    if s not in model.config.scales:
        raise ConfigError(f"scale {s} not among model scales {model.config.scales}")
    return s


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set = data.load_dataset(_require_dir(args.manifest, "manifest"))
    if not train_set:
        raise CLIError("training manifest holds no usable pairs")
    dtype = np.dtype(cfg.train.dtype)
    model = MMNet(cfg.model, seed=cfg.train.seed, dtype=dtype)
    out = Path(args.out)
    text = format_kv(config_to_kv(cfg))
    log.info("training %d parameters on %d pairs for %d iterations", model.num_parameters(), len(train_set),
             cfg.train.max_iters)
    supervision.train(model, train_set, cfg.train, out, text)
    if args.val_manifest:
        val = data.load_dataset(_require_dir(args.val_manifest, "validation manifest"))
        matches = evaluation.predict_all(model, val)
        best = evaluation.select_scale(matches, cfg.eval.select_alpha, cfg.eval.normalizer)
        log.info("selected scale %d on %d validation pairs", best, len(val))
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, scale=best))
        (out / "final" / mmt.CONFIG).write_text(format_kv(config_to_kv(cfg)))
    print(out / "final")
    return 0


def _scale_override(args) -> dict[str, str]:
    return {} if args.scale is None else {"model.scale": str(args.scale)}


def cmd_match(args) -> int:
    model, _ = load_model(args.checkpoint, _scale_override(args))
    samples = data.load_dataset(_require_dir(args.manifest, "manifest"))
    s = _match_scale(model, args.scale)
    m = evaluation.predict_all(model, samples, (s,), log.info)[s]
    evaluation.write_predictions(args.out, m)
    return 0


def _categories(manifest) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    d = _require_dir(manifest, "manifest")
    cats, boxes = {}, {}
    for a in data.parse_annotations(d / "annotations.csv", d):
        cats[a.pair_id] = a.category
        if a.tgt_bbox is not None:
            size = a.tgt_size or data.CANVAS
            boxes[a.pair_id] = data.scale_points(a.tgt_bbox.reshape(2, 2), size, data.CANVAS).reshape(4)
    return cats, boxes


def _with_boxes(m: evaluation.Matches, boxes: dict) -> evaluation.Matches:
    if boxes and all(p in boxes for p in m.pair_ids):
        m.bboxes = [boxes[p] for p in m.pair_ids]
    return m


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise CLIError("eval needs exactly one of --checkpoint or --predictions")
    cfg = _config(args)
    extra = {}
    if args.predictions:
        cats, boxes = _categories(args.manifest) if args.manifest else ({}, {})
        m = _with_boxes(evaluation.read_predictions(args.predictions, cats), boxes)
    else:
        if not args.manifest:
            raise CLIError("eval --checkpoint needs --manifest")
        model, _ = load_model(args.checkpoint, _scale_override(args))
        samples = data.load_dataset(_require_dir(args.manifest, "manifest"))
        s = _match_scale(model, args.scale)
        m = evaluation.predict_all(model, samples, (s,), log.info)[s]
        extra["scale"] = s
    result = m.pck(cfg.eval.alpha, cfg.eval.normalizer)
    print(result.table(), file=sys.stderr)
    if args.out:
        evaluation.write_json(args.out, result, extra)
    else:
        d = result.to_dict()
        d.update(extra)
        import json

        print(json.dumps(d, indent=2))
    return 0


def cmd_curve(args) -> int:
    cfg = _config(args)
    cats, boxes = _categories(args.manifest) if args.manifest else ({}, {})
    m = _with_boxes(evaluation.read_predictions(args.predictions, cats), boxes)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(cfg.eval.alphas)
    curve = evaluation.pck_curve(m.pred, m.gt, alphas, normalizer=cfg.eval.normalizer, bboxes=m.bboxes or None)
    if args.out:
        evaluation.write_curve(args.out, curve)
    else:
        print("alpha,pck")
        for a, v in curve:
            print(f"{a:g},{v!r}")
    return 0


def cmd_warp(args) -> int:
    cfg = _config(args)
    d = _require_dir(args.manifest, "manifest")
    anns = {a.pair_id: a for a in data.parse_annotations(d / "annotations.csv", d)}
    m = evaluation.read_predictions(args.predictions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for pid, src, pred in zip(m.pair_ids, m.src, m.pred):
        if pid not in anns:
            log.error("pair %s is not in the manifest", pid)
            failed += 1
            continue
        smp = data.load_pair(anns[pid], d)
        try:
            warped = warp_image(smp.source.astype(np.float64), src, pred, cfg.eval.tps_lambda)
        except TPSError as exc:
            log.error("pair %s: %s", pid, exc)
            failed += 1
            continue
        data.save_image(out / f"{pid}_warped.ppm", np.clip(warped, 0.0, 1.0))
    if failed:
        raise CLIError(f"{failed} pair(s) could not be warped")
    return 0


def cmd_selftest(args) -> int:
    from mmnet import selftest

    return 0 if selftest.run(args.seed or 0) else 1


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(seed=args.seed or 0, warp=args.warp, magnitude=args.magnitude,
                              keypoints=args.keypoints, pairs=args.pairs)
    data.write_dataset(args.out, data.generate_synthetic(spec))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmnet", description="Multi-scale matching network for keypoint correspondence.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        sp.add_argument("--seed", type=int)
        if train:
            sp.add_argument("--lr", type=float)
            sp.add_argument("--max-iters", type=int)
            sp.add_argument("--batch-size", type=int)
        else:
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--normalizer", choices=("image", "bbox"))

    sp = sub.add_parser("train", help="train on a manifest; writes a log and checkpoints")
    common(sp, train=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--val-manifest", help="pairs used to pick the matching scale")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PCK of a checkpoint or of a predictions CSV")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions")
    sp.add_argument("--manifest")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--out", help="JSON output path (default: stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("match", help="write keypoint predictions for a manifest")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scale", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("warp", help="TPS-warp source images onto predicted keypoints")
    common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--tps-lambda", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_warp)

    sp = sub.add_parser("curve", help="PCK-alpha curve of a predictions CSV")
    common(sp)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--alphas", help="comma separated, ascending")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("selftest", help="run the built-in oracle and gradient checks")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("synth", help="write a synthetic manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pairs", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--warp", default="tps", choices=("tps", "affine", "identity", "translation"))
    sp.add_argument("--magnitude", type=float, default=1.0)
    sp.add_argument("--keypoints", type=int, default=10)
    sp.set_defaults(func=cmd_synth)
    return p


ERRORS = (ConfigError, CLIError, FileNotFoundError, ValueError, OSError, mmt.FormatError, data.PPMError, TPSError,
          supervision.TrainingError, KeyError)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports unknown flags this way
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"mmnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
