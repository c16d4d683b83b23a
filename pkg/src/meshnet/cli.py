"""Command-line entry point: ``meshnet {phantom,train,segment,evaluate,info}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import InvalidConfig, MeshNetError, SubvolumeTooLarge

log = logging.getLogger("meshnet")


def _triple(values):
    values = list(values)
    return tuple(values * 3) if len(values) == 1 else tuple(values)


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, write_dataset

    spec = PhantomSpec(dims=_triple(args.dims), count=args.count, intensity_noise=args.noise,
                       smoothing=args.smoothing, label_noise=args.label_noise, seed=args.seed)
    manifest = write_dataset(spec, args.out)
    print(f"wrote {len(manifest['pairs'])} phantoms to {args.out}")
    return 0


def _load_pairs(data_dir):
    from .volume import read_volume

    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    pairs = []
    for p in manifest["pairs"]:
        pairs.append((read_volume(os.path.join(data_dir, p["image"])),
                      read_volume(os.path.join(data_dir, p["labels"]))))
    return pairs


def _run_config(args):
    from .config import RunConfig, parse_overrides

    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def cmd_train(args) -> int:
    from .models import build_model
    from .sampler import SamplerConfig
    from .trainer import JsonlLog, TrainConfig, train

    cfg = _run_config(args)
    seed = cfg["seed"]
    spec = build_model(cfg["model.name"], cfg["model.in_channels"], cfg["model.num_classes"],
                       cfg["model.dropout"], cfg["model.features"] or None)
    side = cfg["sampler.side"] or spec.side
    pairs = _load_pairs(args.data)
    val_idx = cfg.indices("data.validation")
    train_idx = cfg.indices("data.train") or [i for i in range(len(pairs)) if i not in val_idx]
    if set(train_idx) & set(val_idx):
        raise InvalidConfig("data.train and data.validation overlap")
    for i in train_idx + val_idx:
        if not 0 <= i < len(pairs):
            raise InvalidConfig(f"data index {i} out of range (have {len(pairs)} pairs)")
    sampler_cfg = SamplerConfig(side, cfg["sampler.sigma"], seed=seed)
    train_cfg = TrainConfig(cfg["train.batch_size"], cfg["train.batches"], cfg["train.lr"], cfg["train.beta1"],
                            cfg["train.beta2"], cfg["train.eps"], seed, cfg["train.val_every"],
                            cfg["train.val_subvolumes"], cfg["train.normalize"])
    if args.log and os.path.exists(args.log):
        os.remove(args.log)
    sink = JsonlLog(args.log) if args.log else None
    res = train(spec, [pairs[i] for i in train_idx], sampler_cfg, train_cfg,
                validation=[pairs[i] for i in val_idx], on_record=sink, checkpoint_path=args.checkpoint)
    if res.history:
        print(f"loss {res.history[0]['loss']:.4f} -> {res.history[-1]['loss']:.4f} "
              f"after {len(res.history)} mini-batches")
    print(f"checkpoint written to {args.checkpoint}")
    return 0


def cmd_segment(args) -> int:
    from .checkpoint import load_checkpoint, read_manifest
    from .sampler import plan_inference
    from .stitcher import segment_with_model, write_pgm_slices
    from .volume import LabelVolume, read_volume, write_volume

    cfg = _run_config(args)
    vol = read_volume(args.input)
    if isinstance(vol, LabelVolume):
        raise InvalidConfig(f"{args.input} holds labels, not intensities")
    manifest = read_manifest(args.checkpoint)
    trained_side = manifest.get("extra", {}).get("sampler", {}).get("side")
    side = cfg["sampler.side"] or trained_side or manifest["spec"]["side"]
    if any(side > d for d in vol.dims):
        raise SubvolumeTooLarge(f"subvolume side {side} exceeds volume dims {vol.dims}")
    spec, params, _ = load_checkpoint(args.checkpoint)
    n = cfg["infer.subvolumes"] if args.subvolumes is None else args.subvolumes
    seed = cfg["seed"] if cfg["seed"] is not None else 0
    plan = plan_inference(vol.dims, side, n, seed=seed, sigma=cfg["sampler.sigma"])
    workers = args.workers or cfg["infer.workers"]
    labels = segment_with_model(spec, params, vol, plan, cfg["infer.batch_size"], workers, cfg["train.normalize"])
    write_volume(labels, args.output)
    print(f"segmented {len(plan.refs)} subvolumes ({len(plan.grid)} grid + {len(plan.sampled)} sampled) "
          f"-> {args.output}")
    if args.pgm:
        for p in write_pgm_slices(labels, args.pgm):
            print(f"slice {p}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .volume import read_volume

    pred, truth = read_volume(args.pred), read_volume(args.truth)
    report = evaluate(pred, truth)
    print(report.to_text())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    return 0


def cmd_info(args) -> int:
    from .models import build_model, layer_table, parameter_count, receptive_field

    spec = build_model(args.variant, args.in_channels, args.classes, 0.0, args.features)
    rx, ry, rz = receptive_field(spec)
    rf = str(rx) if rx == ry == rz else f"{rx}x{ry}x{rz}"
    print(f"model: {spec.name}")
    print(f"parameters: {parameter_count(spec)}")
    print(f"receptive field: {rf}")
    print(layer_table(spec))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=5)
    ph.add_argument("--dims", type=int, nargs="+", default=[64])
    ph.add_argument("--noise", type=float, default=0.08)
    ph.add_argument("--smoothing", type=float, default=0.0)
    ph.add_argument("--label-noise", type=float, default=0.0)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_phantom)

    def config_args(sp):
        sp.add_argument("--config", help="INI run-config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")

    tr = sub.add_parser("train", help="train a model on a phantom dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--log", help="line-delimited JSON loss log")
    config_args(tr)
    tr.set_defaults(func=cmd_train)

    sg = sub.add_parser("segment", help="segment a volume with a trained checkpoint")
    sg.add_argument("--checkpoint", required=True)
    sg.add_argument("--input", required=True)
    sg.add_argument("--output", required=True)
    sg.add_argument("--subvolumes", type=int)
    sg.add_argument("--seed", type=int)
    sg.add_argument("--workers", type=int)
    sg.add_argument("--pgm", metavar="PREFIX", help="also write mid-slice PGM images")
    config_args(sg)
    sg.set_defaults(func=cmd_segment)

    ev = sub.add_parser("evaluate", help="compare a segmentation with ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--csv", help="also write the report as CSV")
    ev.set_defaults(func=cmd_evaluate)

    inf = sub.add_parser("info", help="parameter count, receptive field and layer table")
    inf.add_argument("variant", help="meshnet-64, meshnet-68, meshnet-32 or unet")
    inf.add_argument("--in-channels", type=int, default=1)
    inf.add_argument("--classes", type=int, default=3)
    inf.add_argument("--features", type=int)
    inf.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MeshNetError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
