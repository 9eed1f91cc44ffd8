"""glff command line: train / eval / process / visualize / ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every flag may also come from a flat YAML ``--config`` file (keys use
underscores, e.g. ``batch_size: 32``); flags win on conflict.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image, ImageDraw

from .backbone import to_image_tensor
from .df3 import ENCODER_ENV, PROCESS_PROTOCOLS, ProtocolConfig, process_directory
from .errors import ConfigError, EncoderNotFoundError
from .evaluation import protocol_report
from .imaging import list_images, load_image
from .manifest import build_manifest, read_manifest, write_manifest
from .model import VARIANTS, GLFFConfig, apply_variant, load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("glff")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SCALE_COLOURS = ((255, 64, 64), (64, 200, 255), (255, 220, 0), (120, 255, 120))

TRAIN_KEYS = ("batch_size", "learning_rate", "augment_prob", "augment_mode", "blur_sigma_range",
              "jpeg_quality_range", "max_steps", "checkpoint_every", "seed")
PROTOCOL_KEYS = ("jpeg_quality_range", "blur_sigma_range", "video_crf", "group_size", "fps",
                 "adv_steps", "adv_step_size", "adv_l2_budget", "adv_confidence", "mix_combos", "seed")


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"--config: file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"--config: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError("--config: expected a flat key: value mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def merged(args) -> dict:
    """Config-file values overridden by any flag that was given."""
    opts = load_config(getattr(args, "config", None))
    opts.update({k: v for k, v in vars(args).items() if v is not None and k not in ("func", "config")})
    return opts


def need(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def need_dir(opts, key):
    need(opts, key)
    if not Path(opts[key]).is_dir():
        raise UsageError(f"--{key.replace('_', '-')}: not a directory: {opts[key]}")


def need_file(opts, key):
    need(opts, key)
    if not Path(opts[key]).is_file():
        raise UsageError(f"--{key.replace('_', '-')}: file not found: {opts[key]}")


def model_config(opts) -> GLFFConfig:
    cfg = GLFFConfig.toy() if opts.get("toy") else GLFFConfig()
    if opts.get("pretrained") is False:
        cfg.backbone.pretrained = False
    if opts.get("variant"):
        cfg = apply_variant(cfg, opts["variant"])
    return cfg


def train_config(opts) -> TrainConfig:
    return TrainConfig(**{k: opts[k] for k in TRAIN_KEYS if k in opts})


def _train(opts, model_cfg=None):
    cfg = train_config(opts)
    out = Path(opts["out"])

    def progress(step, loss):
        if step % 10 == 0 or step == cfg.max_steps:
            print(f"step {step}/{cfg.max_steps} loss {loss:.4f}", flush=True)

    return train(opts["real_dir"], opts["fake_dir"], cfg, out, model_cfg or model_config(opts),
                 resume=opts.get("resume"), log_path=opts.get("log"), progress=progress)


def cmd_train(args):
    opts = merged(args)
    need_dir(opts, "real_dir")
    need_dir(opts, "fake_dir")
    need(opts, "out")
    if opts.get("resume"):
        need_file(opts, "resume")
    path = _train(opts)
    print(f"checkpoint written to {path}")
    return EXIT_OK


def _evaluate(ckpt, manifest, out_dir, batch_size=8, variant=None):
    records = read_manifest(manifest)
    model, _ = load_checkpoint(ckpt, variant)
    report = protocol_report(records, model, batch_size)
    report.write(out_dir)
    return report, model


def cmd_eval(args):
    opts = merged(args)
    need_file(opts, "ckpt")
    need_file(opts, "manifest")
    need(opts, "out_dir")
    report, _ = _evaluate(opts["ckpt"], opts["manifest"], opts["out_dir"], opts.get("batch_size", 8))
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_process(args):
    opts = merged(args)
    need(opts, "protocol", "out_dir")
    if opts["protocol"] not in PROCESS_PROTOCOLS:
        raise UsageError(f"--protocol must be one of {', '.join(PROCESS_PROTOCOLS)}")
    need_dir(opts, "in_dir")
    cfg = ProtocolConfig(**{k: opts[k] for k in PROTOCOL_KEYS if k in opts})
    wants_detector = opts["protocol"] == "antiforensics" or (
        opts["protocol"] == "mixed" and any("adversarial" in c for c in cfg.mix_combos))
    detector = None
    if wants_detector:
        need_file(opts, "ckpt")
        detector, _ = load_checkpoint(opts["ckpt"])
    paths = list_images(opts["in_dir"])
    if not paths:
        raise UsageError(f"--in-dir: no images in {opts['in_dir']}")
    out_dir = Path(opts["out_dir"])
    records = process_directory(paths, opts["protocol"], cfg, out_dir, opts.get("generator", "unknown"),
                                label=int(opts.get("label", 1)), detector=detector)
    n = write_manifest(records, out_dir / "manifest.jsonl")
    print(f"{n} images written to {out_dir}, manifest {out_dir / 'manifest.jsonl'}")
    return EXIT_OK


@torch.no_grad()
def visualize(model, image: np.ndarray, out_dir):
    """Write heatmap.png (channel mean of the fused map), overlay.png and proposals.json."""
    size = model.cfg.backbone.input_size
    x = to_image_tensor(image, size)[None]
    out = model(x)
    fmap = out.fused[0].mean(0).double().numpy()
    lo, hi = fmap.min(), fmap.max()
    norm = (fmap - lo) / (hi - lo) if hi > lo else np.zeros_like(fmap)
    heat = Image.fromarray(np.rint(norm * 255).astype(np.uint8)).resize((size, size), Image.NEAREST)

    base = Image.fromarray(np.rint(x[0].permute(1, 2, 0).numpy() * 255).astype(np.uint8))
    draw = ImageDraw.Draw(base)
    rects = []
    for p in out.proposals[0] if out.proposals else []:
        top, left, side = p.rect_image
        colour = SCALE_COLOURS[p.scale_tag % len(SCALE_COLOURS)]
        draw.rectangle((left, top, left + side - 1, top + side - 1), outline=colour, width=2)
        rects.append({"scale": p.scale_tag, "feature": list(p.rect_feature), "image": [top, left, side],
                      "score": None if np.isnan(p.score) else round(float(p.score), 6)})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heat.save(out_dir / "heatmap.png")
    base.save(out_dir / "overlay.png")
    (out_dir / "proposals.json").write_text(json.dumps(rects, indent=1) + "\n", encoding="utf-8")
    return rects


def cmd_visualize(args):
    opts = merged(args)
    need_file(opts, "ckpt")
    need_file(opts, "image")
    need(opts, "out")
    model, _ = load_checkpoint(opts["ckpt"])
    rects = visualize(model, load_image(opts["image"]), opts["out"])
    print(f"{len(rects)} patches drawn; outputs in {opts['out']}")
    return EXIT_OK


def cmd_ablate(args):
    opts = merged(args)
    need(opts, "variant", "out_dir")
    need_dir(opts, "real_dir")
    need_dir(opts, "fake_dir")
    model_cfg = model_config(opts)  # raises ConfigError for unknown variants
    out_dir = Path(opts["out_dir"])
    opts["out"] = str(out_dir / "model.pt")
    _train(opts, model_cfg)
    manifest = opts.get("manifest")
    if manifest:
        need_file(opts, "manifest")
    else:
        manifest = out_dir / "manifest.jsonl"
        build_manifest([(opts["real_dir"], 0, "real", "unprocessed"),
                        (opts["fake_dir"], 1, "toy", "unprocessed")], manifest)
    report, model = _evaluate(opts["out"], manifest, out_dir, opts.get("batch_size", 8))
    counters = {"amsff_calls": model.amsff.calls if model.amsff is not None else 0,
                "psm": model.counters["psm"], "random_patches": model.counters["random_patches"]}
    (out_dir / "counters.json").write_text(json.dumps(counters, sort_keys=True) + "\n", encoding="utf-8")
    print(report.to_table(), end="")
    print("counters " + " ".join(f"{k}={v}" for k, v in sorted(counters.items())))
    return EXIT_OK


def _flag_bool(p, name, help):
    p.add_argument(name, action="store_true", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glff", description="GLFF synthetic-image detector")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p):
        p.add_argument("--real-dir")
        p.add_argument("--fake-dir")
        p.add_argument("--steps", dest="max_steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--augment-prob", type=float)
        p.add_argument("--augment-mode", choices=("independent", "joint"))
        p.add_argument("--checkpoint-every", type=int)
        p.add_argument("--seed", type=int)
        _flag_bool(p, "--toy", "small 128 px network for quick runs")
        p.add_argument("--no-pretrained", dest="pretrained", action="store_false", default=None,
                       help="skip looking for ImageNet weights")
        p.add_argument("--config", help="flat YAML file of flag values")

    p = sub.add_parser("train", help="train a detector")
    training_flags(p)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="CSV log path (default <out>.log.csv)")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}, stage:S,D or windows:SPEC")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest and write metrics")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--out-dir")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("process", help="build a post-processed test set")
    p.add_argument("--protocol", help=" | ".join(PROCESS_PROTOCOLS))
    p.add_argument("--in-dir")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--generator", help="generator tag for the manifest")
    p.add_argument("--label", type=int, choices=(0, 1))
    p.add_argument("--ckpt", help="detector attacked by the adversarial step")
    p.add_argument("--group-size", type=int)
    p.add_argument("--adv-steps", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("visualize", help="heatmap and selected patches for one image")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ablate", help="train and evaluate one model variant")
    training_flags(p)
    p.add_argument("--variant")
    p.add_argument("--out-dir")
    p.add_argument("--manifest", help="evaluation manifest (default: the training dirs)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"glff {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EncoderNotFoundError as exc:
        print(f"glff {args.command}: {exc} (set {ENCODER_ENV} to an ffmpeg binary)", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"glff {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"glff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
