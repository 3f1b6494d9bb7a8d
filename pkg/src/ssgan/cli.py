"""Command-line entry point: ``ssgan <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, expand, load_config, save_config
from .data import generate_synthetic, load_image, load_split, read_manifest, save_image, tile
from .fewshot import evaluate
from .gradcheck import format_table, run_suite
from .masking import make_grid, mask_image, patch_value
from .nn import Discriminator
from .trainer import TrainState, run_training, sample_latent
from .tensor import Tensor

log = logging.getLogger("ssgan")


class CommandError(RuntimeError):
    """User-facing failure; printed without a traceback."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = expand({})
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    if overrides:
        cfg = expand({**cfg.to_dict(), **overrides})
    return cfg


def encoder(dnet: Discriminator, batch: int = 256):
    """Eval-mode encoding function over numpy image batches."""
    dt = dnet.config.np_dtype

    def encode(images: np.ndarray) -> np.ndarray:
        out = []
        with T.no_grad():
            weights = dnet.weights("eval", heads=("encoding",))
            for i in range(0, len(images), batch):
                x = Tensor(np.asarray(images[i:i + batch], dtype=dt))
                out.append(dnet.encode(x, weights=weights).data)
        return np.concatenate(out).astype(np.float64)
    return encode


def _load_state(path) -> TrainState:
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    out = Path(args.out or "data")
    seed = 0 if args.seed is None else args.seed
    try:
        manifest = generate_synthetic(out, args.train_classes, args.test_classes,
                                      args.per_class, args.image_size, args.channels, seed)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {out}: {exc}") from None
    print(f"wrote {len(manifest.rows)} images and {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.manifest:
        raise ConfigError({"manifest": "a dataset manifest path is required for training"})
    out = Path(cfg.out_dir)
    manifest = read_manifest(cfg.manifest)
    manifest.validate()
    train = load_split(manifest, "train", cfg.image_size, cfg.channels)
    save_config(cfg, out / "config.json")
    loss_csv = out / "losses.csv"
    if loss_csv.exists():
        loss_csv.unlink()
    start = time.perf_counter()
    state = run_training(cfg.net_config(), cfg.hyper_params(), train.images, cfg.preset,
                         grid=cfg.grid(), loss_csv=loss_csv,
                         checkpoint_dir=out / "checkpoints",
                         checkpoint_every=cfg.checkpoint_every, log_every=cfg.log_every)
    print(f"trained {cfg.preset}: {state.g_updates} G updates, {state.d_updates} D updates "
          f"in {time.perf_counter() - start:.1f}s; checkpoint {out / 'checkpoints' / 'final.ssgf'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    state = _load_state(args.checkpoint)
    manifest_path = args.manifest or cfg.manifest
    if not manifest_path:
        raise CommandError("eval needs --manifest (or a config with a manifest)")
    manifest = read_manifest(manifest_path)
    manifest.validate()
    net = state.config
    test = load_split(manifest, "test", net.image_size, net.channels)
    way = args.way if args.way is not None else cfg.eval_way
    shot = args.shot if args.shot is not None else cfg.eval_shot
    query = args.query if args.query is not None else cfg.eval_query
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    n_classes = len(test.classes)
    if way > n_classes:
        raise CommandError(f"insufficient classes: {way}-way requested, test split has "
                           f"{n_classes}")
    rng = np.random.default_rng(cfg.seed)
    report = evaluate(encoder(state.discriminator), test, way, shot, query, episodes, rng)
    out = Path(args.out or cfg.out_dir)
    csv_path, json_path = report.write(out)
    print(f"{way}-way {shot}-shot over {report.episodes} episodes: "
          f"{100 * report.mean:.2f}% +- {100 * report.ci95:.2f}%  ({csv_path}, {json_path})")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    start = time.perf_counter()
    results = run_suite(seed=seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in "
          f"{time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def mask_distances(image: np.ndarray, grid, dnet: Discriminator | None):
    """Masked variants per cell and, with a network, their encoding distance."""
    fill = patch_value(image, grid)
    cells = grid.positions
    masked = np.stack([mask_image(image, c, grid, fill) for c in cells])
    if dnet is None:
        return cells, masked, None
    codes = encoder(dnet)(np.concatenate([image[None], masked]))
    unit = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    dist = np.clip(1.0 - unit[1:] @ unit[0], 0.0, 2.0)
    return cells, masked, dist


def cmd_mask_preview(args) -> int:
    cfg = _run_config(args)
    dnet = None
    size, channels = cfg.image_size, cfg.channels
    if args.checkpoint:
        state = _load_state(args.checkpoint)
        dnet = state.discriminator
        size, channels = state.config.image_size, state.config.channels
    try:
        image = load_image(args.image, None, channels)
    except OSError as exc:
        raise CommandError(f"cannot decode {args.image}: {exc}") from None
    if image.shape[1:] != (size, size):
        raise CommandError(f"image is {image.shape[2]}x{image.shape[1]}, expected {size}x{size}")
    patch = args.patch_size or size // 4
    grid = make_grid(size, patch, cfg.negative_mode, cfg.pixel_mean)
    cells, masked, dist = mask_distances(image, grid, dnet)
    order = list(range(len(cells)))
    if dist is not None:
        # stable sort keeps grid order among equal distances
        order = sorted(order, key=lambda i: -dist[i])
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sheet = tile(np.concatenate([image[None], masked[order]]), cols=len(cells) + 1)
    save_image(sheet, out / "mask_preview.png")
    with (out / "mask_preview.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "distance"])
        for i in order:
            w.writerow([cells[i][0], cells[i][1], "" if dist is None else repr(float(dist[i]))])
    print(f"wrote {out / 'mask_preview.png'} and {out / 'mask_preview.csv'}")
    return 0


def cmd_sample(args) -> int:
    state = _load_state(args.checkpoint)
    if state.generator is None:
        raise CommandError(f"checkpoint has no generator (preset {state.preset} trains "
                           f"the discriminator only)")
    if args.count < 1:
        raise CommandError("--count must be >= 1")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    z = sample_latent(state.hp.prior, args.count, rng, state.config.np_dtype)
    with T.no_grad():
        images = state.generator(Tensor(z), "eval").data
    cols = math.ceil(math.sqrt(args.count))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_image(tile(images, cols), out / "samples.png")
    print(f"wrote {out / 'samples.png'} ({args.count} samples, {cols} per row)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(
        prog="ssgan",
        description="Self-supervised GAN training and few-shot evaluation on numpy.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="render a shapes dataset")
    p.add_argument("--train-classes", type=int, default=5)
    p.add_argument("--test-classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", parents=[common], help="train a preset from a config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="few-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mask-preview", parents=[common], help="masked variants of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--patch-size", type=int)
    p.set_defaults(func=cmd_mask_preview)

    p = sub.add_parser("sample", parents=[common], help="tile of generated images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
