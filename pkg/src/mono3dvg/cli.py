"""Command line entry point: ``mono3dvg {datagen,train,eval,ablate,predict}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
Relative output paths are resolved under ``$MONO3DVG_OUTPUT_ROOT`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Config, ConfigError
from .data import Batch, collate, encode_texts, image_tensor, iterate_batches
from .datagen.dataset import DatasetConfigError, ExpressionRecord, build_dataset, load_split
from .datagen.scene import GenerationError, ObjectRecord, SceneRecord
from .evaluation import EvalResult, evaluate_backproject, evaluate_catrand_mean, evaluate_model, predict_batch
from .geometry3d import Box2D, CameraIntrinsics, OrientedBox3D
from .train import CheckpointMismatch, DivergenceError, load_checkpoint, train

OUTPUT_ROOT_ENV = "MONO3DVG_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

ABLATION_GRIDS = {
    "adapter_on_off": [
        {"visual_adapter": False, "depth_adapter": False},
        {"visual_adapter": True, "depth_adapter": False},
        {"visual_adapter": False, "depth_adapter": True},
        {"visual_adapter": True, "depth_adapter": True},
    ],
    "stacking_order": [
        {"stacking_order": "DTV"}, {"stacking_order": "TDV"}, {"stacking_order": "DVT"},
        {"stacking_order": "DTV", "full_add_norm": True},
    ],
    "encoder_layers": [{"encoder_layers": l, "depth_encoder_layers": m} for l in (2, 3, 4) for m in (1, 2, 3)],
    "decoder_layers": [{"decoder_layers": n} for n in (1, 2, 3, 4, 5)],
}

log = logging.getLogger("mono3dvg")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def build_config(args) -> Config:
    base = Config.paper() if args.preset == "paper" else Config.desk()
    cfg = Config.load(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.data.dataset.seed = args.seed
    return cfg


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# subcommands


def cmd_datagen(cfg: Config, args) -> int:
    out = resolve(args.out or cfg.data.root)
    counts = build_dataset(cfg.data.dataset, out)
    files = list(out.glob("*.jsonl")) + list((out / "images").glob("*.png"))
    cfg_text = json.dumps(cfg.data.dataset.to_dict(), sort_keys=True)
    manifest = {
        "config_fingerprint": hashlib.sha256(cfg_text.encode()).hexdigest()[:16],
        "counts": counts,
        "content_sha256": file_digest(files),
        "dataset_config": json.loads(cfg_text),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(json.dumps({"out": str(out), "counts": counts, "content_sha256": manifest["content_sha256"]}))
    return EXIT_OK


def _data_dir(cfg: Config, args) -> Path:
    return resolve(args.data or cfg.data.root)


def cmd_train(cfg: Config, args) -> int:
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
    if args.max_steps is not None:
        cfg.optim.max_steps = args.max_steps
    data = _data_dir(cfg, args)
    train_rows = load_split(data, "train")
    val_rows = load_split(data, "val") if (data / "val.jsonl").exists() else None
    out = resolve(args.out or "train")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    res = train(cfg, train_rows, val_rows, out, resume=args.resume, eval_every=args.eval_every,
                log_stream=sys.stdout if args.verbose else None)
    print(json.dumps({"last": str(res.last), "best": str(res.best) if res.best else None,
                      "best_acc@0.5": res.best_metric, "steps": res.steps}))
    return EXIT_OK


def _write_result(result: EvalResult, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(result.to_json())
    (out / f"{stem}.txt").write_text(result.format_table() + "\n")


def score_overlay(image: np.ndarray, score: np.ndarray) -> Image.Image:
    """Blend a (h, w) score map, stretched to the image size, over the RGB image as a red heat layer."""
    s = score - score.min()
    s = s / s.max() if s.max() > 0 else s
    heat = Image.fromarray((255 * s).astype(np.uint8)).resize((image.shape[1], image.shape[0]), Image.BILINEAR)
    heat = np.asarray(heat, dtype=np.float32)[..., None] / 255.0
    red = np.zeros_like(image, dtype=np.float32)
    red[..., 0] = 255.0
    out = (1 - 0.6 * heat) * image.astype(np.float32) + 0.6 * heat * red
    return Image.fromarray(out.clip(0, 255).astype(np.uint8))


def dump_scoremaps(model, rows, vocab, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    model.eval()
    with torch.no_grad():
        for chunk in iterate_batches(rows, 10):
            b = collate(chunk, vocab)
            res = model(b.images, b.ids, b.values, b.text_mask)
            if res.score16 is None:
                return 0
            for r, s in zip(chunk, res.score16.numpy()):
                score_overlay(r.scene.image, s).save(out / f"{r.scene_id}_obj{r.object_id}.png")
                n += 1
    return n


def cmd_eval(cfg: Config, args) -> int:
    rows = load_split(_data_dir(cfg, args), args.split)
    out = resolve(args.out or "eval")
    thresholds = cfg.eval.thresholds
    if args.baseline == "catrand":
        result = evaluate_catrand_mean(rows, args.seeds or cfg.eval.catrand_seeds, cfg.seed, thresholds)
        stem = "catrand"
    elif args.baseline == "backproj":
        result = evaluate_backproject(rows, thresholds)
        stem = "backproj"
    elif args.checkpoint:
        expected = cfg.model if args.config else None
        model, mcfg, vocab = load_checkpoint(args.checkpoint, expected)
        result, _ = evaluate_model(model, rows, vocab, mcfg.optim.batch_size, thresholds, "Mono3DVG-TR")
        stem = "model"
        if args.dump_scoremaps:
            dump_scoremaps(model, rows, vocab, out / "scoremaps")
    else:
        raise ConfigError("eval needs --checkpoint or --baseline")
    result.check_partitions()
    _write_result(result, out, f"{stem}_{args.split}")
    print(result.format_table())
    return EXIT_OK


def cmd_ablate(cfg: Config, args) -> int:
    grid = ABLATION_GRIDS[args.axis]
    if args.limit is not None:
        grid = grid[: args.limit]
    if not grid:
        raise ConfigError("empty ablation grid")
    if args.epochs is not None:
        cfg.optim.epochs = args.epochs
        cfg.optim.lr_drop_epoch = min(cfg.optim.lr_drop_epoch, max(1, int(args.epochs * 2 / 3)))
    data = _data_dir(cfg, args)
    train_rows, val_rows = load_split(data, "train"), load_split(data, "val")
    out = resolve(args.out or f"ablate_{args.axis}")
    table = []
    for i, overrides in enumerate(grid):
        run_cfg = copy.deepcopy(cfg)
        for k, v in overrides.items():
            setattr(run_cfg.model, k, v)
        run_cfg.model.__post_init__()
        run_dir = out / f"run{i:02d}"
        res = train(run_cfg, train_rows, val_rows, run_dir, eval_every=max(1, run_cfg.optim.epochs))
        model, _, vocab = load_checkpoint(res.best or res.last)
        ev, _ = evaluate_model(model, val_rows, vocab, run_cfg.optim.batch_size, cfg.eval.thresholds)
        row = {"setting": overrides, **{f"{k}@{t:g}": ev.acc(k, t) for k in ("unique", "multiple", "overall")
                                         for t in cfg.eval.thresholds}}
        table.append(row)
        print(json.dumps(row), flush=True)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    (out / "ablation.txt").write_text(format_ablation(table) + "\n")
    print(format_ablation(table))
    return EXIT_OK


def format_ablation(table: list[dict]) -> str:
    cols = [k for k in table[0] if k != "setting"]
    head = f"{'setting':<48}" + "".join(f"{c:>16}" for c in cols)
    lines = [head, "-" * len(head)]
    for row in table:
        name = ", ".join(f"{k}={v}" for k, v in row["setting"].items())
        lines.append(f"{name:<48}" + "".join(f"{100 * row[c]:>16.2f}" for c in cols))
    return "\n".join(lines)


def cmd_predict(cfg: Config, args) -> int:
    if not args.checkpoint or not args.image or not args.text:
        raise ConfigError("predict needs --checkpoint, --image and --text")
    model, mcfg, vocab = load_checkpoint(args.checkpoint)
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as e:
        raise FileNotFoundError(f"cannot read image {args.image}: {e}") from e
    if image.shape[:2] != (mcfg.model.image_h, mcfg.model.image_w):
        raise ConfigError(f"image is {image.shape[1]}x{image.shape[0]}, model expects "
                          f"{mcfg.model.image_w}x{mcfg.model.image_h}")
    cam = (CameraIntrinsics.from_dict(json.loads(Path(args.camera).read_text())) if args.camera
           else mcfg.data.dataset.scene.camera())
    # a placeholder record carries the camera through the batch
    dummy = ObjectRecord(0, "car", OrientedBox3D(0, 0, 10, 1, 1, 1, 0), Box2D(0, 0, 1, 1), "gray")
    rec = ExpressionRecord("input", 0, args.text, {}, "predict", SceneRecord("input", cam, [dummy], image))
    ids, values, mask = encode_texts([args.text], vocab)
    batch = Batch(image_tensor(image)[None], ids, values, mask, None, [rec])
    pred = predict_batch(model, batch, debug=args.debug)[0]
    text = json.dumps(pred.to_dict(debug=args.debug), indent=2)
    if args.out:
        out = resolve(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file overriding the preset")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output path (relative paths go under ${OUTPUT_ROOT_ENV})")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mono3dvg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="generate the synthetic dataset")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data")
    t.add_argument("--resume", help="last.safetensors to resume from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--eval-every", type=int, default=1)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or baseline")
    e.add_argument("--data")
    e.add_argument("--split", default="val")
    e.add_argument("--checkpoint")
    e.add_argument("--baseline", choices=("catrand", "backproj"))
    e.add_argument("--seeds", type=int)
    e.add_argument("--dump-scoremaps", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="train and compare an ablation grid")
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    a.add_argument("--data")
    a.add_argument("--epochs", type=int)
    a.add_argument("--limit", type=int, help="only run the first N grid points")

    r = sub.add_parser("predict", parents=[common], help="ground one expression in one image")
    r.add_argument("--checkpoint")
    r.add_argument("--image")
    r.add_argument("--text")
    r.add_argument("--camera", help="JSON file with fx, fy, cx, cy, w, h")
    r.add_argument("--debug", action="store_true", help="include raw head outputs")
    return p


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = build_config(args)
        if args.print_config:
            print(cfg.dump(), end="")
            return EXIT_OK
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetConfigError, GenerationError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
