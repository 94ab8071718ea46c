"""Training loop, learning-rate schedule and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml
from safetensors import safe_open
from safetensors.torch import save_file

from .config import Config, ModelConfig, model_fingerprint
from .data import collate, iterate_batches
from .datagen.expressions import Vocabulary
from .evaluation import evaluate_model
from .losses import LossWeights, loss_overall
from .model import Mono3DVG

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Mono3DVG, cfg: Config, vocab: Vocabulary, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    meta = {
        "config": cfg.dump(),
        "fingerprint": model_fingerprint(cfg.model, len(vocab)),
        "vocab": json.dumps(vocab.words),
        "extra": json.dumps(extra or {}),
    }
    save_file(state, str(path), metadata=meta)
    return path


def read_checkpoint_meta(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if "fingerprint" not in meta:
        raise CheckpointMismatch(f"{path} carries no config fingerprint")
    return meta


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[Mono3DVG, Config, Vocabulary]:
    """Rebuild the model stored at ``path``.

    When ``expected`` is given, its fingerprint must equal the stored one; the check
    happens before any weights are read.
    """
    meta = read_checkpoint_meta(path)
    cfg = Config.from_dict(yaml.safe_load(meta["config"]))
    vocab = Vocabulary(json.loads(meta["vocab"]))
    stored = meta["fingerprint"]
    if model_fingerprint(cfg.model, len(vocab)) != stored:
        raise CheckpointMismatch(f"{path}: stored config does not match its fingerprint")
    if expected is not None and model_fingerprint(expected, len(vocab)) != stored:
        raise CheckpointMismatch(f"{path}: checkpoint fingerprint {stored} differs from the requested model config")
    model = Mono3DVG.build(cfg.model, vocab)
    with safe_open(str(path), framework="pt") as f:
        state = {k: f.get_tensor(k) for k in f.keys()}
    model.load_state_dict(state)
    model.eval()
    return model, cfg, vocab


# --------------------------------------------------------------------------
# schedule


def lr_at_epoch(cfg: Config, epoch: int) -> float:
    """Step decay: base rate until ``lr_drop_epoch``, then multiplied by ``lr_drop_factor``."""
    o = cfg.optim
    return o.lr * (o.lr_drop_factor if epoch >= o.lr_drop_epoch else 1.0)


def make_optimizer(model: torch.nn.Module, cfg: Config) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    last: Path
    best: Path | None
    best_metric: float
    steps: int
    epochs: int
    history: list = field(default_factory=list)
    stopped_early: bool = False


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train_step(model, batch, optimizer, cfg: Config):
    out = model(batch.images, batch.ids, batch.values, batch.text_mask)
    weights = LossWeights.from_tuple(cfg.loss.weights)
    breakdown = loss_overall(out.pred, batch.targets, out.depth_logits, weights,
                             cfg.loss.focal_gamma, cfg.loss.focal_alpha,
                             d_pred=out.d_pred if cfg.loss.depth_on_fused else None)
    if not torch.isfinite(breakdown.total):
        return breakdown, False
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    if cfg.optim.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
    optimizer.step()
    return breakdown, True


def train(cfg: Config, train_records: list, val_records: list | None, out_dir, vocab: Vocabulary | None = None,
          resume: str | Path | None = None, eval_every: int = 1,
          on_eval: Callable[[int, int, object], bool] | None = None, log_stream=None) -> TrainResult:
    """Optimize the overall loss.

    ``on_eval(epoch, step, result)`` is called after every validation pass and may return
    True to stop. Writes ``last.safetensors`` (+ ``last.state.pt`` for resuming),
    ``best.safetensors`` (highest val Acc@0.5) and ``train_log.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = vocab or Vocabulary()
    seed_everything(cfg.seed)
    model = Mono3DVG.build(cfg.model, vocab)
    optimizer = make_optimizer(model, cfg)
    bins = model.bins
    epoch0, step, skip, best_metric = 0, 0, 0, -math.inf
    if resume is not None:
        state = torch.load(Path(resume).with_suffix(".state.pt"), weights_only=False)
        loaded, _, _ = load_checkpoint(resume, cfg.model)
        model.load_state_dict(loaded.state_dict())
        optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        epoch0, step, skip, best_metric = state["epoch"], state["step"], state["batch"], state["best_metric"]

    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "a" if resume else "w")
    history, stopped, best_path = [], False, None
    if (out_dir / "best.safetensors").exists() and resume is not None:
        best_path = out_dir / "best.safetensors"

    def emit(record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        log_file.write(line + "\n")
        log_file.flush()
        if log_stream is not None:
            print(line, file=log_stream, flush=True)

    def save_last(epoch: int, batch_index: int) -> Path:
        p = save_checkpoint(out_dir / "last.safetensors", model, cfg, vocab, {"epoch": epoch, "step": step})
        torch.save({"optimizer": optimizer.state_dict(), "torch_rng": torch.get_rng_state(), "epoch": epoch,
                    "step": step, "batch": batch_index, "best_metric": best_metric}, p.with_suffix(".state.pt"))
        return p

    max_steps = cfg.optim.max_steps
    epoch, last = epoch0, None
    try:
        for epoch in range(epoch0, cfg.optim.epochs):
            for group in optimizer.param_groups:
                group["lr"] = lr_at_epoch(cfg, epoch)
            chunks = list(iterate_batches(train_records, cfg.optim.batch_size,
                                          np.random.default_rng([cfg.seed, epoch])))
            model.train()
            bi = 0
            for bi, chunk in enumerate(chunks):
                if epoch == epoch0 and bi < skip:
                    continue
                batch = collate(chunk, vocab, bins)
                t0 = time.perf_counter()
                breakdown, ok = train_step(model, batch, optimizer, cfg)
                step += 1
                losses = breakdown.as_floats()
                if not ok:
                    emit({"event": "diverged", "epoch": epoch, "step": step, **losses})
                    bad = [k for k, v in losses.items() if not math.isfinite(v)]
                    raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch}); bad terms: {bad}")
                if step % cfg.optim.log_every == 0 or step == 1:
                    emit({"event": "step", "epoch": epoch, "step": step, "lr": optimizer.param_groups[0]["lr"],
                          "sec": round(time.perf_counter() - t0, 4), **losses})
                if max_steps is not None and step >= max_steps:
                    break
            hit_limit = max_steps is not None and step >= max_steps
            batch_next = bi + 1 if hit_limit and bi + 1 < len(chunks) else 0
            epoch_next = epoch if batch_next else epoch + 1
            if val_records and ((epoch + 1) % eval_every == 0 or hit_limit or epoch + 1 == cfg.optim.epochs):
                result, _ = evaluate_model(model, val_records, vocab, cfg.optim.batch_size, cfg.eval.thresholds)
                metric = result.acc("overall", 0.5)
                entry = {"event": "eval", "epoch": epoch, "step": step,
                         "acc@0.25": result.acc("overall", 0.25), "acc@0.5": metric}
                emit(entry)
                history.append(entry)
                if metric > best_metric:
                    best_metric = metric
                    best_path = save_checkpoint(out_dir / "best.safetensors", model, cfg, vocab,
                                                {"epoch": epoch, "step": step, "acc@0.5": metric})
                if on_eval is not None and on_eval(epoch, step, result):
                    stopped = True
            last = save_last(epoch_next, batch_next)
            if stopped or hit_limit:
                break
        if last is None:
            last = save_last(epoch0, skip)
    finally:
        log_file.close()
    return TrainResult(last, best_path, best_metric, step, epoch + 1, history, stopped)
