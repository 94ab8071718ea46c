"""Desk-scale experiments shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import Config
from .datagen.dataset import DatasetConfig, generate_split
from .evaluation import evaluate_backproject, evaluate_catrand_mean, evaluate_model
from .train import load_checkpoint, train


@dataclass
class OverfitReport:
    acc25: float
    acc50: float
    steps: int
    seconds: float
    history: list = field(default_factory=list)

    def passed(self, max_steps: int = 2000, acc25: float = 0.9, acc50: float = 0.5) -> bool:
        return self.steps <= max_steps and self.acc25 >= acc25 and self.acc50 >= acc50


def overfit_config(max_steps: int = 2000, seed: int = 0, n: int = 32) -> Config:
    """No dropout; the x0.1 learning-rate drop lands two thirds of the way through the step budget."""
    cfg = Config.desk()
    cfg.seed = seed
    cfg.model.dropout = 0.0
    cfg.optim.batch_size = 8
    cfg.optim.max_steps = max_steps
    epochs = math.ceil(max_steps / math.ceil(n / cfg.optim.batch_size))
    cfg.optim.epochs = epochs
    cfg.optim.lr_drop_epoch = round(epochs * 2 / 3)
    cfg.optim.log_every = 20
    return cfg


def run_overfit(out_dir, n: int = 32, cfg: Config | None = None, eval_every: int = 5,
                targets=(0.9, 0.5), verbose: bool = False) -> OverfitReport:
    """Train on ``n`` training rows and evaluate on the same rows until both targets are met."""
    cfg = cfg or overfit_config()
    rows = generate_split("train", n, DatasetConfig(splits={"train": n}, seed=cfg.data.dataset.seed))
    start = time.perf_counter()
    seen = []

    def on_eval(epoch, step, result):
        a25, a50 = result.acc("overall", 0.25), result.acc("overall", 0.5)
        seen.append({"epoch": epoch, "step": step, "acc@0.25": a25, "acc@0.5": a50,
                     "sec": round(time.perf_counter() - start, 1)})
        if verbose:
            print(json.dumps(seen[-1]), flush=True)
        return a25 >= targets[0] and a50 >= targets[1]

    train(cfg, rows, rows, out_dir, eval_every=eval_every, on_eval=on_eval)
    final = seen[-1]
    report = OverfitReport(final["acc@0.25"], final["acc@0.5"], final["step"], time.perf_counter() - start, seen)
    Path(out_dir, "overfit_report.json").write_text(json.dumps(asdict(report), indent=2))
    return report


@dataclass
class GeneralizationReport:
    model: dict  # row -> accuracies of the last checkpoint on val
    catrand: dict
    backproj: dict
    epochs: int
    seconds: float
    history: list = field(default_factory=list)

    @property
    def model_acc25(self) -> float:
        return self.model["overall"]["acc@0.25"]

    @property
    def catrand_multiple_acc25(self) -> float:
        return self.catrand["multiple"]["acc@0.25"]

    @property
    def backproj_acc25(self) -> float:
        return self.backproj["overall"]["acc@0.25"]

    def passed(self) -> bool:
        return self.model_acc25 > max(self.catrand_multiple_acc25, self.backproj_acc25)


def generalization_config(epochs: int = 60, seed: int = 0) -> Config:
    cfg = Config.desk()
    cfg.seed = seed
    cfg.optim.epochs = epochs
    cfg.optim.lr_drop_epoch = max(1, round(epochs * 2 / 3))
    cfg.optim.log_every = 50
    return cfg


def run_generalization(out_dir, n_train: int = 500, n_val: int = 100, cfg: Config | None = None,
                       eval_every: int = 5, verbose: bool = False) -> GeneralizationReport:
    """Train on a fresh train split, then score the last checkpoint and both baselines on val."""
    cfg = cfg or generalization_config()
    out_dir = Path(out_dir)
    dcfg = DatasetConfig(splits={"train": n_train, "val": n_val}, seed=cfg.data.dataset.seed)
    train_rows, val_rows = generate_split("train", n_train, dcfg), generate_split("val", n_val, dcfg)
    start = time.perf_counter()
    seen = []

    def on_eval(epoch, step, result):
        seen.append({"epoch": epoch, "step": step, "acc@0.25": result.acc("overall", 0.25),
                     "acc@0.5": result.acc("overall", 0.5), "sec": round(time.perf_counter() - start, 1)})
        if verbose:
            print(json.dumps(seen[-1]), flush=True)
        return False

    res = train(cfg, train_rows, val_rows, out_dir, eval_every=eval_every, on_eval=on_eval)
    model, _, vocab = load_checkpoint(res.last)
    ev, _ = evaluate_model(model, val_rows, vocab, cfg.optim.batch_size, cfg.eval.thresholds, "model")
    cat = evaluate_catrand_mean(val_rows, cfg.eval.catrand_seeds, cfg.seed, cfg.eval.thresholds)
    back = evaluate_backproject(val_rows, cfg.eval.thresholds)
    for r, stem in ((ev, "model"), (cat, "catrand"), (back, "backproj")):
        (out_dir / f"{stem}_val.txt").write_text(r.format_table() + "\n")
    report = GeneralizationReport(ev.table, cat.table, back.table, res.epochs, time.perf_counter() - start, seen)
    (out_dir / "generalization_report.json").write_text(json.dumps(asdict(report), indent=2))
    return report
