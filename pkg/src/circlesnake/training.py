"""Epoch loop with step-decayed learning rate, periodic checkpoints and validation."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .losses import LossBreakdown
from .model import CircleSnake, Sample, train_step
from .optim import AdamState, step_lr


@dataclass
class FitResult:
    history: list[LossBreakdown] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    validations: list[tuple[int, dict]] = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    state: AdamState | None = None


def validation_loss(model: CircleSnake, samples: Sequence[Sample], seed: int = 0) -> float:
    """Mean total loss over ``samples`` with frozen batch-norm statistics."""
    was = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    try:
        vals = [float(model.loss([s], rng)[0].data) for s in samples]
    finally:
        model.train(was)
    return float(np.mean(vals)) if vals else float("nan")


def fit(model: CircleSnake, samples: Sequence[Sample], epochs: int | None = None,
        state: AdamState | None = None, log: TextIO | None = None,
        checkpoint_dir: str | None = None, save_ep: int = 5, eval_ep: int = 5,
        validate: Callable[[CircleSnake], dict] | None = None, select_by: str = "ap50",
        start_epoch: int = 0, rng: np.random.Generator | None = None) -> FitResult:
    """Train ``model`` on ``samples``.

    ``validate`` returns a metrics dict with at least ``ap50`` and ``loss``;
    the best epoch by ``select_by`` is additionally saved as ``best.npz``.
    Log lines carry no timestamps so identical runs give identical logs.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    state = state or AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = rng or np.random.default_rng(cfg.seed)
    result = FitResult(state=state)
    step = state.step_count
    bs = max(1, cfg.batch_size)
    for epoch in range(start_epoch, epochs):
        state.lr = step_lr(cfg.lr, epoch, cfg.milestones, cfg.gamma)
        order = rng.permutation(len(samples))
        for b in range(0, len(order), bs):
            batch = [samples[i] for i in order[b:b + bs]]
            parts = train_step(model, batch, state, rng, step)
            result.history.append(parts)
            if log is not None:
                log.write(parts.log_line(step, state.lr) + "\n")
            step += 1
        last = epoch == epochs - 1
        if checkpoint_dir is not None and ((epoch + 1) % save_ep == 0 or last):
            path = os.path.join(checkpoint_dir, f"{epoch}.npz")
            model.save(path, state, {"epoch": epoch})
            result.checkpoints.append(path)
        if validate is not None and ((epoch + 1) % eval_ep == 0 or last):
            metrics = validate(model)
            result.validations.append((epoch, metrics))
            if log is not None:
                body = " ".join(f"val_{k}={v:.6g}" for k, v in sorted(metrics.items())
                                if v is not None)
                log.write(f"epoch={epoch} {body}\n")
            score = metrics.get("ap50") if select_by == "ap50" else -metrics.get("loss", np.inf)
            if score is not None and (result.best_score is None or score > result.best_score):
                result.best_score, result.best_epoch = score, epoch
                if checkpoint_dir is not None:
                    model.save(os.path.join(checkpoint_dir, "best.npz"), state,
                               {"epoch": epoch, "selected_by": select_by})
        if log is not None:
            log.flush()
    return result
