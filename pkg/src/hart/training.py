"""Class-weighted label-smoothed cross-entropy, Adam, and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import ClassificationReport, classification_report
from .pipeline import WindowSet, class_weights
from .rng import substream


class DivergenceError(ArithmeticError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 5e-4
    label_smoothing: float = 0.1
    seed: int = 0
    class_weights: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")


def weighted_smoothed_ce(logits: torch.Tensor, targets, weights=None, eps: float = 0.1) -> torch.Tensor:
    """Batch mean of ``w[y] * -sum_c q_c log p_c`` with ``q = (1 - eps) onehot(y) + eps / C``."""
    if logits.dim() != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(logits.shape)}")
    b, c = logits.shape
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    if targets.shape != (b,):
        raise ValueError(f"{targets.numel()} targets for {b} logits")
    if b and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target ids must lie in [0, {c})")
    log_p = F.log_softmax(logits, dim=-1)
    q = torch.full_like(log_p, eps / c)
    q.scatter_add_(1, targets[:, None], torch.full((b, 1), 1.0 - eps, dtype=log_p.dtype))
    per_sample = -(q * log_p).sum(dim=-1)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=log_p.dtype, device=logits.device)
        if w.shape != (c,):
            raise ValueError(f"{w.numel()} class weights for {c} classes")
        per_sample = per_sample * w[targets]
    return per_sample.mean()


@dataclass
class AdamState:
    t: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place; ``state.t`` is incremented first."""
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ValueError(f"shape mismatch in adam_step: {tuple(p.shape)} vs {tuple(g.shape)}")
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)  # deterministic per-epoch values
    timings: list[dict] = field(default_factory=list)  # wall-clock, kept apart from the records
    best_epoch: int = 0  # 0 means the initial weights
    best_dev_macro_f1: float | None = None


@torch.no_grad()
def predict_logits(model: nn.Module, data: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        x = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
        outs = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(outs) if outs else torch.zeros(0, 0)


def evaluate(model: nn.Module, windows: WindowSet, num_classes: int, batch_size: int = 256) -> ClassificationReport:
    """Eval-mode inference; argmax with ties going to the lowest class index."""
    if len(windows) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, windows.data, batch_size)
    return classification_report(logits.argmax(dim=-1).numpy(), windows.labels, num_classes)


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(model: nn.Module, train: WindowSet, dev: WindowSet | None, tcfg: TrainConfig, num_classes: int,
        stop_at_dev_f1: float | None = None, log=None) -> tuple[TrainHistory, dict[str, torch.Tensor]]:
    """Train ``model`` in place and return the history and the best-dev-macro-F1 weights.

    Ties in dev macro-F1 keep the earlier epoch; without a dev set the last
    epoch is kept.  The model is left holding the best weights.
    ``stop_at_dev_f1`` ends training once that dev score is reached, which the
    reference setup never uses.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    weights = np.asarray(tcfg.class_weights if tcfg.class_weights is not None
                         else class_weights(train.labels, num_classes), dtype=np.float32)
    if weights.shape != (num_classes,):
        raise ValueError(f"{weights.size} class weights for {num_classes} classes")
    w = torch.from_numpy(weights)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.zeros_like(params)
    x_all = torch.from_numpy(train.data)
    y_all = torch.from_numpy(train.labels)
    history = TrainHistory()
    best = _snapshot(model)
    n = len(train)
    for epoch in range(1, tcfg.epochs + 1):
        start = time.perf_counter()
        order = torch.from_numpy(substream(tcfg.seed, "shuffle", epoch).permutation(n))
        model.train()
        total, steps = 0.0, 0
        for b, i in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[i:i + tcfg.batch_size]
            loss = weighted_smoothed_ce(model(x_all[idx]), y_all[idx], w, tcfg.label_smoothing)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            for p in params:
                p.grad = None
            loss.backward()
            adam_step(params, [p.grad if p.grad is not None else torch.zeros_like(p) for p in params], state,
                      tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            total += loss.item() * len(idx)
            steps += 1
        record = {"epoch": epoch, "train_loss": total / n, "steps": steps, "dev_loss": None, "dev_macro_f1": None}
        if dev is not None and len(dev):
            logits = predict_logits(model, dev.data)
            record["dev_loss"] = weighted_smoothed_ce(logits, dev.labels, w, tcfg.label_smoothing).item()
            record["dev_macro_f1"] = classification_report(logits.argmax(-1).numpy(), dev.labels, num_classes).macro_f1
            if history.best_dev_macro_f1 is None or record["dev_macro_f1"] > history.best_dev_macro_f1:
                history.best_dev_macro_f1 = record["dev_macro_f1"]
                history.best_epoch = epoch
                best = _snapshot(model)
        else:
            history.best_epoch = epoch
            best = _snapshot(model)
        history.records.append(record)
        history.timings.append({"epoch": epoch, "seconds": time.perf_counter() - start})
        if log is not None:
            log(record)
        if stop_at_dev_f1 is not None and record["dev_macro_f1"] is not None \
                and record["dev_macro_f1"] >= stop_at_dev_f1:
            break
    model.load_state_dict(best)
    model.eval()
    return history, best

