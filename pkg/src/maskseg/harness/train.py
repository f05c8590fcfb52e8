"""Toy training loop with a hand-written AdamW."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..config import ModelConfig, TrainConfig
from ..loss import LossWeights, batch_loss
from ..model import BACKBONE_PREFIX, SegmentationModel
from ..tensor import Tape, backward
from .checkpoint import encode_checkpoint
from .data import MASK_STRIDE, DatasetRecord

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The training loss became NaN or infinite."""


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` maps each parameter name to its learning-rate multiplier.
    """

    def __init__(self, named_params: dict, lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, lr_mult: dict | None = None):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_mult = {n: (lr_mult or {}).get(n, 1.0) for n in self.params}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * self.lr_mult[name]
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(model: SegmentationModel, train_cfg: TrainConfig) -> AdamW:
    named = dict(model.named_parameters())
    mult = {n: train_cfg.backbone_lr_mult for n in named if n.startswith(BACKBONE_PREFIX)}
    return AdamW(named, train_cfg.lr, train_cfg.weight_decay, train_cfg.betas,
                 train_cfg.eps, mult)


@dataclass
class TrainResult:
    model: SegmentationModel
    losses: list = field(default_factory=list)
    steps: int = 0

    def checkpoint(self) -> bytes:
        return encode_checkpoint(self.model.config, self.model.state_dict())


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; the whole set when it fits."""
    if batch_size >= n:
        while True:
            yield np.arange(n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield np.sort(order[i:i + batch_size])


def _diagnostics(model: SegmentationModel, losses: list) -> str:
    bad = [n for n, p in model.named_parameters()
           if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad)))]
    norms = sorted(((float(np.linalg.norm(p.grad)), n) for n, p in model.named_parameters()
                    if p.grad is not None and np.all(np.isfinite(p.grad))), reverse=True)[:3]
    recent = ", ".join(f"{x:.4g}" for x in losses[-5:])
    return (f"recent losses [{recent}]; non-finite tensors {bad[:5]}; "
            f"largest grad norms {[(n, round(g, 3)) for g, n in norms]}")


def train_toy(config: ModelConfig, records: list[DatasetRecord],
              train_cfg: TrainConfig | None = None,
              callback: Callable[[int, SegmentationModel, float], bool] | None = None
              ) -> TrainResult:
    """Train a fresh model on ``records``.

    ``callback(step, model, loss)`` runs after every step; returning True
    stops training early.  Raises :class:`DivergenceError` on a non-finite loss.
    """
    train_cfg = train_cfg or TrainConfig()
    if not records:
        raise ValueError("training needs at least one record")
    model = SegmentationModel(config)
    images = np.stack([r.image for r in records])
    targets = [r.targets(MASK_STRIDE) for r in records]
    weights = LossWeights.from_config(config)
    opt = make_optimizer(model, train_cfg)
    batches = _batches(len(records), train_cfg.batch_size, np.random.default_rng(train_cfg.seed))
    result = TrainResult(model)
    model.train()
    for step in range(1, train_cfg.steps + 1):
        idx = next(batches)
        model.zero_grad()
        with Tape() as tape:
            final, aux = model(images[idx])
            outputs = [final.mask_logits.data, final.class_logits.data]
            if not all(np.all(np.isfinite(o)) for o in outputs):
                raise DivergenceError(f"non-finite predictions at step {step}: "
                                      + _diagnostics(model, result.losses))
            loss = batch_loss(final, aux, [targets[i] for i in idx], weights)
        value = loss.item()
        result.losses.append(value)
        if not np.isfinite(value):
            raise DivergenceError(f"loss is {value} at step {step}: "
                                  + _diagnostics(model, result.losses))
        backward(tape, loss)
        opt.step()
        result.steps = step
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d loss %.5f", step, value)
        if callback is not None and callback(step, model, value):
            break
    model.eval()
    return result
