"""
Training loops for target language models and explainers.

`train_lm` fits next-token prediction on a token corpus; `fine_tune` fits the
cross-entropy on explanation tokens only (the question tokens are masked
out), optionally pushing gradients into a projection set that maps feature
vectors into the explainer's embedding space.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .autodiff import Tensor
from .transformer import Transformer

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 16
    steps: int = 1000
    epochs: int = 10
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


class Adam:
    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None):
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]

        if cfg.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]

        self.t += 1
        correction1 = 1 - cfg.beta1 ** self.t
        correction2 = 1 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
            p.data -= update.astype(p.data.dtype)


def masked_cross_entropy(logits: Tensor, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean cross-entropy of the tokens flagged in `mask`.

    The logits at position i-1 predict token i, so mask[:, 0] is ignored.
    With nothing selected the result is a constant zero with no graph.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool).copy()
    mask[:, 0] = False
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))

    b_idx, t_idx = np.nonzero(mask)
    selector = np.zeros(logits.shape, dtype=logits.dtype)
    selector[b_idx, t_idx - 1, ids[b_idx, t_idx]] = 1.0 / count
    return -(logits.log_softmax(axis=-1) * Tensor(selector)).sum()


@dataclass
class SlotRef:
    """A continuous input: `vector` at `position`, projected through layer `layer` when set."""
    position: int
    vector: np.ndarray
    layer: Optional[int] = None


@dataclass
class TrainingExample:
    ids: List[int]
    mask: List[bool]
    slots: List[SlotRef] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ValueError(f"ids and mask lengths differ ({len(self.ids)} vs {len(self.mask)})")


class Trainer:
    def __init__(self, model: Transformer, config: OptimizerConfig, projections=None, train_projections: bool = False,
                 pad_id: int = 0):
        self.model = model
        self.config = config
        self.projections = projections
        self.pad_id = pad_id
        params = [p for _, p in model.parameters()]
        if projections is not None and train_projections:
            params.extend(projections.parameters())
        self.optimizer = Adam(params, config)

    def _slot_row(self, slot: SlotRef):
        if self.projections is not None and slot.layer is not None:
            return self.projections.project(slot.vector, slot.layer)
        return np.asarray(slot.vector, dtype=self.model.dtype)

    def collate(self, batch: Sequence[TrainingExample]) -> Tuple[np.ndarray, np.ndarray, list]:
        width = max(len(ex.ids) for ex in batch)
        ids = np.full((len(batch), width), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(batch), width), dtype=bool)
        slots = []
        for row, ex in enumerate(batch):
            ids[row, :len(ex.ids)] = ex.ids
            mask[row, :len(ex.mask)] = ex.mask
            for slot in ex.slots:
                slots.append((row, slot.position, self._slot_row(slot)))
        return ids, mask, slots

    def loss(self, batch: Sequence[TrainingExample]) -> Tensor:
        ids, mask, slots = self.collate(batch)
        logits, _ = self.model.run(ids, slots, tap_layers=())
        return masked_cross_entropy(logits, ids, mask)

    def step(self, batch: Sequence[TrainingExample], lr: Optional[float] = None) -> float:
        """One optimizer step; a batch with no selected tokens leaves the weights untouched."""
        self.optimizer.zero_grad()
        loss = self.loss(batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(f"Non-finite loss {value} at optimizer step {self.optimizer.t + 1}")
        if not loss.requires_grad:
            return value
        loss.backward()
        self.optimizer.step(lr)
        return value


def train_lm(model: Transformer, corpus: Sequence[Sequence[int]], config: OptimizerConfig) -> List[float]:
    """Next-token training on `corpus`; returns the per-step losses."""
    if not corpus:
        raise ValueError("Cannot train on an empty corpus")
    vocab = model.config.vocab_size
    for seq in corpus:
        if len(seq) > model.config.context_length:
            raise ValueError(f"Corpus sequence of length {len(seq)} exceeds context length {model.config.context_length}")
        if min(seq) < 0 or max(seq) >= vocab:
            raise ValueError(f"Corpus contains a token outside the vocabulary of size {vocab}")

    examples = [TrainingExample(list(seq), [True] * len(seq)) for seq in corpus]
    trainer = Trainer(model, config)
    rng = np.random.default_rng(config.seed)
    losses = []
    for step in range(config.steps):
        picks = rng.integers(0, len(examples), size=min(config.batch_size, len(examples)))
        loss = trainer.step([examples[i] for i in picks])
        losses.append(loss)
        if (step + 1) % config.log_every == 0 or step == 0:
            logger.info(f"train_lm step {step + 1}/{config.steps} loss {loss:.4f}")
    return losses


def fine_tune(model: Transformer, examples: Sequence[TrainingExample], config: OptimizerConfig,
              projections=None, train_projections: bool = False,
              on_epoch_end: Optional[Callable[[int, Transformer], Dict[str, float]]] = None
              ) -> Tuple[List[float], List[Dict[str, float]]]:
    """
    Train on explanation tokens only for `config.epochs` epochs.

    Returns the per-step losses and the per-epoch metric dicts produced by
    `on_epoch_end` (empty when no callback is given).
    """
    if not examples:
        raise ValueError("Cannot fine-tune on an empty dataset")
    maskable = sum(sum(ex.mask[1:]) for ex in examples)
    if maskable == 0:
        raise ValueError("Dataset has no explanation tokens to train on (every loss mask is empty)")

    trainer = Trainer(model, config, projections, train_projections)
    rng = np.random.default_rng(config.seed)
    losses: List[float] = []
    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            losses.append(trainer.step(batch))
            if len(losses) % config.log_every == 0:
                logger.info(f"fine_tune epoch {epoch + 1} step {len(losses)} loss {losses[-1]:.4f}")
        if on_epoch_end is not None:
            metrics = dict(on_epoch_end(epoch, model))
            metrics["epoch"] = epoch + 1
            history.append(metrics)
            logger.info(f"fine_tune epoch {epoch + 1} validation {metrics}")
    return losses, history


def split_groups(keys: Sequence[str], test_fraction: float, seed: int) -> Tuple[List[str], List[str]]:
    """Split distinct group keys into (train, test) so no group straddles both sides."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups = sorted(set(keys))
    if len(groups) < 2:
        raise ValueError(f"Need at least two groups to split, got {len(groups)}")
    rng = np.random.default_rng(seed)
    n_test = min(max(1, int(round(test_fraction * len(groups)))), len(groups) - 1)
    test = set(rng.choice(len(groups), size=n_test, replace=False).tolist())
    return ([g for i, g in enumerate(groups) if i not in test], [g for i, g in enumerate(groups) if i in test])


def save_loss_curve(path: str, losses: Sequence[float]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame({"step": np.arange(1, len(losses) + 1), "loss": losses})
    frame.to_csv(path, index=False, float_format="%.6f")
