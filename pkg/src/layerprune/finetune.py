"""Toy-scale drop-then-fine-tune experiments with exact gradients.

Everything random is derived from ``TrainConfig.seed`` (head init, per-epoch
shuffles) or ``SyntheticTask.seed`` (data), so equal configs give bitwise
equal runs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    EncoderModel,
    TokenBatch,
    cross_entropy,
    load_weights,
    logits,
    loss_and_grads,
)
from .strategies import DropPlan, PlanError, Strategy, make_plan
from .surgery import apply_plan
from .tensorstore import Checkpoint
from .topology import infer_topology

PAD_ID = 0
CLS_ID = 1
_FIRST_CONTENT_ID = 2


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    SGD_MOMENTUM = "sgd-momentum"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 0.1
    batch_size: int = 16
    seed: int = 0
    optimizer: Optimizer = Optimizer.SGD
    momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {**self.__dict__, "optimizer": self.optimizer.value}


@dataclass(frozen=True)
class SyntheticTask:
    """Random token sequences with a deterministic labelling rule.

    Position 0 always holds the CLS token. Rules:

    ``position1``  label = class of the token at position 1 (linearly separable)
    ``pair``       label = (class of token 1 + class of token 2) mod C
    """

    vocab_size: int = 24
    seq_len: int = 8
    num_classes: int = 2
    rule: str = "position1"
    n_train: int = 256
    n_dev: int = 128
    seed: int = 0
    min_len: int | None = None

    RULES = ("position1", "pair")

    def __post_init__(self):
        if self.rule not in self.RULES:
            raise ValueError(f"unknown rule {self.rule!r}; choose from {self.RULES}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.vocab_size - _FIRST_CONTENT_ID < self.num_classes:
            raise ValueError("vocab too small for the class count")
        if self.seq_len < 3 or (self.min_len is not None and not 3 <= self.min_len <= self.seq_len):
            raise ValueError("sequences need at least 3 positions")

    def label(self, tokens) -> int:
        cls = [(t - _FIRST_CONTENT_ID) % self.num_classes for t in tokens[1:3]]
        if self.rule == "position1":
            return cls[0]
        return (cls[0] + cls[1]) % self.num_classes

    def generate(self) -> tuple[TokenBatch, TokenBatch]:
        """Disjoint (train, dev) batches."""
        rng = np.random.default_rng(self.seed)
        min_len = self.seq_len if self.min_len is None else self.min_len
        need = self.n_train + self.n_dev
        space = (self.vocab_size - _FIRST_CONTENT_ID) ** (min_len - 1)
        if need > space:
            raise ValueError(f"cannot draw {need} distinct sequences from a space of {space}")
        seen, seqs = set(), []
        while len(seqs) < need:
            n = int(rng.integers(min_len, self.seq_len + 1))
            body = rng.integers(_FIRST_CONTENT_ID, self.vocab_size, size=n - 1)
            seq = (CLS_ID, *map(int, body))
            if seq not in seen:
                seen.add(seq)
                seqs.append(seq)
        labels = [self.label(s) for s in seqs]
        train = TokenBatch.from_sequences(seqs[: self.n_train], labels[: self.n_train], PAD_ID)
        dev = TokenBatch.from_sequences(seqs[self.n_train :], labels[self.n_train :], PAD_ID)
        return train, dev

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainMetrics:
    step_losses: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    initial_dev_accuracy: float = float("nan")
    events: list[dict] = field(default_factory=list)

    @property
    def dev_accuracy(self) -> float:
        return self.epochs[-1]["dev_accuracy"] if self.epochs else self.initial_dev_accuracy

    @property
    def train_accuracy(self) -> float:
        return self.epochs[-1]["train_accuracy"] if self.epochs else float("nan")

    def records(self) -> list[dict]:
        """Line-delimited records: one per step, one per event, then a summary."""
        out = []
        step_epoch = {}
        for rec in self.epochs:
            for s in range(rec["first_step"], rec["step"] + 1):
                step_epoch[s] = rec["epoch"]
        for s, loss in enumerate(self.step_losses, start=1):
            out.append({"type": "step", "step": s, "epoch": step_epoch.get(s), "loss": loss})
        out.extend({"type": "epoch", **rec} for rec in self.epochs)
        out.extend({"type": "event", **e} for e in self.events)
        out.append({"type": "summary", **self.summary()})
        return out

    def summary(self) -> dict:
        return {
            "steps": len(self.step_losses),
            "epochs": len(self.epochs),
            "initial_dev_accuracy": self.initial_dev_accuracy,
            "final_train_accuracy": self.train_accuracy,
            "final_dev_accuracy": self.dev_accuracy,
            "final_loss": self.step_losses[-1] if self.step_losses else None,
        }


def accuracy(model: EncoderModel, batch: TokenBatch) -> float:
    pred = logits(model, batch).argmax(axis=1)
    return float((pred == batch.labels).mean())


def prune_model(model: EncoderModel, plan: DropPlan) -> EncoderModel:
    """Surgery on the model's checkpoint, then reload as an L-K layer model."""
    ckpt = model.to_checkpoint()
    pruned = apply_plan(ckpt, infer_topology(ckpt, model.scheme), plan)
    cfg = replace(model.config, num_layers=len(plan.kept))
    return replace(load_weights(pruned, cfg, model.scheme), bypass=frozenset())


class _Trainer:
    def __init__(self, model: EncoderModel, task: SyntheticTask, cfg: TrainConfig):
        if model.num_classes is None:
            model = model.with_head(task.num_classes, [cfg.seed, 0x4EAD])
        elif model.num_classes != task.num_classes:
            raise ValueError(f"head has {model.num_classes} classes, task has {task.num_classes}")
        self.model = model.copy()
        self.cfg = cfg
        self.train, self.dev = task.generate()
        self.velocity = None
        self.metrics = TrainMetrics(initial_dev_accuracy=accuracy(self.model, self.dev))

    def run_epoch(self, epoch: int):
        cfg, model = self.cfg, self.model
        n = len(self.train)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        first = len(self.metrics.step_losses) + 1
        losses = []
        for s in range(0, n, cfg.batch_size):
            batch = self.train.take(order[s : s + cfg.batch_size])
            loss, grads = loss_and_grads(model, batch)
            step = len(self.metrics.step_losses) + 1
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss {loss} at step {step} (learning_rate={cfg.learning_rate})"
                )
            self._update(grads)
            self.metrics.step_losses.append(loss)
            losses.append(loss)
        self.metrics.epochs.append({
            "epoch": epoch + 1,
            "first_step": first,
            "step": len(self.metrics.step_losses),
            "loss": math.fsum(losses) / len(losses),
            "train_accuracy": accuracy(model, self.train),
            "dev_accuracy": accuracy(model, self.dev),
            "num_layers": model.config.num_layers,
        })

    def _update(self, grads):
        cfg, params = self.cfg, self.model.params
        lr = params[HEAD_BIAS].dtype.type(cfg.learning_rate)
        if cfg.optimizer is Optimizer.SGD:
            for name, g in grads.items():
                params[name] -= lr * g
            return
        mu = params[HEAD_BIAS].dtype.type(cfg.momentum)
        if self.velocity is None:
            self.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        for name, g in grads.items():
            v = self.velocity[name]
            v *= mu
            v += g
            params[name] -= lr * v

    def drop(self, plan: DropPlan):
        self.model = prune_model(self.model, plan)
        if self.velocity is not None:
            vel = Checkpoint(self.velocity)
            vel = apply_plan(vel, infer_topology(vel, self.model.scheme), plan)
            self.velocity = {k: np.array(v) for k, v in vel.tensors.items()}


def finetune(model: EncoderModel, task: SyntheticTask, cfg: TrainConfig, start_epoch: int = 0):
    """Fine-tune encoder and head on ``task``; returns (trained model, metrics).

    A head is attached (seeded from ``cfg.seed``) when the model has none.
    ``start_epoch`` offsets the shuffle schedule so a run can be continued.
    """
    trainer = _Trainer(model, task, cfg)
    for e in range(start_epoch, start_epoch + cfg.epochs):
        trainer.run_epoch(e)
    return trainer.model, trainer.metrics


def drop_after_finetune(model, task, plan: DropPlan, cfg: TrainConfig):
    """Fine-tune the full model, drop ``plan``'s layers, fine-tune again."""
    tuned, first = finetune(model, task, cfg)
    pruned = prune_model(tuned, plan)
    final, second = finetune(pruned, task, cfg, start_epoch=cfg.epochs)
    return final, {"before_drop": first, "after_drop": second, "layers_after": pruned.config.num_layers}


def gradual_drop_finetune(model, task, plan: DropPlan, cfg: TrainConfig):
    """Remove planned layers one at a time, highest first, after every two
    epochs; the remaining epochs train the fully reduced model."""
    order = sorted(plan.dropped, reverse=True)
    if cfg.epochs < 2 * len(order):
        raise PlanError(f"{len(order)} gradual drops need at least {2 * len(order)} epochs, got {cfg.epochs}")
    if plan.num_layers != model.config.num_layers:
        raise PlanError("plan and model layer counts differ")
    trainer = _Trainer(model, task, cfg)
    for e in range(cfg.epochs):
        trainer.run_epoch(e)
        if order and (e + 1) % 2 == 0:
            layer = order.pop(0)
            L = trainer.model.config.num_layers
            # dropping from the top down leaves lower indices unchanged
            trainer.drop(DropPlan(Strategy.CUSTOM, L, frozenset([layer])))
            trainer.metrics.events.append({"after_epoch": e + 1, "dropped_layer": layer, "num_layers": L - 1})
    return trainer.model, trainer.metrics


def compare_strategies(model: EncoderModel, task: SyntheticTask, K: int, strategies, seeds,
                       cfg: TrainConfig = TrainConfig()) -> dict[str, dict]:
    """Per strategy: drop K layers, fine-tune once per seed, aggregate dev accuracy."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds for a spread estimate")
    L = model.config.num_layers
    table = {}
    for strategy in strategies:
        strategy = Strategy(strategy)
        plan = make_plan(strategy, L, K)
        pruned = prune_model(model, plan)
        accs = [finetune(pruned, task, replace(cfg, seed=s))[1].dev_accuracy for s in seeds]
        table[strategy.value] = {
            "dropped": sorted(plan.dropped),
            "accuracies": accs,
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs, ddof=1)),
        }
    return table


@dataclass
class GradCheck:
    max_relative_error: float
    per_tensor: dict[str, float]


def _numeric_grad(model64: EncoderModel, batch, name, h):
    p = model64.params[name]
    out = np.zeros_like(p)
    flat, gflat = p.reshape(-1), out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = cross_entropy(logits(model64, batch), batch.labels)[0]
        flat[j] = orig - h
        down = cross_entropy(logits(model64, batch), batch.labels)[0]
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return out


def gradient_check(model: EncoderModel, batch: TokenBatch, h: float = 1e-4, floor: float = 1e-4) -> GradCheck:
    """Compare reverse-mode gradients with central finite differences.

    The finite differences are taken on a float64 copy of the model whatever
    its dtype, so they serve as the reference. Per tensor, the error is
    ``|g - g_fd|_2 / max(|g|_2, |g_fd|_2, floor)``; the floor keeps tensors
    whose true gradient is zero (e.g. the key bias, which softmax ignores)
    from dividing noise by noise.
    """
    _, grads = loss_and_grads(model, batch)
    model64 = model.astype(np.float64)
    per_tensor = {}
    for name in sorted(model.params):
        g = grads[name].astype(np.float64)
        fd = _numeric_grad(model64, batch, name, h)
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), floor)
        per_tensor[name] = float(np.linalg.norm(g - fd) / denom)
    return GradCheck(max(per_tensor.values()), per_tensor)
