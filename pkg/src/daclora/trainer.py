"""LoRA fine-tuning loops: clean, fixed-strength PGD, and the FOSC curriculum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .attack import AttackConfig, constraint_violation, fosc_pgd, pgd
from .model import DualEncoderModel, ParamPartition, encode_image, logits, partition_params, unfreeze_backbone

MODES = ("clean", "fixed_pgd", "dac")


class StateError(RuntimeError):
    pass


def fosc_threshold(t: int, c_max: float, t_prime: int) -> float:
    """Linearly decaying FOSC threshold, clipped at zero from ``t_prime`` on."""
    if t_prime < 1:
        raise ValueError("t_prime must be >= 1")
    if t >= t_prime:
        return 0.0  # the linear form can round to ~1e-16 here
    return max(c_max - t * c_max / t_prime, 0.0)


@dataclass
class CurriculumState:
    t: int = 0
    c_max: float = 0.1
    t_prime: int = 250

    @property
    def c_t(self) -> float:
        return fosc_threshold(self.t, self.c_max, self.t_prime)


@dataclass
class TrainConfig:
    total_iters: int = 500
    lr: float = 0.1
    lr_schedule: str = "constant"
    momentum: float = 0.0
    beta: float = 1.0
    batch_size: int = 128
    mode: str = "dac"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=8 / 255))
    c_max: float = 0.1
    t_prime: int | None = None  # None -> total_iters // 2
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.t_prime is None:
            self.t_prime = max(self.total_iters // 2, 1)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 1 <= self.t_prime <= self.total_iters:
            raise ValueError("t_prime must lie in [1, total_iters]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, t: int) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1 + math.cos(math.pi * t / self.total_iters))
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    t: int
    loss_total: float
    loss_ce: float
    loss_sim: float
    mean_iters_used: float
    mean_fosc_at_halt: float
    c_t: float | None
    max_violation: float = 0.0


def trades_terms(model: DualEncoderModel, x0, x_adv, y, beta: float) -> tuple[ag.Tensor, ag.Tensor, ag.Tensor]:
    """``(total, ce, sim)`` with ``total = CE(adv) + beta * mean(1 - cos(f(x0), f(x_adv)))``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    # tensors pass through untouched so callers can differentiate w.r.t. pixels
    x0, x_adv = ag.as_tensor(x0), ag.as_tensor(x_adv)
    if x0.shape != x_adv.shape or x0.shape[0] != len(y):
        raise ag.ShapeError("clean batch, adversarial batch and labels must align")
    ce = ag.cross_entropy(logits(model, x_adv), y)
    cos = ag.cosine_similarity(encode_image(model, x0), encode_image(model, x_adv))
    sim = ag.sub(1.0, ag.mean(cos))
    return ag.add(ce, ag.scale(sim, beta)), ce, sim


def trades_loss(model: DualEncoderModel, x0, x_adv, y, beta: float) -> ag.Tensor:
    return trades_terms(model, x0, x_adv, y, beta)[0]


def sgd_update(partition: ParamPartition, lr: float, velocity: dict[int, np.ndarray] | None = None,
               momentum: float = 0.0) -> None:
    """``p <- p - lr * grad`` on trainable tensors only, then clear their grads.

    Parameters are rebound to fresh arrays rather than written in place, so
    earlier snapshots of ``p.data`` stay valid.
    """
    missing = [i for i, p in enumerate(partition.trainable) if p.grad is None]
    if missing:
        raise StateError(f"trainable tensors {missing} have no gradient")
    for i, p in enumerate(partition.trainable):
        step = p.grad
        if momentum and velocity is not None:
            v = velocity.get(i)
            step = step if v is None else momentum * v + step
            velocity[i] = step
        p.data = p.data - lr * step
        p.grad = None


def train_step(model: DualEncoderModel, batch: tuple[np.ndarray, np.ndarray], state: CurriculumState,
               cfg: TrainConfig, partition: ParamPartition | None = None, rng: np.random.Generator | None = None,
               velocity: dict | None = None) -> StepReport:
    x0, y = np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1])
    if len(x0) == 0:
        raise ValueError("empty batch")
    partition = partition if partition is not None else partition_params(model)
    c_t = None
    iters_mean = fosc_mean = 0.0
    violation = 0.0

    if cfg.mode == "clean":
        ce = ag.cross_entropy(logits(model, x0), y)
        total, sim = ce, ag.Tensor(0.0)
    else:
        if cfg.mode == "dac":
            c_t = state.c_t
            res = fosc_pgd(model, x0, y, c_t, cfg.attack, rng=rng)
        else:
            res = pgd(model, x0, y, cfg.attack, rng=rng)
        violation = constraint_violation(res.x_adv, x0, cfg.attack.epsilon, cfg.attack.lo, cfg.attack.hi)
        iters_mean = float(res.iters_used.mean())
        fosc_mean = float(res.fosc_at_halt.mean())
        total, ce, sim = trades_terms(model, x0, res.x_adv, y, cfg.beta)

    if not np.isfinite(total.data).all():
        raise FloatingPointError(f"non-finite loss at step {state.t}")
    ag.backward(total, partition.trainable)
    sgd_update(partition, cfg.lr_at(state.t), velocity, cfg.momentum)
    return StepReport(state.t, total.item(), ce.item(), sim.item(), iters_mean, fosc_mean, c_t, violation)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch."""
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def train(model: DualEncoderModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
          callback: Callable[[StepReport], None] | None = None) -> tuple[list[StepReport], DualEncoderModel]:
    """Run ``cfg.total_iters`` LoRA updates in place; one report per step."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty training set")
    batch_rng, attack_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    partition = partition_params(model)
    velocity: dict = {}
    batches = iterate_batches(len(x), cfg.batch_size, batch_rng)
    state = CurriculumState(0, cfg.c_max, cfg.t_prime)
    reports = []
    for t in range(cfg.total_iters):
        state.t = t
        idx = next(batches)
        report = train_step(model, (x[idx], y[idx]), state, cfg, partition, attack_rng, velocity)
        reports.append(report)
        if callback is not None:
            callback(report)
    return reports, model


def pretrain_backbone(model: DualEncoderModel, x: np.ndarray, y: np.ndarray, steps: int = 300, lr: float = 0.1,
                      batch_size: int = 64, seed: int = 0, weight_decay: float = 0.0) -> DualEncoderModel:
    """Fit the image-encoder weights on clean data, then freeze them.

    This stands in for a pretrained backbone; afterwards only adapters train.
    """
    params = unfreeze_backbone(model)
    rng = np.random.default_rng(seed)
    batches = iterate_batches(len(x), batch_size, rng)
    for _ in range(steps):
        idx = next(batches)
        loss = ag.cross_entropy(logits(model, x[idx]), y[idx])
        ag.backward(loss, params)
        for p in params:
            p.data = p.data * (1 - lr * weight_decay) - lr * p.grad
            p.grad = None
    partition_params(model)
    return model
