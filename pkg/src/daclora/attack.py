"""L-infinity PGD, the FOSC convergence score, and curriculum-gated attacks.

All attack routines work on plain ``(B, d)`` numpy arrays and treat each
row as an independent example: gradients are taken of the *summed*
per-example cross-entropy, so row ``i`` of the gradient is exactly the
gradient of example ``i``'s own loss. Model parameters are only read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .model import DualEncoderModel, logits

EVAL_EPSILON = 8 / 255
EVAL_ITERS = 20
FEASIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float | None = None  # defaults to epsilon / 4
    max_iters: int = 10
    lo: float = 0.0
    hi: float = 1.0
    random_init: bool = False

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4)
        if not (0 < self.alpha <= self.epsilon):
            raise ValueError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("pixel bounds need lo < hi")


@dataclass
class AttackResult:
    """Batch of attacked examples; per-example statistics are arrays of length B."""

    x_adv: np.ndarray
    iters_used: np.ndarray
    fosc_at_halt: np.ndarray
    loss_at_halt: np.ndarray
    potency: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x_adv)

    def max_violation(self, x0: np.ndarray, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> float:
        """Largest amount by which any example breaks the ball or pixel constraint."""
        return constraint_violation(self.x_adv, x0, epsilon, lo, hi)


def constraint_violation(x_adv, x0, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> float:
    x_adv, x0 = np.asarray(x_adv), np.asarray(x0)
    ball = np.abs(x_adv - x0).max(initial=0.0) - epsilon
    pix = max(lo - x_adv.min(initial=lo), x_adv.max(initial=hi) - hi)
    return float(max(ball, pix, 0.0))


def loss_and_input_grad(model: DualEncoderModel, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-example cross-entropy values and their gradients w.r.t. the input rows."""
    xt = ag.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = logits(model, xt)
    loss = ag.cross_entropy(out, y, reduction="sum")
    ag.backward(loss, [xt])
    y = np.asarray(y)
    per_example = -ag.log_softmax(out.data)[np.arange(len(y)), y]
    return per_example, xt.grad


def input_grad(model: DualEncoderModel, x, y, reduction: str = "mean") -> np.ndarray:
    """Gradient of the batch cross-entropy w.r.t. the input pixels.

    Uses a private leaf, so parameter grad slots are never touched.
    """
    xt = ag.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    loss = ag.cross_entropy(logits(model, xt), y, reduction=reduction)
    ag.backward(loss, [xt])
    return xt.grad


def pgd_step(x_k, x0, g, epsilon: float, alpha: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """One signed-gradient ascent step, projected onto the eps-ball then the pixel box."""
    x_k, x0, g = (np.asarray(a, dtype=np.float64) for a in (x_k, x0, g))
    if not (x_k.shape == x0.shape == g.shape):
        raise ag.ShapeError(f"pgd_step shapes differ: {x_k.shape}, {x0.shape}, {g.shape}")
    if x_k.size and np.abs(x_k - x0).max() > epsilon + FEASIBILITY_TOL:
        raise ValueError("pgd_step: current iterate lies outside the epsilon-ball")
    x = x_k + alpha * np.sign(g)
    x = np.clip(x, x0 - epsilon, x0 + epsilon)
    return np.clip(x, lo, hi)


def fosc_scores(x_adv, x0, g, epsilon: float) -> np.ndarray:
    """Row-wise ``eps * |g|_1 - <x_adv - x0, g>``."""
    x_adv, x0, g = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x_adv, x0, g))
    delta = x_adv - x0
    if delta.size and np.abs(delta).max() > epsilon + FEASIBILITY_TOL:
        raise ValueError("fosc_score: perturbation exceeds the epsilon budget")
    # x0 + eps - x0 can miss eps by an ulp either way; clipping makes every
    # per-pixel slack exactly >= 0 (rounding is monotone)
    delta = np.clip(delta, -epsilon, epsilon)
    # iterates that sit on the ball boundary up to rounding count as on it
    delta = np.where(np.abs(delta) >= epsilon - FEASIBILITY_TOL, np.sign(delta) * epsilon, delta)
    return (epsilon * np.abs(g) - delta * g).sum(axis=1)


def fosc_score(x_adv, x0, g, epsilon: float) -> float:
    x_adv, x0, g = (np.asarray(a, dtype=np.float64).ravel() for a in (x_adv, x0, g))
    return float(fosc_scores(x_adv[None], x0[None], g[None], epsilon)[0])


def _start_point(x0: np.ndarray, cfg: AttackConfig, rng: np.random.Generator | None) -> np.ndarray:
    if not cfg.random_init:
        return x0.copy()
    if rng is None:
        raise ValueError("random_init needs an rng")
    noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
    return np.clip(x0 + noise, cfg.lo, cfg.hi)


def _pgd_loop(model, x0, y, cfg: AttackConfig, c_t: float, gated: bool, rng=None) -> AttackResult:
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    n = len(x0)
    x = _start_point(x0, cfg, rng)
    iters = np.zeros(n, dtype=np.int64)
    fosc = np.zeros(n)
    loss_halt = np.zeros(n)
    active = np.ones(n, dtype=bool)

    _, g = loss_and_input_grad(model, x, y)
    for k in range(1, cfg.max_iters + 1):
        stepped = pgd_step(x, x0, g, cfg.epsilon, cfg.alpha, cfg.lo, cfg.hi)
        x = np.where(active[:, None], stepped, x)
        # the gradient at the new iterate feeds both the FOSC check and the next step
        losses, g = loss_and_input_grad(model, x, y)
        c = fosc_scores(x, x0, g, cfg.epsilon)
        halt = active & (c < c_t) if gated else np.zeros(n, dtype=bool)
        if k == cfg.max_iters:
            halt = active.copy()
        iters[halt] = k
        fosc[halt] = c[halt]
        loss_halt[halt] = losses[halt]
        active &= ~halt
        if not active.any():
            break
    return AttackResult(x, iters, fosc, loss_halt)


def fosc_pgd(model: DualEncoderModel, x0, y, c_t: float, cfg: AttackConfig,
             rng: np.random.Generator | None = None) -> AttackResult:
    """PGD that stops each example at the first step whose FOSC drops below ``c_t``.

    At least one step is always taken; examples that never cross the
    threshold stop at ``cfg.max_iters``.
    """
    if c_t < 0:
        raise ValueError("FOSC threshold must be non-negative")
    return _pgd_loop(model, x0, y, cfg, c_t, gated=True, rng=rng)


def pgd(model: DualEncoderModel, x0, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackResult:
    """Fixed-strength PGD: always ``cfg.max_iters`` steps, no gating."""
    return _pgd_loop(model, x0, y, cfg, 0.0, gated=False, rng=rng)


AttackFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def potency_levels(rho0: float, rho_max: float, d_rho: float) -> list[float]:
    if rho0 > rho_max:
        raise ValueError("rho0 must not exceed rho_max")
    if d_rho <= 0:
        raise ValueError("d_rho must be positive")
    count = math.floor((rho_max - rho0) / d_rho + 1e-9) + 1
    return [rho0 + i * d_rho for i in range(count)]


def generalized_dac_attack(model: DualEncoderModel, x0, y, c_t: float, attack_fn: AttackFn,
                           rho0: float, rho_max: float, d_rho: float, epsilon: float) -> AttackResult:
    """Escalate an arbitrary attack's potency until its output is FOSC-potent enough.

    ``attack_fn(x0, y, rho)`` is called on the examples still pending at each
    potency ``rho0, rho0 + d_rho, ...`` (never above ``rho_max``). Each example
    keeps the first output whose FOSC score is below ``c_t``, else the output
    at the last potency. ``iters_used`` counts attack calls per example.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    n = len(x0)
    levels = potency_levels(rho0, rho_max, d_rho)
    x_adv = x0.copy()
    calls = np.zeros(n, dtype=np.int64)
    fosc = np.zeros(n)
    loss_halt = np.zeros(n)
    potency = np.zeros(n)
    pending = np.arange(n)
    for i, rho in enumerate(levels):
        out = np.asarray(attack_fn(x0[pending], y[pending], rho), dtype=np.float64)
        losses, g = loss_and_input_grad(model, out, y[pending])
        c = fosc_scores(out, x0[pending], g, epsilon)
        last = i == len(levels) - 1
        done = np.ones(len(pending), dtype=bool) if last else c < c_t
        idx = pending[done]
        x_adv[idx] = out[done]
        fosc[idx] = c[done]
        loss_halt[idx] = losses[done]
        potency[idx] = rho
        calls[pending] += 1
        pending = pending[~done]
        if not len(pending):
            break
    return AttackResult(x_adv, calls, fosc, loss_halt, potency)


def pgd_attack_fn(model: DualEncoderModel, cfg: AttackConfig) -> AttackFn:
    """PGD with potency = iteration count, for use with :func:`generalized_dac_attack`."""

    def run(x0, y, rho):
        steps = int(round(rho))
        return pgd(model, x0, y, AttackConfig(cfg.epsilon, cfg.alpha, steps, cfg.lo, cfg.hi)).x_adv

    return run


def eval_attack(model: DualEncoderModel, x0, y, epsilon: float = EVAL_EPSILON, iters: int = EVAL_ITERS,
                alpha: float | None = None) -> np.ndarray:
    """Fixed evaluation attack (20-step PGD at 8/255 by default). ``epsilon=0`` is a no-op."""
    x0 = np.asarray(x0, dtype=np.float64)
    if epsilon == 0:
        return x0.copy()
    return pgd(model, x0, y, AttackConfig(epsilon, alpha, iters)).x_adv


def fgsm(model: DualEncoderModel, x0, y, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    g = input_grad(model, x0, y)
    return np.clip(x0 + epsilon * np.sign(g), lo, hi)
