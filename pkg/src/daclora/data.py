"""Synthetic few-shot image tasks and clean / adversarial accuracy."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attack import EVAL_EPSILON, EVAL_ITERS, eval_attack
from .model import DualEncoderModel, predict


@dataclass
class FewShotDataset:
    num_classes: int
    shots: int
    side: int
    seed: int
    difficulty: float
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    x_pretrain: np.ndarray = field(repr=False, default=None)
    y_pretrain: np.ndarray = field(repr=False, default=None)

    @property
    def d_pixels(self) -> int:
        return self.side * self.side

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_train, self.y_train, self.x_test, self.y_test, self.x_pretrain, self.y_pretrain):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _low_freq_field(rng: np.random.Generator, n: int, side: int, freqs: int) -> np.ndarray:
    """Random smooth images built from the lowest ``freqs x freqs`` cosine modes, unit pixel std."""
    grid = (np.arange(side) + 0.5) / side
    basis = np.cos(np.pi * np.outer(np.arange(freqs), grid))  # (freqs, side)
    coef = rng.normal(size=(n, freqs, freqs))
    img = np.einsum("nij,ia,jb->nab", coef, basis, basis)
    img /= img.reshape(n, -1).std(axis=1)[:, None, None]
    return img.reshape(n, side * side)


def _code_bits(num_classes: int) -> int:
    return max(1, int(np.ceil(np.log2(num_classes))))


def _shortcut_codes(num_classes: int) -> np.ndarray:
    """Row ``c`` is the binary expansion of ``c`` as a +-1 vector."""
    bits = _code_bits(num_classes)
    return np.array([[1.0 if (c >> j) & 1 else -1.0 for j in range(bits)] for c in range(num_classes)])


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the synthetic image model.

    Each image is ``0.5 + template + shortcut + noise`` where the template
    is a smooth per-class pattern, the shortcut a faint per-class
    high-frequency sign pattern, and the noise a smooth random field plus
    white noise.
    """

    template_amp: float = 0.12
    shortcut_amp: float = 0.006
    smooth_noise: float = 0.12
    white_noise: float = 0.01
    template_freqs: int = 4
    pretrain_shortcut: bool = True
    pretrain_noise_scale: float = 1.3


def make_dataset(num_classes: int = 8, shots: int = 4, seed: int = 0, difficulty: float = 1.0,
                 test_per_class: int = 64, pretrain_per_class: int = 512, side: int = 16,
                 params: GeneratorParams | None = None) -> FewShotDataset:
    """Class-conditional structured noise; ``difficulty`` scales the noise.

    Templates and shortcut patterns depend only on ``seed``; train, test and
    pretraining splits are drawn independently from them.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    p = params or GeneratorParams()
    ss = np.random.SeedSequence(seed)
    proto_rng, train_rng, test_rng, pre_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    d = side * side
    templates = p.template_amp * _low_freq_field(proto_rng, num_classes, side, p.template_freqs)
    shortcuts = p.shortcut_amp * _shortcut_codes(num_classes) @ proto_rng.choice([-1.0, 1.0], size=(_code_bits(num_classes), d))

    def draw(rng, per_class, with_shortcut=True, noise_scale=1.0):
        y = np.repeat(np.arange(num_classes), per_class)
        n = len(y)
        noise = difficulty * noise_scale * (p.smooth_noise * _low_freq_field(rng, n, side, p.template_freqs)
                              + p.white_noise * rng.normal(size=(n, d)))
        x = 0.5 + templates[y] + noise
        if with_shortcut:
            x = x + shortcuts[y]
        x = np.clip(x, 0.0, 1.0)
        order = rng.permutation(n)
        return x[order], y[order]

    x_tr, y_tr = draw(train_rng, shots)
    x_te, y_te = draw(test_rng, test_per_class)
    x_pre, y_pre = draw(pre_rng, pretrain_per_class, p.pretrain_shortcut, p.pretrain_noise_scale)
    return FewShotDataset(num_classes, shots, side, seed, difficulty, x_tr, y_tr, x_te, y_te, x_pre, y_pre)


def clean_accuracy(model: DualEncoderModel, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty split")
    return float((predict(model, x) == y).mean())


def adversarial_accuracy(model: DualEncoderModel, x, y, epsilon: float = EVAL_EPSILON,
                         iters: int = EVAL_ITERS) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty split")
    x_adv = eval_attack(model, x, y, epsilon=epsilon, iters=iters)
    return float((predict(model, x_adv) == y).mean())


@dataclass
class EvalReport:
    clean_accuracy: float
    adv_accuracy: float
    epsilon: float
    per_class_accuracy: list[float]


def evaluate(model: DualEncoderModel, x, y, epsilon: float = EVAL_EPSILON, iters: int = EVAL_ITERS) -> EvalReport:
    y = np.asarray(y)
    pred = predict(model, x)
    classes = range(model.num_classes)
    per_class = [float((pred[y == c] == c).mean()) if np.any(y == c) else float("nan") for c in classes]
    return EvalReport(float((pred == y).mean()), adversarial_accuracy(model, x, y, epsilon, iters), epsilon, per_class)
