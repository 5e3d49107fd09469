"""Three-arm comparison and the shots x budget ablation grid.

Every arm starts from a bit-identical copy of one pretrained backbone, so
differences between arms come only from how the adapters were trained.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .attack import EVAL_EPSILON, EVAL_ITERS
from .data import EvalReport, FewShotDataset, adversarial_accuracy, evaluate
from .model import DualEncoderModel, build_model, frozen_hash
from .trainer import StepReport, TrainConfig, pretrain_backbone, train

# arm name -> training mode
ARMS = {"clip_lora": "clean", "pgd_lora": "fixed_pgd", "dac_lora": "dac"}
ABLATION_SHOTS = (4, 16)
ABLATION_EPS = (2 / 255, 8 / 255)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    rank: int = 4
    gamma: float = 1.0
    tau: float = 10.0
    adapt_text: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class PretrainConfig:
    """Clean supervised fit standing in for a large pretrained encoder."""

    steps: int = 8000
    lr: float = 0.1
    batch_size: int = 128


def _derived_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


_backbone_cache: dict[str, DualEncoderModel] = {}


def pretrained_backbone(ds: FewShotDataset, model_cfg: ModelConfig | None = None,
                        pre_cfg: PretrainConfig | None = None, seed: int = 0) -> DualEncoderModel:
    """Backbone fitted on the dataset's pretraining split, adapters zeroed and frozen weights locked.

    Results are memoised on (pretraining data, configs, seed); callers get a copy.
    """
    model_cfg, pre_cfg = model_cfg or ModelConfig(), pre_cfg or PretrainConfig()
    if ds.x_pretrain is None or len(ds.x_pretrain) == 0:
        raise ValueError("dataset has no pretraining split")
    h = hashlib.sha256(np.ascontiguousarray(ds.x_pretrain).tobytes())
    h.update(np.ascontiguousarray(ds.y_pretrain).tobytes())
    h.update(repr((asdict(model_cfg), asdict(pre_cfg), seed)).encode())
    key = h.hexdigest()
    if key not in _backbone_cache:
        init_seed, batch_seed = _derived_seeds(seed, 2)
        m = build_model(ds.d_pixels, ds.num_classes, seed=init_seed, **asdict(model_cfg))
        pretrain_backbone(m, ds.x_pretrain, ds.y_pretrain, steps=pre_cfg.steps, lr=pre_cfg.lr,
                          batch_size=pre_cfg.batch_size, seed=batch_seed)
        _backbone_cache[key] = m
    return _backbone_cache[key].copy()


@dataclass
class ExperimentResult:
    arm: str
    seed: int
    config: dict
    eval: EvalReport
    reports: list[StepReport] = field(repr=False)
    start_hash: str = ""
    collapsed: bool = False
    model: DualEncoderModel | None = field(default=None, repr=False)


def run_experiment(ds: FewShotDataset, arms: Sequence[str] = tuple(ARMS), shared_seed: int = 0,
                   train_cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
                   pre_cfg: PretrainConfig | None = None, eval_epsilon: float = EVAL_EPSILON,
                   eval_iters: int = EVAL_ITERS, backbone: DualEncoderModel | None = None,
                   callback: Callable[[str, StepReport], None] | None = None) -> list[ExperimentResult]:
    """Train and evaluate each arm from the same backbone snapshot."""
    unknown = [a for a in arms if a not in ARMS]
    if unknown or not arms:
        raise ValueError(f"arms must be a non-empty subset of {list(ARMS)}, got {list(arms)}")
    train_cfg = train_cfg or TrainConfig()
    model_cfg, pre_cfg = model_cfg or ModelConfig(), pre_cfg or PretrainConfig()
    base = backbone if backbone is not None else pretrained_backbone(ds, model_cfg, pre_cfg, shared_seed)
    results = []
    for arm in arms:
        model = base.copy()
        start = frozen_hash(model)
        cfg = replace(train_cfg, mode=ARMS[arm], seed=shared_seed)
        cb = None if callback is None else (lambda r, arm=arm: callback(arm, r))
        reports, _ = train(model, ds.x_train, ds.y_train, cfg, callback=cb)
        if frozen_hash(model) != start:
            raise RuntimeError(f"arm {arm}: frozen weights changed during training")
        report = evaluate(model, ds.x_test, ds.y_test, eval_epsilon, eval_iters)
        config = {"arm": arm, "train": cfg.to_dict(), "model": asdict(model_cfg), "pretrain": asdict(pre_cfg),
                  "eval": {"epsilon": eval_epsilon, "iters": eval_iters}, "dataset": ds.digest()}
        collapsed = report.clean_accuracy < 2 / ds.num_classes
        results.append(ExperimentResult(arm, shared_seed, config, report, reports, start, collapsed, model))
    return results


@dataclass
class AblationCell:
    shots: int
    train_epsilon: float
    clean_accuracy: float
    adv_accuracy: dict[float, float]  # eval epsilon -> accuracy


def ablation_sweep(dataset_factory: Callable[[int], FewShotDataset], shots: Sequence[int] = ABLATION_SHOTS,
                   train_eps: Sequence[float] = ABLATION_EPS, eval_eps: Sequence[float] = ABLATION_EPS,
                   seed: int = 0, train_cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
                   pre_cfg: PretrainConfig | None = None, eval_iters: int = EVAL_ITERS) -> list[AblationCell]:
    """DAC arm over the shots x training-budget grid, each model scored at every eval budget."""
    if not shots or not train_eps or not eval_eps:
        raise ValueError("ablation grid is empty")
    train_cfg = train_cfg or TrainConfig()
    cells = []
    for k in shots:
        ds = dataset_factory(k)
        base = pretrained_backbone(ds, model_cfg, pre_cfg, seed)
        for eps in train_eps:
            cfg = replace(train_cfg, attack=replace(train_cfg.attack, epsilon=eps, alpha=eps / 4))
            res = run_experiment(ds, ["dac_lora"], seed, cfg, model_cfg, pre_cfg, backbone=base,
                                 eval_epsilon=0.0, eval_iters=eval_iters)[0]
            adv = {float(e): adversarial_accuracy(res.model, ds.x_test, ds.y_test, e, eval_iters) for e in eval_eps}
            cells.append(AblationCell(int(k), float(eps), res.eval.clean_accuracy, adv))
    return cells
