"""Poison split and alternating optimization of model parameters and the spectral trigger."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .classifier import AdamState, ModelParams, adam_step, backward, cosine_lr, init_params
from .defenses import augment
from .geometry import PointCloud
from .imperceptibility import Strategy
from .metrics import AttackReport, evaluate, plan_dataset, reg_loss_and_grad
from .spectral import PoisonPlan, poison_points, trigger_rows_for

log = logging.getLogger(__name__)


@dataclass
class PoisonConfig:
    g: int = 32
    k_g: int = 32
    m: int = 16
    k_c: int = 10
    k_p: int = 10
    rho: float = 0.1
    target_class: int = 0
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 1.0
    lr_model: float = 0.001
    lr_trigger: float = 0.01
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 32
    strategy: str = "hpis"
    seed: int = 0
    hidden: int = 64
    poison_sampling: str = "uniform"
    augment: list = field(default_factory=list)

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy).value
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.m > self.g:
            raise ValueError(f"m={self.m} exceeds g={self.g}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.poison_sampling not in ("uniform", "per_class"):
            raise ValueError(f"unknown poison_sampling {self.poison_sampling!r}")
        self.augment = list(self.augment)

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @classmethod
    def from_mapping(cls, data: dict) -> "PoisonConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitDataset:
    benign_indices: np.ndarray
    poison_indices: np.ndarray


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(train_set, rho: float, target_class: int, seed, mode: str = "uniform") -> SplitDataset:
    """Choose round(rho * N) poison samples; labels are remapped later, during training.

    ``train_set`` may be a Dataset or an integer sample count (uniform mode only).
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    n = train_set if isinstance(train_set, (int, np.integer)) else len(train_set)
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        count = _round_half_up(rho * n)
        if count == 0:
            raise ValueError("empty poison set")
        poison = np.sort(rng.choice(n, size=count, replace=False))
    elif mode == "per_class":
        labels = train_set.labels
        picks = []
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            picks.append(rng.choice(members, size=_round_half_up(rho * len(members)), replace=False))
        poison = np.sort(np.concatenate(picks))
        if len(poison) == 0:
            raise ValueError("empty poison set")
    else:
        raise ValueError(f"unknown poison sampling mode {mode!r}")
    benign = np.setdiff1d(np.arange(n), poison)
    return SplitDataset(benign, poison)


@dataclass
class Batch:
    points: np.ndarray  # (B, N, 3) clean coordinates
    labels: np.ndarray  # true labels
    poisoned: np.ndarray  # bool, member of D_p
    plans: Sequence[PoisonPlan]


def _model_inputs(batch: Batch, xi: np.ndarray, config: PoisonConfig):
    inputs = batch.points.copy()
    for i in np.flatnonzero(batch.poisoned):
        inputs[i] = batch.plans[i].apply(batch.points[i], xi)
    labels = np.where(batch.poisoned, config.target_class, batch.labels)
    return inputs, labels


def model_loss_and_grad(params: ModelParams, xi: np.ndarray, batch: Batch, config: PoisonConfig, aug_seed=None):
    inputs, labels = _model_inputs(batch, xi, config)
    if not config.augment:
        loss, grads = backward(params, inputs, labels, need_inputs=False)
        return loss, grads.params
    rng = np.random.default_rng(aug_seed)
    total = ModelParams.zeros(params.hidden, params.num_classes).as_dict()
    loss = 0.0
    for i in range(len(inputs)):
        cloud = PointCloud(inputs[i])
        for kind in config.augment:
            cloud = augment(cloud, kind, rng)
        li, gi = backward(params, cloud.points, int(labels[i]), need_inputs=False)
        loss += li
        for name, g in gi.params.as_dict().items():
            total[name] += g
    return loss, ModelParams.from_dict(total)


def model_step(params: ModelParams, state: AdamState, xi: np.ndarray, batch: Batch, config: PoisonConfig,
               lr: Optional[float] = None, aug_seed=None):
    """One Adam step on the backdoor classification loss with xi held fixed."""
    lr = config.lr_model if lr is None else lr
    loss, grads = model_loss_and_grad(params, xi, batch, config, aug_seed)
    new, state = adam_step(params.as_dict(), grads.as_dict(), state, lr, config.weight_decay)
    return ModelParams.from_dict(new), state, loss


def trigger_loss_and_grad(params: ModelParams, xi: np.ndarray, batch: Batch, config: PoisonConfig):
    """Target-class cross-entropy plus regularizer over every sample in the batch, and d/dxi."""
    poisoned = poison_points(batch.plans, batch.points, xi)
    targets = np.full(len(poisoned), config.target_class)
    ce, grads = backward(params, poisoned, targets, need_inputs=True)
    total = ce
    gxi = np.zeros_like(xi)
    for i, plan in enumerate(batch.plans):
        reg, rgrad = reg_loss_and_grad(batch.points[i], poisoned[i], config.lambdas)
        total += reg
        gxi += plan.trigger_grad(grads.inputs[i] + rgrad)
    return float(total), gxi


def trigger_step(params: ModelParams, xi: np.ndarray, state: AdamState, batch: Batch, config: PoisonConfig,
                 lr: Optional[float] = None):
    lr = config.lr_trigger if lr is None else lr
    loss, g = trigger_loss_and_grad(params, xi, batch, config)
    new, state = adam_step({"xi": xi}, {"xi": g}, state, lr, 0.0)
    return new["xi"], state, loss


@dataclass
class AttackRun:
    params: ModelParams
    trigger: np.ndarray
    report: AttackReport
    config: PoisonConfig
    split: Optional[SplitDataset]
    history: list = field(default_factory=list)
    poisoned: bool = True

    def record(self) -> dict:
        """JSON-ready run record; contains no wall-clock data so replays match byte-for-byte."""
        return {
            "artifact": "spba",
            "version": __version__,
            "mode": "attack" if self.poisoned else "clean",
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "split": None if self.split is None else {
                "n_benign": int(len(self.split.benign_indices)),
                "n_poison": int(len(self.split.poison_indices)),
                "poison_indices": self.split.poison_indices.tolist(),
            },
            "trigger_norm": float(np.linalg.norm(self.trigger)),
            "curves": self.history,
            "final": self.report.to_dict(),
        }


def _seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train(
    train_set,
    test_set,
    config: PoisonConfig,
    poison: bool = True,
    train_plans: Optional[Sequence[PoisonPlan]] = None,
    test_plans: Optional[Sequence[PoisonPlan]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> AttackRun:
    """Alternate one model step and one trigger step per mini-batch.

    ``poison=False`` trains the same network on clean data with the same seeds
    (the paired baseline); trigger steps are skipped and xi stays zero.
    """
    init_seed, split_seed, shuffle_seed, aug_seed = _seeds(config.seed, 4)
    params = init_params(train_set.num_classes, config.hidden, seed=init_seed)
    rows = trigger_rows_for(config)
    xi = np.zeros((rows, 3))
    n = len(train_set)
    if train_plans is None:
        train_plans = plan_dataset(train_set, config)
    if test_plans is None:
        test_plans = plan_dataset(test_set, config)

    if poison:
        split = split_dataset(train_set if config.poison_sampling == "per_class" else n,
                              config.rho, config.target_class, split_seed, config.poison_sampling)
        is_poison = np.zeros(n, dtype=bool)
        is_poison[split.poison_indices] = True
    else:
        split = None
        is_poison = np.zeros(n, dtype=bool)

    m_state, t_state = AdamState(), AdamState()
    shuffle_rng = np.random.default_rng(shuffle_seed)
    aug_rng = np.random.default_rng(aug_seed)
    history = []
    for epoch in range(config.epochs):
        lr_m = cosine_lr(epoch, config.epochs, config.lr_model)
        lr_t = cosine_lr(epoch, config.epochs, config.lr_trigger)
        order = shuffle_rng.permutation(n)
        m_loss = t_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(train_set.points[idx], train_set.labels[idx], is_poison[idx],
                          [train_plans[i] for i in idx])
            step_seed = int(aug_rng.integers(2 ** 63)) if config.augment else None
            params, m_state, lm = model_step(params, m_state, xi, batch, config, lr_m, step_seed)
            m_loss += lm
            if poison:
                xi, t_state, lt = trigger_step(params, xi, t_state, batch, config, lr_t)
                t_loss += lt
        rep = evaluate(params, xi, config, test_set, test_plans)
        row = {
            "epoch": epoch,
            "lr_model": lr_m,
            "lr_trigger": lr_t,
            "model_loss": m_loss / n,
            "trigger_loss": t_loss / n,
            "ba": rep.benign_accuracy,
            "asr": rep.attack_success_rate,
            "cd_x1000": rep.mean_chamfer_x1000,
        }
        if not np.isfinite([m_loss, t_loss]).all() or not np.isfinite(xi).all():
            raise FloatingPointError(f"non-finite loss or trigger at epoch {epoch}")
        history.append(row)
        log.debug("epoch %d ba=%.3f asr=%.3f cd=%.3f", epoch, row["ba"], row["asr"], row["cd_x1000"])
        if on_epoch is not None:
            on_epoch(row)

    report = evaluate(params, xi, config, test_set, test_plans)
    return AttackRun(params, xi, report, config, split, history, poison)
