"""Point-set distances, the trigger regularizer, and BA/ASR/CD evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .classifier import ModelParams, predict
from .geometry import PointCloud
from .spectral import PoisonPlan, SpectralTrigger, plan_poison

DEFAULT_LAMBDAS = (1.0, 5.0, 1.0)


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def _nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise ValueError("distance between empty point sets is undefined")


def euclidean_loss(a, b) -> float:
    """Mean per-point L2 distance between index-corresponding points."""
    a, b = _pts(a), _pts(b)
    if a.shape != b.shape:
        raise ValueError(f"point count mismatch: {len(a)} vs {len(b)}")
    return float(np.linalg.norm(a - b, axis=1).mean())


def _nearest(src: np.ndarray, dst: np.ndarray):
    dist, idx = cKDTree(dst).query(src, k=1)
    return dist, idx


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance with squared nearest-neighbour distances."""
    a, b = _pts(a), _pts(b)
    _nonempty(a, b)
    d_ab, _ = _nearest(a, b)
    d_ba, _ = _nearest(b, a)
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def hausdorff_distance(a, b) -> float:
    a, b = _pts(a), _pts(b)
    _nonempty(a, b)
    d_ab, _ = _nearest(a, b)
    d_ba, _ = _nearest(b, a)
    return float(max(d_ab.max(), d_ba.max()))


def reg_loss(a, b, lam1: float = 1.0, lam2: float = 5.0, lam3: float = 1.0) -> float:
    return lam1 * euclidean_loss(a, b) + lam2 * chamfer_distance(a, b) + lam3 * hausdorff_distance(a, b)


def reg_loss_and_grad(a: np.ndarray, b: np.ndarray, lambdas: Sequence[float] = DEFAULT_LAMBDAS):
    """Regularizer value and its (sub)gradient with respect to the poisoned cloud ``b``."""
    lam1, lam2, lam3 = lambdas
    a, b = _pts(a), _pts(b)
    if a.shape != b.shape:
        raise ValueError(f"point count mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    grad = np.zeros_like(b)

    diff = b - a
    dist = np.linalg.norm(diff, axis=1)
    ed = dist.mean()
    moved = dist > 0
    grad[moved] += lam1 * diff[moved] / (n * dist[moved, None])

    d_ab, j_ab = _nearest(a, b)  # for each original point, nearest poisoned point
    d_ba, j_ba = _nearest(b, a)
    cd = np.mean(d_ab ** 2) + np.mean(d_ba ** 2)
    np.add.at(grad, j_ab, lam2 * 2.0 * (b[j_ab] - a) / n)
    grad += lam2 * 2.0 * (b - a[j_ba]) / n

    i_ab, i_ba = int(np.argmax(d_ab)), int(np.argmax(d_ba))
    if d_ab[i_ab] >= d_ba[i_ba]:
        hd = d_ab[i_ab]
        tgt, src = int(j_ab[i_ab]), a[i_ab]
    else:
        hd = d_ba[i_ba]
        tgt, src = i_ba, a[j_ba[i_ba]]
    if hd > 0:
        grad[tgt] += lam3 * (b[tgt] - src) / hd

    value = lam1 * ed + lam2 * cd + lam3 * hd
    return float(value), grad


@dataclass
class AttackReport:
    benign_accuracy: float
    attack_success_rate: float
    mean_chamfer_x1000: float
    per_class_confusion: list
    n_clean: int = 0
    n_asr: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleResult:
    clean_pred: np.ndarray
    poisoned_pred: np.ndarray
    cd: np.ndarray
    labels: np.ndarray


def plan_dataset(dataset, config, seed=None) -> list[PoisonPlan]:
    seed = config.seed if seed is None else seed
    return [plan_poison(dataset[i], config, seed) for i in range(len(dataset))]


def _xi(trigger) -> np.ndarray:
    return trigger.coefficients if isinstance(trigger, SpectralTrigger) else np.asarray(trigger, dtype=np.float64)


def evaluate_samples(
    params: ModelParams,
    trigger,
    config,
    test_set,
    plans: Optional[Sequence[PoisonPlan]] = None,
    transform: Optional[Callable[[PointCloud, int], PointCloud]] = None,
) -> SampleResult:
    """Clean/poisoned predictions and Chamfer distance for every test sample.

    ``transform(cloud, i)`` is applied to both inputs before classification,
    e.g. an inference-time defense; the Chamfer distance is measured before it.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    xi = _xi(trigger)
    if plans is None:
        plans = plan_dataset(test_set, config)
    clean_pts = test_set.points
    poisoned_pts = np.stack([p.apply(x, xi) for p, x in zip(plans, clean_pts)])
    cd = np.array([chamfer_distance(c, p) for c, p in zip(clean_pts, poisoned_pts)])
    if transform is None:
        clean_pred = predict(params, clean_pts)
        pois_pred = predict(params, poisoned_pts)
    else:
        clean_pred = np.empty(len(test_set), dtype=np.int64)
        pois_pred = np.empty(len(test_set), dtype=np.int64)
        for i in range(len(test_set)):
            base = test_set[i]
            clean_pred[i] = predict(params, transform(base, i).points)
            pois_pred[i] = predict(params, transform(base.with_points(poisoned_pts[i]), i).points)
    return SampleResult(clean_pred, pois_pred, cd, test_set.labels.copy())


def report_from_samples(res: SampleResult, target_class: int, num_classes: int) -> AttackReport:
    labels = res.labels
    non_target = labels != target_class
    if not non_target.any():
        raise ValueError("ASR undefined: every test sample already belongs to the target class")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, res.clean_pred), 1)
    return AttackReport(
        benign_accuracy=float(np.mean(res.clean_pred == labels)),
        attack_success_rate=float(np.mean(res.poisoned_pred[non_target] == target_class)),
        mean_chamfer_x1000=float(res.cd.mean() * 1000.0),
        per_class_confusion=confusion.tolist(),
        n_clean=int(len(labels)),
        n_asr=int(non_target.sum()),
    )


def evaluate(params, trigger, config, test_set, plans=None, transform=None) -> AttackReport:
    res = evaluate_samples(params, trigger, config, test_set, plans, transform)
    return report_from_samples(res, config.target_class, test_set.num_classes)
