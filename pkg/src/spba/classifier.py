"""Minimal PointNet-style classifier with exact reverse-mode gradients.

Architecture: per-point affine 3->H, ReLU, affine H->H, ReLU, max-pool over
points, affine H->K.  Everything is plain numpy; inputs may be a single
(N, 3) cloud or a stacked (B, N, 3) batch.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = b"SPBAMODL"
CHECKPOINT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w3.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "ModelParams":
        return cls(**{n: d[n] for n in PARAM_NAMES})

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.as_dict().items()})

    @classmethod
    def zeros(cls, hidden: int, num_classes: int) -> "ModelParams":
        return cls(
            np.zeros((3, hidden)), np.zeros(hidden),
            np.zeros((hidden, hidden)), np.zeros(hidden),
            np.zeros((hidden, num_classes)), np.zeros(num_classes),
        )


@dataclass
class Gradients:
    params: ModelParams
    inputs: Optional[np.ndarray] = None


def init_params(num_classes: int, hidden: int = 64, seed=0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)

    w1, b1 = layer(3, hidden)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(hidden, num_classes)
    return ModelParams(w1, b1, w2, b2, w3, b3)


def _forward(params: ModelParams, x: np.ndarray):
    z1 = x @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    # argmax returns the first (lowest-index) point on ties
    arg = np.argmax(h2, axis=-2)
    pooled = np.take_along_axis(h2, arg[..., None, :], axis=-2)[..., 0, :]
    logits = pooled @ params.w3 + params.b3
    return logits, (x, z1, h1, z2, pooled, arg)


def forward(params: ModelParams, points) -> np.ndarray:
    """Logits (K,) for one cloud or (B, K) for a batch."""
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    return _forward(params, pts)[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[label])


def _backprop(params: ModelParams, cache, dlogits: np.ndarray, need_inputs: bool = True) -> Gradients:
    x, z1, h1, z2, pooled, arg = cache
    batched = x.ndim == 3
    P = params
    if batched:
        dw3 = pooled.T @ dlogits
        db3 = dlogits.sum(axis=0)
    else:
        dw3 = np.outer(pooled, dlogits)
        db3 = dlogits.copy()
    dpooled = dlogits @ P.w3.T
    # route each channel's gradient to its winning point
    dh2 = np.zeros_like(z2)
    if batched:
        b_idx = np.arange(x.shape[0])[:, None]
        c_idx = np.arange(z2.shape[-1])[None, :]
        dh2[b_idx, arg, c_idx] = dpooled
    else:
        dh2[arg, np.arange(z2.shape[-1])] = dpooled
    dz2 = dh2 * (z2 > 0)
    flat_h1 = h1.reshape(-1, h1.shape[-1])
    flat_dz2 = dz2.reshape(-1, dz2.shape[-1])
    dw2 = flat_h1.T @ flat_dz2
    db2 = flat_dz2.sum(axis=0)
    dz1 = (dz2 @ P.w2.T) * (z1 > 0)
    flat_dz1 = dz1.reshape(-1, dz1.shape[-1])
    dw1 = x.reshape(-1, 3).T @ flat_dz1
    db1 = flat_dz1.sum(axis=0)
    dx = dz1 @ P.w1.T if need_inputs else None
    return Gradients(ModelParams(dw1, db1, dw2, db2, dw3, db3), dx)


def backward(params: ModelParams, points, label, need_inputs: bool = True):
    """Summed cross-entropy and its gradients w.r.t. parameters and input coordinates.

    ``points`` is (N, 3) with an int label, or (B, N, 3) with a label array.
    """
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    logits, cache = _forward(params, pts)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    if pts.ndim == 3:
        labels = np.asarray(label)
        rows = np.arange(len(labels))
        loss = float(-logp[rows, labels].sum())
        dlogits = probs
        dlogits[rows, labels] -= 1.0
    else:
        loss = float(-logp[label])
        dlogits = probs
        dlogits[label] -= 1.0
    return loss, _backprop(params, cache, dlogits, need_inputs)


def logit_input_grad(params: ModelParams, points: np.ndarray, cls: int) -> np.ndarray:
    """Gradient of one logit w.r.t. the (N, 3) input coordinates."""
    logits, cache = _forward(params, points)
    dlogits = np.zeros_like(logits)
    dlogits[cls] = 1.0
    return _backprop(params, cache, dlogits).inputs


def predict(params: ModelParams, points) -> np.ndarray:
    return np.argmax(forward(params, points), axis=-1)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam step with decoupled weight decay; returns (new_params, new_state)."""
    b1, b2 = ADAM_BETAS
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * weight_decay * p
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: Union[str, Path], params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, params.hidden, params.num_classes))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic at offset 0")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header at offset {len(data)}")
    version, hidden, k = struct.unpack_from("<III", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    shapes = ModelParams.zeros(hidden, k).as_dict()
    offset = 20
    out = {}
    for name in PARAM_NAMES:
        shape = shapes[name].shape
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at offset {len(data)} reading {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return ModelParams.from_dict(out)
