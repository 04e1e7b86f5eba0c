"""Training losses and multi-modal ground-truth clustering.

Loss functions take predictions shaped (K, T, V, 3) or batched
(B, K, T, V, 3), as numpy arrays, Tensors or a PredictionSet, and return a
scalar Tensor averaged over the batch. Sequence distances flatten
(frame, joint, coordinate).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolation, ParameterError, TrainingAbort
from .graph import Skeleton


@dataclass
class LossWeights:
    r: float = 2.0
    mm: float = 1.0
    h: float = 50.0
    d: float = 160.0
    nf: float = 0.01
    l: float = 500.0
    a: float = 100.0
    alpha_div: float = 100.0

    def __post_init__(self):
        for k in ("r", "mm", "h", "d", "nf", "l", "a"):
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be >= 0")
        if self.alpha_div <= 0:
            raise ConfigError("alpha_div must be positive")

    @classmethod
    def human36m(cls) -> "LossWeights":
        return cls(2, 1, 50, 160, 0.01, 500, 100)

    @classmethod
    def humaneva(cls) -> "LossWeights":
        return cls(2, 1, 10, 32, 0.002, 50, 10)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("r", "mm", "h", "d", "nf", "l", "a")}


def _preds(p) -> T.Tensor:
    if hasattr(p, "predictions"):
        p = p.predictions
    p = T.as_tensor(p)
    if p.ndim == 4:
        p = T.reshape(p, (1,) + p.shape)
    if p.ndim != 5 or p.shape[-1] != 3:
        raise ContractViolation(f"predictions must be (B, K, T, V, 3), got {p.shape}")
    return p


def _target(y, ndim: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y[None] if y.ndim == ndim - 1 else y


def _sq_dist_to(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    """(B, K) squared distances of every prediction to its sample's target."""
    if target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ContractViolation(f"target shape {target.shape} vs predictions {pred.shape}")
    d = T.sub(pred, target[:, None])
    return T.sum(T.mul(d, d), axis=(2, 3, 4))


def loss_reconstruction(preds, Y) -> T.Tensor:
    """Best-of-K squared error ``min_k ||Y_k - Y||^2``."""
    p = _preds(preds)
    return T.mean(T.min_over_set(_sq_dist_to(p, _target(Y, 4)), axis=1))


def loss_multimodal(preds, neighbors, mask=None) -> T.Tensor:
    """Mean over neighbour futures of their best-match squared distance.

    ``neighbors`` is (N, T, V, 3) for one sample, or padded (B, N, T, V, 3)
    with a (B, N) 0/1 ``mask``.
    """
    p = _preds(preds)
    nb = np.asarray(neighbors, dtype=np.float64)
    if nb.ndim == 4:
        nb = nb[None]
    if nb.shape[1] == 0:
        raise ContractViolation("multi-modal ground truth has no neighbours")
    B, N = nb.shape[:2]
    mask = np.ones((B, N)) if mask is None else np.asarray(mask, dtype=np.float64)
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise ContractViolation("multi-modal ground truth has no neighbours")
    if nb.shape[2:] != p.shape[2:] or nb.shape[0] != p.shape[0]:
        raise ContractViolation(f"neighbour shape {nb.shape} vs predictions {p.shape}")
    d = T.sub(T.reshape(p, (B, 1) + p.shape[1:]), nb[:, :, None])
    sq = T.sum(T.mul(d, d), axis=(3, 4, 5))  # (B, N, K)
    best = T.min_over_set(sq, axis=2)
    return T.mean(T.sum(T.mul(best, mask / counts[:, None]), axis=1))


def loss_history(histories, X) -> T.Tensor:
    """``(1/K) sum_k ||X_hat_k - X||^2``."""
    h = _preds(histories)
    return T.mean(_sq_dist_to(h, _target(X, 4)))


def _pair_index(K: int):
    a, b = np.triu_indices(K, k=1)
    return a, b


def loss_diversity(preds, alpha: float) -> T.Tensor:
    """Mean over unordered pairs of ``exp(-||Y_j - Y_k||_1 / alpha)``."""
    if alpha <= 0:
        raise ParameterError(f"diversity temperature must be positive, got {alpha}")
    p = _preds(preds)
    K = p.shape[1]
    if K < 2:
        raise ContractViolation("diversity loss needs at least two predictions")
    a, b = _pair_index(K)
    d = T.sub(T.take(p, a, axis=1), T.take(p, b, axis=1))
    dist = T.l1_norm(d, axis=(2, 3, 4))
    return T.mean(T.exp(T.mul(dist, -1.0 / alpha)))


def _bone_matrix(skeleton: Skeleton) -> np.ndarray:
    D = np.zeros((len(skeleton.bone_edges), skeleton.V))
    for e, (a, b) in enumerate(skeleton.bone_edges):
        D[e, a], D[e, b] = 1.0, -1.0
    return D


def limb_lengths(seq, skeleton: Skeleton):
    """Per-frame bone lengths (..., T, E) of (..., T, V, 3) poses."""
    D = _bone_matrix(skeleton)
    if isinstance(seq, T.Tensor):
        return T.l2_norm(T.matmul(D, seq), axis=-1)
    return np.linalg.norm(D @ np.asarray(seq, dtype=np.float64), axis=-1)


def loss_limb(preds, skeleton: Skeleton, Y) -> T.Tensor:
    """Mean over K of squared limb-length error against the ground-truth frames."""
    if not skeleton.bone_edges:
        raise ContractViolation("limb loss needs at least one bone edge")
    p = _preds(preds)
    ref = limb_lengths(_target(Y, 4), skeleton)  # (B, T, E)
    d = T.sub(limb_lengths(p, skeleton), ref[:, None])
    return T.mean(T.sum(T.mul(d, d), axis=(2, 3)))


@dataclass
class CappedVelocityPrior:
    """Penalise frame-to-frame joint displacements above ``tau`` metres.

    Value: mean over K of ``sum_{t, v} relu(||p[t+1, v] - p[t, v]|| - tau)^2``.
    """

    tau: float = 0.1

    def __call__(self, preds) -> T.Tensor:
        p = _preds(preds)
        B, K, Tn, V, _ = p.shape
        if Tn < 2:
            return T.Tensor(0.0)
        diff = np.zeros((Tn - 1, Tn))
        idx = np.arange(Tn - 1)
        diff[idx, idx], diff[idx, idx + 1] = -1.0, 1.0
        vel = T.matmul(diff, T.reshape(p, (B, K, Tn, V * 3)))
        speed = T.l2_norm(T.reshape(vel, (B, K, Tn - 1, V, 3)), axis=-1)
        excess = T.relu(T.sub(speed, self.tau))
        return T.mean(T.sum(T.mul(excess, excess), axis=(2, 3)))


def pose_prior_penalty(preds, hook: Callable | None = None, weight: float = 1.0) -> T.Tensor:
    if weight == 0:
        return T.Tensor(0.0)
    if hook is None:
        raise ConfigError("pose prior weight is positive but no pose prior hook is registered")
    return hook(preds)


@dataclass
class MultiModalGT:
    neighbors: list[np.ndarray]  # per sample: indices into the pool of futures
    futures: np.ndarray          # (N_pool, T_p, V, 3)

    def __len__(self):
        return len(self.neighbors)

    def entry(self, i: int) -> np.ndarray:
        return self.futures[self.neighbors[i]]

    def padded(self, rows) -> tuple[np.ndarray, np.ndarray]:
        rows = list(rows)
        n = max(len(self.neighbors[r]) for r in rows)
        out = np.zeros((len(rows), n) + self.futures.shape[1:])
        mask = np.zeros((len(rows), n))
        for b, r in enumerate(rows):
            idx = self.neighbors[r]
            out[b, :len(idx)] = self.futures[idx]
            mask[b, :len(idx)] = 1.0
        return out, mask


def multimodal_ground_truth(histories, futures, eps: float) -> MultiModalGT:
    """Group futures whose last history pose lies within ``eps`` (Euclidean, flattened pose)."""
    if not eps > 0:
        raise ParameterError(f"epsilon must be positive, got {eps}")
    X = np.asarray(histories, dtype=np.float64)
    last = X[:, -1].reshape(X.shape[0], -1)
    sq = (last * last).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * last @ last.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    within = d2 <= eps * eps
    return MultiModalGT([np.flatnonzero(row) for row in within], np.asarray(futures, dtype=np.float64))


COMPONENTS = ("r", "mm", "h", "d", "nf", "l", "a")


def total_loss(weights: LossWeights, components: dict[str, T.Tensor]) -> T.Tensor:
    """Weighted sum; components with zero weight are left out of the graph."""
    w = weights.as_dict()
    for k in components:
        if k not in w:
            raise ConfigError(f"unknown loss component {k!r}")
    for k, comp in components.items():
        if not np.all(np.isfinite(T.as_tensor(comp).data)):
            raise TrainingAbort(k)
    total = T.Tensor(0.0)
    for k in COMPONENTS:
        if w[k] == 0:
            continue
        if k not in components:
            if k == "a":
                continue
            raise ConfigError(f"loss weight {k} is positive but the component is missing")
        total = T.add(total, T.mul(components[k], w[k]))
    return total


@dataclass
class Objectives:
    weights: LossWeights
    skeleton: Skeleton
    deterministic: bool = False
    pose_prior: Callable | None = field(default_factory=CappedVelocityPrior)
    angle_hook: Callable | None = None

    def components(self, fut, hist, X, Y, neighbors=None, mask=None) -> dict[str, T.Tensor]:
        w = self.weights
        comps = {"r": loss_reconstruction(fut, Y), "h": loss_history(hist, X)}
        if self.deterministic:
            return comps
        if w.mm > 0:
            if neighbors is None:
                raise ConfigError("multi-modal loss weight is positive but no neighbours were given")
            comps["mm"] = loss_multimodal(fut, neighbors, mask)
        if w.d > 0:
            comps["d"] = loss_diversity(fut, w.alpha_div)
        if w.nf > 0:
            comps["nf"] = pose_prior_penalty(fut, self.pose_prior, w.nf)
        if w.l > 0:
            comps["l"] = loss_limb(fut, self.skeleton, Y)
        if self.angle_hook is not None and w.a > 0:
            comps["a"] = self.angle_hook(fut)
        return comps

    def total(self, comps: dict[str, T.Tensor]) -> T.Tensor:
        if self.deterministic:
            w = LossWeights(r=self.weights.r, mm=0, h=self.weights.h, d=0, nf=0, l=0, a=0,
                            alpha_div=self.weights.alpha_div)
            return total_loss(w, comps)
        return total_loss(self.weights, comps)
