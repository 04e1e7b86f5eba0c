"""Reverse-mode gradients against central finite differences.

The error of a block is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over the checked coordinates (a block that is identically zero on both sides
scores 0). A block passes when its error is strictly below the tolerance, so a
tolerance of 0 always fails.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import ModelConfig, StarsModel
from .objectives import LossWeights, Objectives

DEFAULT_PARAM_CAP = 5000
FD_STEP = 1e-6


@dataclass
class BlockResult:
    name: str
    size: int
    checked: int
    max_abs_err: float
    rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    param_count: int
    tolerance: float
    primitive_tolerance: float
    blocks: list[BlockResult] = field(default_factory=list)
    primitives: list[BlockResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks) and all(p.passed for p in self.primitives)

    def failures(self) -> list[str]:
        return [b.name for b in self.blocks + self.primitives if not b.passed]

    def to_text(self) -> str:
        lines = [f"parameters: {self.param_count}", f"block tolerance: {self.tolerance:g}",
                 f"primitive tolerance: {self.primitive_tolerance:g}", ""]
        for title, rows in (("parameter blocks", self.blocks), ("primitives", self.primitives)):
            lines.append(title)
            for r in rows:
                lines.append(f"  {'PASS' if r.passed else 'FAIL'}  {r.name:<24} rel={r.rel_err:.3e} "
                             f"abs={r.max_abs_err:.3e} checked={r.checked}/{r.size}")
        lines.append("")
        lines.append("result: " + ("PASS" if self.passed else "FAIL (" + ", ".join(self.failures()) + ")"))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _compare(name, analytic: np.ndarray, numeric: np.ndarray, flat_idx, tol) -> BlockResult:
    a = analytic.reshape(-1)[flat_idx]
    n = numeric.reshape(-1)[flat_idx]
    diff = float(np.abs(a - n).max()) if a.size else 0.0
    scale = float(max(np.abs(a).max(), np.abs(n).max())) if a.size else 0.0
    rel = diff / scale if scale > 0 else (0.0 if diff == 0 else float("inf"))
    return BlockResult(name, int(analytic.size), int(len(flat_idx)), diff, rel, rel < tol)


def _support(model: StarsModel) -> dict[int, np.ndarray]:
    """Flat indices inside the structural support of each adjacency factor."""
    out = {}
    for layer in model.layers:
        adj = layer.adj
        out[id(adj.spatial)] = np.flatnonzero(adj.spatial_mask.reshape(-1))
        out[id(adj.frequency)] = np.flatnonzero(adj.frequency_mask.reshape(-1))
    return out


def _probe_batch(cfg: ModelConfig, rng: np.random.Generator, B: int):
    X = rng.normal(0.0, 0.5, (B, cfg.T_h, cfg.V, 3))
    Y = rng.normal(0.0, 0.5, (B, cfg.T_p, cfg.V, 3))
    nb = rng.normal(0.0, 0.5, (B, 3, cfg.T_p, cfg.V, 3))
    mask = np.ones((B, 3))
    mask[0, 2] = 0.0
    K = cfg.K if cfg.uses_anchors else 1
    z = rng.standard_normal((B, K, cfg.noise_dim)) if cfg.stochastic and cfg.noise_dim else None
    return X, Y, nb, mask, z


def check_model(model: StarsModel, weights: LossWeights, seed: int, tolerance: float,
                batch: int = 3, max_coords: int | None = None, h: float = FD_STEP) -> list[BlockResult]:
    cfg = model.config
    rng = np.random.default_rng(seed)
    X, Y, nb, mask, z = _probe_batch(cfg, rng, batch)
    obj = Objectives(weights, model.skeleton, deterministic=not cfg.stochastic)
    pairs = model.all_pairs() if cfg.uses_anchors else None

    def loss():
        fut, hist = model.forward(X, pairs, z, training=True, update_stats=False)
        return obj.total(obj.components(fut, hist, X, Y, nb, mask))

    named = model.named_parameters()
    with T.Tape() as tape:
        total = loss()
        grads = tape.backward(total, list(named.values()))
    support = _support(model)
    coords = {}
    for p in named.values():
        idx = support.get(id(p), np.arange(p.data.size))
        if max_coords is not None and len(idx) > max_coords:
            idx = np.sort(rng.choice(idx, max_coords, replace=False))
        coords[p] = idx
    numeric = T.finite_difference_gradient(lambda: float(loss().data), list(named.values()), h=h, coords=coords)
    return [_compare(name, grads[p], numeric[p], coords[p], tolerance) for name, p in named.items()]


def _primitive_cases(rng: np.random.Generator):
    def away(shape, gap=0.2):
        x = rng.uniform(gap, 1.0, shape)
        return x * rng.choice([-1.0, 1.0], shape)

    bn_state = T.BatchNormState.fresh((3,))
    distinct = rng.permutation(12).reshape(4, 3) * 0.3 + rng.uniform(0, 0.05, (4, 3))
    return [
        ("matmul", [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))], lambda a, b: T.matmul(a, b)),
        ("add", [rng.normal(size=(3, 4)), rng.normal(size=(4,))], lambda a, b: T.add(a, b)),
        ("sub", [rng.normal(size=(3, 1)), rng.normal(size=(3, 4))], lambda a, b: T.sub(a, b)),
        ("elementwise_mul", [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))], lambda a, b: T.mul(a, b)),
        ("concat_last_axis", [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))],
         lambda a, b: T.concat_last_axis(a, b)),
        ("relu", [away((3, 4))], lambda x: T.relu(x)),
        ("exp", [rng.normal(0.0, 0.5, (3, 4))], lambda x: T.exp(x)),
        ("reshape", [rng.normal(size=(3, 4))], lambda x: T.reshape(x, (2, 6))),
        ("sum", [rng.normal(size=(3, 4))], lambda x: T.sum(x, axis=1)),
        ("l1_norm", [away((3, 4))], lambda x: T.l1_norm(x, axis=-1)),
        ("l2_norm", [away((3, 4))], lambda x: T.l2_norm(x, axis=-1)),
        ("min_over_set", [distinct], lambda x: T.min_over_set(x, axis=0)),
        ("take", [rng.normal(size=(3, 4))], lambda x: T.take(x, [0, 2, 2], axis=0)),
        ("batch_norm", [rng.normal(size=(5, 3)), rng.uniform(0.5, 1.5, (3,)), rng.normal(size=(3,))],
         lambda x, g, b: T.batch_norm(x, g, b, bn_state, training=True, update_stats=False)),
    ]


def check_primitives(seed: int, tolerance: float, h: float = FD_STEP) -> list[BlockResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, arrays, fn in _primitive_cases(rng):
        ins = [T.Tensor(a, requires_grad=True, name=f"{name}.in{i}") for i, a in enumerate(arrays)]
        proj_shape = fn(*[T.Tensor(a) for a in arrays]).shape
        R = rng.normal(size=proj_shape)

        def f():
            return T.sum(T.mul(fn(*ins), R))

        with T.Tape() as tape:
            grads = tape.backward(f(), ins)
        numeric = T.finite_difference_gradient(lambda: float(f().data), ins, h=h)
        parts = [_compare(name, grads[t], numeric[t], np.arange(t.data.size), tolerance) for t in ins]
        worst = max(parts, key=lambda r: r.rel_err)
        results.append(BlockResult(name, sum(p.size for p in parts), sum(p.checked for p in parts),
                                   max(p.max_abs_err for p in parts), worst.rel_err,
                                   all(p.passed for p in parts)))
    return results


def count_parameters(model: StarsModel) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def run_gradcheck(model_config: ModelConfig, weights: LossWeights, seed: int, tolerance: float = 1e-3,
                  primitive_tolerance: float = 1e-4, cap: int = DEFAULT_PARAM_CAP, skeleton=None,
                  corrupt: str | None = None, max_coords: int | None = None) -> GradcheckReport:
    from .trainer import substream

    model = StarsModel(model_config, skeleton, substream(seed, "init"))
    n = count_parameters(model)
    if n > cap:
        raise ConfigError(
            f"gradcheck refuses a model with {n} parameters (cap {cap}); finite differences need two "
            f"forward passes per parameter, so use a toy-sized config or raise --max-params")
    report = GradcheckReport(n, tolerance, primitive_tolerance)
    if corrupt is not None and corrupt not in T.PRIMITIVES:
        raise ConfigError(f"unknown primitive {corrupt!r} for --corrupt; known: {sorted(T.PRIMITIVES)}")
    if corrupt is None:
        report.blocks = check_model(model, weights, seed, tolerance, max_coords=max_coords)
        report.primitives = check_primitives(seed, primitive_tolerance)
    else:
        with T.corrupted_adjoint(corrupt):
            report.blocks = check_model(model, weights, seed, tolerance, max_coords=max_coords)
            report.primitives = check_primitives(seed, primitive_tolerance)
    return report
