"""Diversity / accuracy metrics for multi-future prediction, and MPJPE.

Everything is in metres except MPJPE, which is reported in millimetres.
Sequence norms flatten (frame, joint, coordinate).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, ParameterError


def _stack(preds) -> np.ndarray:
    if hasattr(preds, "predictions"):
        preds = preds.predictions
    p = np.asarray(preds, dtype=np.float64)
    if p.ndim != 4:
        raise ContractViolation(f"predictions must be (K, T, V, 3), got {p.shape}")
    return p


def _flat(p: np.ndarray) -> np.ndarray:
    return p.reshape(p.shape[0], -1)


def apd(preds) -> float:
    p = _flat(_stack(preds))
    K = p.shape[0]
    if K < 2:
        raise ContractViolation("APD needs at least two predictions")
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return float(d.sum() / (K * (K - 1)))


def _check(p, Y):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != p.shape[1:]:
        raise ContractViolation(f"ground truth shape {Y.shape} vs prediction shape {p.shape[1:]}")
    return Y


def ade(preds, Y) -> float:
    p = _stack(preds)
    Y = _check(p, Y)
    return float(np.linalg.norm(_flat(p - Y[None]), axis=1).min() / p.shape[1])


def fde(preds, Y) -> float:
    p = _stack(preds)
    Y = _check(p, Y)
    return float(np.linalg.norm((p[:, -1] - Y[-1][None]).reshape(p.shape[0], -1), axis=1).min())


def _neighbours(mmgt) -> np.ndarray:
    nb = np.asarray(mmgt, dtype=np.float64)
    if nb.ndim == 3:
        nb = nb[None]
    if nb.shape[0] == 0:
        raise ContractViolation("multi-modal ground truth is empty")
    return nb


def mmade(preds, mmgt) -> float:
    p = _stack(preds)
    return float(np.mean([ade(p, y) for y in _neighbours(mmgt)]))


def mmfde(preds, mmgt) -> float:
    p = _stack(preds)
    return float(np.mean([fde(p, y) for y in _neighbours(mmgt)]))


def mpjpe(pred, Y, horizons) -> dict[int, float]:
    """Joint-averaged position error (mm) at 1-based frame ``horizons``."""
    pred = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if pred.shape != Y.shape or pred.ndim != 3:
        raise ContractViolation(f"MPJPE needs matching (T, V, 3) arrays, got {pred.shape} and {Y.shape}")
    out = {}
    for h in horizons:
        if not (1 <= h <= pred.shape[0]):
            raise ParameterError(f"horizon {h} outside 1..{pred.shape[0]}")
        out[int(h)] = float(np.linalg.norm(pred[h - 1] - Y[h - 1], axis=-1).mean() * 1000.0)
    return out


SHORT_HORIZONS_MS = (80, 160, 320, 400)
LONG_HORIZONS_MS = (560, 720, 880, 1000)


def ms_to_frame(ms: float, fps: float) -> int:
    return int(round(ms * fps / 1000.0))


@dataclass
class MetricReport:
    apd: float | None = None
    ade: float | None = None
    fde: float | None = None
    mmade: float | None = None
    mmfde: float | None = None
    mpjpe_by_horizon: dict[int, float] = field(default_factory=dict)
    sample_count: int = 0

    def to_json(self, config_echo: dict | None = None) -> str:
        d = asdict(self)
        d["mpjpe_by_horizon"] = {str(k): v for k, v in sorted(self.mpjpe_by_horizon.items())}
        d = {"config_echo": config_echo or {}, **d}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in ("apd", "ade", "fde", "mmade", "mmfde"):
            v = getattr(self, k)
            w.writerow([k, "" if v is None else repr(v)])
        for h, v in sorted(self.mpjpe_by_horizon.items()):
            w.writerow([f"mpjpe_{h}ms", repr(v)])
        w.writerow(["sample_count", self.sample_count])
        return buf.getvalue()


def mode_matches(preds, mode_futures, radius: float) -> np.ndarray:
    """Boolean per mode: does any prediction lie within ``radius`` (flattened L2) of it?"""
    p = _flat(_stack(preds))
    modes = np.asarray(mode_futures, dtype=np.float64)
    if modes.ndim != 4 or modes.shape[1:] != _stack(preds).shape[1:]:
        raise ContractViolation(f"mode futures shape {modes.shape} vs predictions {_stack(preds).shape}")
    if radius < 0:
        raise ParameterError("radius must be >= 0")
    d = np.linalg.norm(p[:, None, :] - _flat(modes)[None], axis=-1)  # (K, n_modes)
    return (d <= radius).any(axis=0)
