"""Anchored vs. pure-noise sampling on synthetic multi-modal data.

Both arms share data, backbone initialisation, noise stream and budget; the
ablated arm has its anchors fixed at zero, so its K outputs differ only
through the noise vector.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import data as D
from . import trainer as TR
from .config import RunConfig
from .metrics import mode_matches
from .model import StarsModel


@dataclass
class ArmResult:
    seed: int
    anchored: bool
    apd: float
    ade: float
    mmade: float
    mode_hit_rate: list[float]   # per mode: fraction of test groups where some prediction is within radius
    modes_covered: int           # modes with hit rate >= 0.5
    wall_seconds: float


def coverage_radius(spec: D.SyntheticSpec, T_p: int, V: int) -> float:
    """Three times the expected norm of the observation noise over one flattened future."""
    return 3.0 * spec.noise_scale * float(np.sqrt(T_p * V * 3))


def mode_coverage(model: StarsModel, spec: D.SyntheticSpec, data_seed: int, test_records, seed: int):
    """Per-mode hit rates over test groups, against the noise-free continuations."""
    cfg = model.config
    clean = {r.id: r for r in D.generate_synthetic(spec, data_seed, clean=True)}
    groups: dict[str, list] = {}
    for r in test_records:
        groups.setdefault(D.group_id(r.id), []).append(r)
    gids = sorted(groups)
    T_h, T_p = cfg.T_h, cfg.T_p
    start = spec.history - T_h
    X = np.stack([groups[g][0].frames[start:start + T_h] for g in gids])
    fut, _, _ = model.sample_batch(X, TR.substream(seed, "eval"))
    radius = coverage_radius(spec, T_p, cfg.V)
    hits = np.zeros((len(gids), spec.mode_count))
    for gi, g in enumerate(gids):
        recs = sorted(groups[g], key=lambda r: r.mode_label)
        seen = {}
        for r in recs:
            seen.setdefault(r.mode_label, clean[r.id].frames[start + T_h:start + T_h + T_p])
        modes = np.stack([seen[m] for m in range(spec.mode_count)])
        hits[gi] = mode_matches(fut[gi], modes, radius)
    return hits.mean(axis=0), radius


def run_arm(run_cfg: RunConfig, spec: D.SyntheticSpec, data_seed: int, seed: int, anchored: bool,
            progress=None) -> ArmResult:
    records = D.generate_synthetic(spec, data_seed)
    skeleton = D.skeleton_template(spec.skeleton).skeleton
    train, test = D.split_by_group(records, spec.test_fraction)
    m = run_cfg.model
    windows = D.window_dataset(train, m.T_h, m.T_p)
    test_windows = D.window_dataset(test, m.T_h, m.T_p)
    tcfg = TR.TrainConfig(**{**run_cfg.train.to_dict(), "seed": seed, "freeze_anchors": not anchored})
    model = StarsModel(m, skeleton, TR.substream(seed, "init"))
    state = TR.TrainState.create(model, tcfg)
    t0 = time.perf_counter()
    TR.fit(state, windows, tcfg, progress=progress)
    wall = time.perf_counter() - t0
    report = TR.evaluate(model, test_windows, tcfg.epsilon, seed, fps=spec.fps)
    rate, _ = mode_coverage(model, spec, data_seed, test, seed)
    return ArmResult(seed, anchored, report.apd, report.ade, report.mmade, [float(x) for x in rate],
                     int((rate >= 0.5).sum()), wall)


def run_experiment(run_cfg: RunConfig, spec: D.SyntheticSpec, data_seed: int = 0, seeds=range(5),
                   log=None) -> list[tuple[ArmResult, ArmResult]]:
    out = []
    for s in seeds:
        pair = tuple(run_arm(run_cfg, spec, data_seed, s, anchored) for anchored in (True, False))
        if log is not None:
            for r in pair:
                log(asdict(r))
        out.append(pair)
    return out


def summarize(pairs) -> dict:
    better = [a.mmade < f.mmade and a.apd > f.apd for a, f in pairs]
    covered = [a.modes_covered >= 3 for a, _ in pairs]
    return {"seeds": len(pairs), "anchored_better": int(sum(better)), "coverage_ok": int(sum(covered)),
            "wall_seconds": float(sum(a.wall_seconds + f.wall_seconds for a, f in pairs))}
