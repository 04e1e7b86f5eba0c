"""Training loop, learning-rate schedule, checkpoints and evaluation."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (ConfigError, IncompatibleCheckpoint, ParameterError, ParseError,
                     TrainingAbort, UnsupportedVariantError)
from .graph import Skeleton
from .metrics import (LONG_HORIZONS_MS, SHORT_HORIZONS_MS, MetricReport, ade, apd, fde, mmade, mmfde,
                      mpjpe, ms_to_frame)
from .model import ModelConfig, StarsModel
from .objectives import COMPONENTS, LossWeights, MultiModalGT, Objectives, multimodal_ground_truth

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STARSCKP"
CHECKPOINT_VERSION = 1
STREAMS = ("data", "init", "noise", "sampling", "eval")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose, derived from a single seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name),)))


def lr_schedule(epoch: int, base_lr: float = 0.001, decay_start: int = 100, decay_span: int = 400) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return max(0.0, base_lr * (1.0 - max(0, epoch - decay_start) / decay_span))


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    instances_per_epoch: int = 5000
    base_lr: float = 0.001
    decay_start: int = 100
    decay_span: int = 400
    seed: int = 0
    epsilon: float = 0.5
    stride: int = 1
    freeze_anchors: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.instances_per_epoch < 2:
            raise ConfigError("instances_per_epoch must be >= 2")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    model: StarsModel
    params: list[T.Tensor]
    adam: T.AdamState
    epoch: int = 0
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    best_total: float | None = None

    @classmethod
    def create(cls, model: StarsModel, cfg: TrainConfig) -> "TrainState":
        if cfg.freeze_anchors:
            for p in model.anchor_parameters():
                p.data = np.zeros_like(p.data)
            params = model.backbone_parameters()
        else:
            params = model.parameters()
        return cls(model, params, T.AdamState.for_params(params), 0,
                   {"sampling": substream(cfg.seed, "sampling"), "noise": substream(cfg.seed, "noise")})


def make_objectives(model: StarsModel, cfg: TrainConfig) -> Objectives:
    return Objectives(cfg.weights, model.skeleton, deterministic=not model.config.stochastic)


def check_sharing(model: StarsModel):
    groups: dict[int, T.Tensor] = {}
    for layer in model.layers:
        g = layer.adj.share_group
        if g is None:
            continue
        first = groups.setdefault(g, layer.adj.spatial)
        assert first is layer.adj.spatial, f"share group {g} lost its common storage"


def batch_loss(model: StarsModel, objectives: Objectives, X, Y, neighbors, mask, z, training=True,
               update_stats=True):
    pairs = model.all_pairs() if model.config.uses_anchors else None
    fut, hist = model.forward(X, pairs, z, training=training, update_stats=update_stats)
    comps = objectives.components(fut, hist, X, Y, neighbors, mask)
    return objectives.total(comps), comps


def _noise(model: StarsModel, rng, B):
    cfg = model.config
    if not cfg.stochastic or cfg.noise_dim == 0 or cfg.noise_layer is None:
        return None
    K = cfg.K if cfg.uses_anchors else 1
    return rng.standard_normal((B, K, cfg.noise_dim))


def train_epoch(state: TrainState, objectives: Objectives, windows, mmgt: MultiModalGT | None,
                cfg: TrainConfig) -> dict[str, float]:
    model = state.model
    lr = lr_schedule(state.epoch, cfg.base_lr, cfg.decay_start, cfg.decay_span)
    N = len(windows)
    picks = state.rngs["sampling"].integers(0, N, cfg.instances_per_epoch)
    sums: dict[str, float] = {}
    n_batches = 0
    for b, start in enumerate(range(0, len(picks), cfg.batch_size)):
        idx = picks[start:start + cfg.batch_size]
        if len(idx) < 2:
            break
        X, Y = windows.X[idx], windows.Y[idx]
        nb, mask = mmgt.padded(idx) if mmgt is not None and not objectives.deterministic else (None, None)
        z = _noise(model, state.rngs["noise"], len(idx))
        with T.Tape() as tape:
            try:
                total, comps = batch_loss(model, objectives, X, Y, nb, mask, z)
            except TrainingAbort as e:
                raise TrainingAbort(e.component, batch=b) from None
            grads = tape.backward(total, state.params)
        T.adam_step(state.params, grads, state.adam, lr)
        sums["total"] = sums.get("total", 0.0) + float(total.data)
        for k, v in comps.items():
            sums[k] = sums.get(k, 0.0) + float(v.data)
        n_batches += 1
    check_sharing(model)
    summary = {"epoch": state.epoch, "lr": lr}
    summary.update({k: v / max(n_batches, 1) for k, v in sums.items()})
    state.epoch += 1
    return summary


LOG_FIELDS = ["epoch", "lr", "total"] + list(COMPONENTS)


def fit(state: TrainState, windows, cfg: TrainConfig, out_dir=None, progress=None) -> list[dict]:
    """Train from ``state.epoch`` up to ``cfg.epochs``; writes logs and checkpoints when ``out_dir`` is set."""
    model = state.model
    objectives = make_objectives(model, cfg)
    mmgt = None
    if model.config.stochastic and cfg.weights.mm > 0:
        mmgt = multimodal_ground_truth(windows.X, windows.Y, cfg.epsilon)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path, timing_path = out / "train_log.csv", out / "timing.csv"
        if state.epoch == 0 or not log_path.exists():
            log_path.write_text(",".join(LOG_FIELDS) + "\n")
            timing_path.write_text("epoch,wall_seconds\n")
    history = []
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        s = train_epoch(state, objectives, windows, mmgt, cfg)
        wall = time.perf_counter() - t0
        history.append(s)
        if progress is not None:
            progress(s)
        if out is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [s["epoch"], repr(s["lr"]), repr(s["total"])] + [repr(s[k]) if k in s else "" for k in COMPONENTS])
            with open(timing_path, "a") as fh:
                fh.write(f"{s['epoch']},{wall:.6f}\n")
            if state.best_total is None or s["total"] < state.best_total:
                state.best_total = s["total"]
                save_checkpoint(out / "best.ckpt", state, cfg)
    if out is not None:
        save_checkpoint(out / "final.ckpt", state, cfg)
    return history


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, state: TrainState, cfg: TrainConfig, extra: dict | None = None):
    model = state.model
    arrays: list[tuple[str, np.ndarray]] = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    names = model.named_parameters()
    rev = {id(t): k for k, t in names.items()}
    param_names = [rev[id(p)] for p in state.params]
    for k, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        arrays.append((f"adam/m/{param_names[k]}", m))
        arrays.append((f"adam/v/{param_names[k]}", v))
    entries, chunks, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "skeleton": {"name": model.skeleton.name, "text": model.skeleton.to_text()},
        "train_config": cfg.to_dict(),
        "epoch": state.epoch,
        "best_total": state.best_total,
        "optimized_params": param_names,
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps},
        "rng": {k: g.bit_generator.state for k, g in sorted(state.rngs.items())},
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


@dataclass
class Checkpoint:
    state: TrainState
    train_config: TrainConfig
    manifest: dict


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ParseError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: corrupt manifest ({e})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: checkpoint format_version {version} is incompatible with supported version {CHECKPOINT_VERSION}")
    payload = blob[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise ParseError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    arrays = {}
    for e in manifest["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    mcfg = ModelConfig.from_dict(manifest["model_config"])
    skeleton = Skeleton.from_text(manifest["skeleton"]["text"], name=manifest["skeleton"]["name"])
    tcfg = TrainConfig(**manifest["train_config"])
    model = StarsModel(mcfg, skeleton, np.random.default_rng(0))
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    names = model.named_parameters()
    params = [names[n] for n in manifest["optimized_params"]]
    a = manifest["adam"]
    adam = T.AdamState([arrays[f"adam/m/{n}"] for n in manifest["optimized_params"]],
                       [arrays[f"adam/v/{n}"] for n in manifest["optimized_params"]],
                       a["step"], a["beta1"], a["beta2"], a["eps"])
    rngs = {}
    for k, st in manifest["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[k] = g
    state = TrainState(model, params, adam, manifest["epoch"], rngs, manifest.get("best_total"))
    return Checkpoint(state, tcfg, manifest)


# ---------------------------------------------------------------- evaluation

def mpjpe_horizons_ms(variant: str) -> tuple[int, ...]:
    return LONG_HORIZONS_MS if variant == "deterministic_long" else SHORT_HORIZONS_MS


def evaluate(model: StarsModel, windows, epsilon: float = 0.5, seed: int = 0, fps: float = 25.0,
             batch: int = 64) -> MetricReport:
    N = len(windows)
    if N == 0:
        raise ParameterError("evaluation needs a non-empty test split")
    cfg = model.config
    if not cfg.stochastic:
        hz = mpjpe_horizons_ms(cfg.variant)
        frames = [ms_to_frame(ms, fps) for ms in hz]
        acc = np.zeros(len(hz))
        for s in range(0, N, batch):
            X = windows.X[s:s + batch]
            fut, _ = model.forward(X, None, None, training=False)
            for b in range(X.shape[0]):
                vals = mpjpe(fut.data[b, 0], windows.Y[s + b], frames)
                acc += np.array([vals[f] for f in frames])
        return MetricReport(mpjpe_by_horizon={ms: float(v / N) for ms, v in zip(hz, acc)}, sample_count=N)
    if cfg.K < 2:
        raise UnsupportedVariantError("diverse-prediction metrics need K >= 2 samples")
    mmgt = multimodal_ground_truth(windows.X, windows.Y, epsilon)
    rng = substream(seed, "eval")
    totals = np.zeros(5)
    for s in range(0, N, batch):
        X = windows.X[s:s + batch]
        fut, _, _ = model.sample_batch(X, rng)
        for b in range(X.shape[0]):
            i = s + b
            p, y, nb = fut[b], windows.Y[i], mmgt.entry(i)
            totals += (apd(p), ade(p, y), fde(p, y), mmade(p, nb), mmfde(p, nb))
    m = totals / N
    return MetricReport(apd=float(m[0]), ade=float(m[1]), fde=float(m[2]), mmade=float(m[3]),
                        mmfde=float(m[4]), sample_count=N)
