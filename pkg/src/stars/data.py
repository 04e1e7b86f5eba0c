"""Synthetic multi-modal motion, motion/skeleton files and windowing.

Synthetic records come in groups that share one history. At the branch frame
each group splits into ``mode_count`` continuations that keep the history's
limb oscillation and add a mode-specific drift (direction and speed), so the
set of futures reachable from a history is known exactly. The oscillation is
elliptical (an in-plane swing plus a quadrature component) so that the last
history pose pins down amplitude and phase.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError, ValidationError
from .graph import Skeleton

log = logging.getLogger(__name__)

MOTION_FORMAT_VERSION = 1


# ---------------------------------------------------------------- skeleton templates

@dataclass(frozen=True)
class SkeletonTemplate:
    skeleton: Skeleton
    rest: np.ndarray        # (V, 3) rest pose
    swing: np.ndarray       # (V,) oscillation / drift weight per joint
    swing_dir: np.ndarray   # (V, 3) unit oscillation direction
    swing_dir2: np.ndarray  # (V, 3) unit quadrature direction, perpendicular to swing_dir and vertical


def _template(name, joints, bones, mirrors, rest, swing, swing_dir):
    idx = {n: i for i, n in enumerate(joints)}
    sk = Skeleton(tuple(joints), tuple((idx[a], idx[b]) for a, b in bones),
                  tuple((idx[a], idx[b]) for a, b in mirrors), name=name)
    sd = np.asarray(swing_dir, dtype=np.float64)
    sd = sd / np.linalg.norm(sd, axis=1, keepdims=True)
    sd2 = np.cross(sd, np.array([0.0, 1.0, 0.0]))
    sd2 = sd2 / np.linalg.norm(sd2, axis=1, keepdims=True)
    return SkeletonTemplate(sk, np.asarray(rest, dtype=np.float64), np.asarray(swing, dtype=np.float64), sd, sd2)


def skeleton_template(name: str) -> SkeletonTemplate:
    if name == "chain3":
        return _template("chain3", ["base", "mid", "tip"], [("base", "mid"), ("mid", "tip")], [],
                         [[0, 1.0, 0], [0, 0.6, 0], [0, 0.2, 0]], [0.0, 0.5, 1.0],
                         [[1, 0, 0], [1, 0, 0], [1, 0, 0]])
    if name == "stick9":
        joints = ["pelvis", "spine", "head", "l_hand", "r_hand", "l_knee", "r_knee", "l_foot", "r_foot"]
        bones = [("pelvis", "spine"), ("spine", "head"), ("spine", "l_hand"), ("spine", "r_hand"),
                 ("pelvis", "l_knee"), ("pelvis", "r_knee"), ("l_knee", "l_foot"), ("r_knee", "r_foot")]
        mirrors = [("l_hand", "r_hand"), ("l_knee", "r_knee"), ("l_foot", "r_foot")]
        rest = [[0, 0, 0], [0, 0.5, 0], [0, 0.75, 0], [-0.45, 0.45, 0], [0.45, 0.45, 0],
                [-0.12, -0.45, 0], [0.12, -0.45, 0], [-0.12, -0.9, 0], [0.12, -0.9, 0]]
        swing = [0.0, 0.2, 0.3, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0]
        sdir = [[1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 0, 1], [0, 0, -1], [0, 0, -1], [0, 0, 1],
                [0, 0, -1], [0, 0, 1]]
        return _template("stick9", joints, bones, mirrors, rest, swing, sdir)
    raise ParameterError(f"unknown skeleton template {name!r}; known: chain3, stick9")


# ---------------------------------------------------------------- records

@dataclass
class MotionRecord:
    id: str
    fps: float
    skeleton: str
    joint_names: tuple[str, ...]
    frames: np.ndarray              # (T, V, 3), metres
    mode_label: int | None = None

    def to_json(self) -> str:
        doc = {
            "format_version": MOTION_FORMAT_VERSION,
            "id": self.id,
            "fps": self.fps,
            "skeleton": self.skeleton,
            "joint_names": list(self.joint_names),
            "mode_label": self.mode_label,
            "frames": np.asarray(self.frames, dtype=np.float64).tolist(),
        }
        return json.dumps(doc, sort_keys=True) + "\n"


def save_motion_file(record: MotionRecord, path):
    if not np.all(np.isfinite(record.frames)):
        raise ValidationError(f"record {record.id}: non-finite coordinates")
    Path(path).write_text(record.to_json())


def load_motion_file(path, skeleton: Skeleton | None = None) -> MotionRecord:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed motion file at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top-level value must be an object")
    for key in ("format_version", "fps", "joint_names", "frames"):
        if key not in doc:
            raise ParseError(f"{path}: missing field {key!r}")
    if doc["format_version"] != MOTION_FORMAT_VERSION:
        raise ParseError(f"{path}: format_version {doc['format_version']} unsupported "
                         f"(expected {MOTION_FORMAT_VERSION})")
    names = tuple(doc["joint_names"])
    try:
        frames = np.array(doc["frames"], dtype=np.float64)
    except (ValueError, TypeError):
        raise ParseError(f"{path}: frames are not a rectangular numeric array") from None
    if frames.ndim != 3 or frames.shape[2] != 3 or frames.shape[1] != len(names):
        raise ParseError(f"{path}: frames shape {frames.shape} does not match {len(names)} joints x 3")
    if not np.all(np.isfinite(frames)):
        raise ValidationError(f"{path}: non-finite coordinates")
    if skeleton is not None and len(names) != skeleton.V:
        raise ValidationError(f"{path}: skeleton expects {skeleton.V} joints, file has {len(names)}")
    return MotionRecord(doc.get("id", Path(path).stem), float(doc["fps"]), doc.get("skeleton", ""),
                        names, frames, doc.get("mode_label"))


# ---------------------------------------------------------------- generator

@dataclass
class SyntheticSpec:
    skeleton: str = "chain3"
    mode_count: int = 4
    sequences: int = 64            # history groups
    repeats: int = 1               # records per (group, mode)
    history: int = 8               # branch frame
    length: int = 24
    fps: float = 25.0
    noise_scale: float = 0.005
    amplitude_min: float = 0.1
    amplitude_max: float = 0.3
    frequency_hz: float = 1.0
    quadrature: float = 1.0        # relative amplitude of the out-of-plane swing (0: planar)
    drift: float = 0.02            # metres per frame at unit speed
    test_fraction: float = 0.25

    def validate(self):
        if self.mode_count < 1 or self.sequences < 1 or self.repeats < 1:
            raise ParameterError("mode_count, sequences and repeats must be >= 1")
        if not (1 <= self.history < self.length):
            raise ParameterError(f"history {self.history} must lie in [1, length={self.length})")
        if self.noise_scale < 0 or self.fps <= 0:
            raise ParameterError("noise_scale must be >= 0 and fps > 0")
        if not (0 <= self.test_fraction < 1):
            raise ParameterError("test_fraction must lie in [0, 1)")
        skeleton_template(self.skeleton)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as e:
            raise ParseError(f"{path}: {e}") from None
        if not cp.has_section("synthetic"):
            raise ParseError(f"{path}: missing [synthetic] section")
        kw = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for k, v in cp.items("synthetic"):
            if k not in types:
                raise ParseError(f"{path}: unknown key {k!r} in [synthetic]")
            t = types[k]
            kw[k] = v if t in ("str", str) else (int(v) if t in ("int", int) else float(v))
        spec = cls(**kw)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def mode_direction(m: int, mode_count: int) -> tuple[np.ndarray, float]:
    """Drift direction (unit, x-z plane) and speed of mode ``m``."""
    theta = 2.0 * math.pi * m / mode_count
    speed = 1.0 + 0.5 * (m % 2)
    return np.array([math.cos(theta), 0.0, math.sin(theta)]), speed


def group_id(rec_id: str) -> str:
    return rec_id.split("_")[0]


def generate_synthetic(spec: SyntheticSpec, seed: int, clean: bool = False) -> list[MotionRecord]:
    """Records for every (group, mode[, repeat]); ``clean`` omits the additive noise but
    consumes the same random draws, so the result aligns with the noisy call."""
    spec.validate()
    tpl = skeleton_template(spec.skeleton)
    sk = tpl.skeleton
    rng = np.random.default_rng(seed)
    t = np.arange(spec.length)
    steps = np.clip(t - spec.history + 1, 0, None).astype(np.float64)  # 0 through the history
    records = []
    for g in range(spec.sequences):
        amp = rng.uniform(spec.amplitude_min, spec.amplitude_max)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        angle = 2.0 * math.pi * spec.frequency_hz * t / spec.fps + phase
        osc = amp * np.sin(angle)[:, None, None] * tpl.swing_dir[None]
        osc = osc + spec.quadrature * amp * np.cos(angle)[:, None, None] * tpl.swing_dir2[None]
        base = tpl.rest[None] + tpl.swing[None, :, None] * osc
        for m in range(spec.mode_count):
            direction, speed = mode_direction(m, spec.mode_count)
            drift = (spec.drift * speed * steps)[:, None, None] * (tpl.swing[:, None] * direction[None])[None]
            base_mode = base + drift
            for r in range(spec.repeats):
                noise = rng.normal(0.0, spec.noise_scale, base_mode.shape) if spec.noise_scale > 0 else 0.0
                rid = f"g{g:04d}_m{m}" + (f"_r{r}" if spec.repeats > 1 else "")
                frames = base_mode if clean else base_mode + noise
                records.append(MotionRecord(rid, spec.fps, sk.name, sk.joint_names, frames, m))
    return records


# ---------------------------------------------------------------- splits and windows

@dataclass
class DatasetSplit:
    train: list[MotionRecord]
    test: list[MotionRecord]
    T_h: int
    T_p: int
    stride: int = 1

    def __post_init__(self):
        overlap = {r.id for r in self.train} & {r.id for r in self.test}
        if overlap:
            raise ValidationError(f"train/test share record ids: {sorted(overlap)[:5]}")


def split_by_group(records: list[MotionRecord], test_fraction: float) -> tuple[list, list]:
    groups = sorted({group_id(r.id) for r in records})
    n_test = int(round(test_fraction * len(groups)))
    test_groups = set(groups[len(groups) - n_test:]) if n_test else set()
    train = [r for r in records if group_id(r.id) not in test_groups]
    test = [r for r in records if group_id(r.id) in test_groups]
    return train, test


@dataclass
class WindowSet:
    X: np.ndarray                  # (N, T_h, V, 3)
    Y: np.ndarray                  # (N, T_p, V, 3)
    record_ids: list[str] = field(default_factory=list)
    starts: list[int] = field(default_factory=list)
    mode_labels: list[int | None] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i):
        return self.X[i], self.Y[i]


def window_dataset(records, T_h: int, T_p: int, stride: int = 1) -> WindowSet:
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    L = T_h + T_p
    xs, ys, ids, starts, modes = [], [], [], [], []
    skipped = 0
    V = None
    for rec in records:
        fr = np.asarray(rec.frames, dtype=np.float64)
        if fr.shape[0] < L:
            skipped += 1
            continue
        V = fr.shape[1]
        for s in range(0, fr.shape[0] - L + 1, stride):
            xs.append(fr[s:s + T_h])
            ys.append(fr[s + T_h:s + L])
            ids.append(rec.id)
            starts.append(s)
            modes.append(rec.mode_label)
    if skipped:
        log.warning("skipped %d record(s) shorter than %d frames", skipped, L)
    if not xs:
        shape = (0, T_h, V or 0, 3)
        return WindowSet(np.zeros(shape), np.zeros((0, T_p, V or 0, 3)), skipped=skipped)
    return WindowSet(np.stack(xs), np.stack(ys), ids, starts, modes, skipped)


# ---------------------------------------------------------------- dataset directories

def write_dataset(records: list[MotionRecord], skeleton: Skeleton, out_dir, spec: SyntheticSpec, seed: int):
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    skel_file = f"{skeleton.name}.skel"
    skeleton.save(out / skel_file)
    train, test = split_by_group(records, spec.test_fraction)
    test_ids = {r.id for r in test}
    entries = []
    for rec in records:
        save_motion_file(rec, out / "motions" / f"{rec.id}.json")
        entries.append({"id": rec.id, "file": f"motions/{rec.id}.json", "mode_label": rec.mode_label,
                        "group": group_id(rec.id), "split": "test" if rec.id in test_ids else "train"})
    mode_counts: dict[str, int] = {}
    for rec in records:
        mode_counts[str(rec.mode_label)] = mode_counts.get(str(rec.mode_label), 0) + 1
    manifest = {
        "format_version": MOTION_FORMAT_VERSION,
        "seed": seed,
        "spec": spec.to_dict(),
        "skeleton_file": skel_file,
        "mode_count": spec.mode_count,
        "mode_record_counts": mode_counts,
        "records": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir):
    """Returns ``(skeleton, train_records, test_records, manifest)``."""
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"{d}: no manifest.json") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{d}/manifest.json: line {e.lineno}, column {e.colno}: {e.msg}") from None
    skeleton = Skeleton.load(d / manifest["skeleton_file"])
    train, test = [], []
    for entry in manifest["records"]:
        rec = load_motion_file(d / entry["file"], skeleton)
        (test if entry.get("split") == "test" else train).append(rec)
    return skeleton, train, test, manifest
