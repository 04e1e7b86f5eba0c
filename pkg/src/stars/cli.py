"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage error (argparse).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import trainer as TR
from .config import VARIANT_FLAGS, RunConfig
from .errors import ParameterError, StarsError, ValidationError
from .gradcheck import DEFAULT_PARAM_CAP, run_gradcheck
from .graph import Skeleton
from .model import StarsModel, interpolate_anchor

log = logging.getLogger("stars")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _same_skeleton(a: Skeleton, b: Skeleton) -> bool:
    return (a.joint_names == b.joint_names and sorted(a.bone_edges) == sorted(b.bone_edges)
            and sorted(a.mirror_pairs) == sorted(b.mirror_pairs))


# ---------------------------------------------------------------- generate-data

def cmd_generate_data(args) -> int:
    spec = D.SyntheticSpec.from_file(args.spec)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise StarsError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    records = D.generate_synthetic(spec, args.seed)
    tpl = D.skeleton_template(spec.skeleton)
    (out / "resolved_spec.ini").write_text(_spec_ini(spec, args.seed))
    manifest = D.write_dataset(records, tpl.skeleton, out, spec, args.seed)
    print(f"wrote {len(manifest['records'])} records ({spec.mode_count} modes) to {out}")
    return 0


def _spec_ini(spec: D.SyntheticSpec, seed: int) -> str:
    lines = [f"# seed = {seed}", "[synthetic]"]
    lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in spec.to_dict().items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- train

def _overrides(args) -> dict:
    o: dict[str, dict[str, str]] = {}
    if getattr(args, "seed", None) is not None:
        o.setdefault("train", {})["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        o.setdefault("train", {})["epochs"] = str(args.epochs)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        o.setdefault(section, {})[name] = value
    return o


def cmd_train(args) -> int:
    skeleton, train_recs, _, manifest = D.load_dataset(args.data)
    out = Path(args.out)
    if args.resume:
        ck = TR.load_checkpoint(args.resume)
        state, cfg = ck.state, RunConfig(ck.state.model.config, ck.train_config)
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
        if not _same_skeleton(state.model.skeleton, skeleton):
            raise ValidationError("checkpoint skeleton does not match the dataset skeleton")
        cfg.echo(out)
        log.info("resuming at epoch %d", state.epoch)
    else:
        cfg = RunConfig.from_file(args.config, overrides=_overrides(args), variant=args.variant, V=skeleton.V)
        cfg.echo(out)
        model = StarsModel(cfg.model, skeleton, TR.substream(cfg.seed, "init"))
        state = TR.TrainState.create(model, cfg.train)
    windows = D.window_dataset(train_recs, cfg.model.T_h, cfg.model.T_p, cfg.train.stride)
    if len(windows) < 2:
        raise ParameterError(f"training needs at least 2 windows of {cfg.model.T_h + cfg.model.T_p} frames")

    def progress(s):
        log.info("epoch %d lr %.6g total %.6g", s["epoch"], s["lr"], s["total"])

    TR.fit(state, windows, cfg.train, out, progress=progress if args.verbose else None)
    print(f"trained to epoch {state.epoch}; checkpoints in {out}")
    return 0


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    ck = TR.load_checkpoint(args.checkpoint)
    model = ck.state.model
    skeleton, _, test_recs, manifest = D.load_dataset(args.data)
    if not _same_skeleton(model.skeleton, skeleton):
        raise ValidationError(
            f"checkpoint skeleton {model.skeleton.name} ({model.skeleton.V} joints) does not match "
            f"dataset skeleton {skeleton.name} ({skeleton.V} joints)")
    cfg = model.config
    windows = D.window_dataset(test_recs, cfg.T_h, cfg.T_p, ck.train_config.stride)
    fps = float(test_recs[0].fps) if test_recs else 25.0
    report = TR.evaluate(model, windows, args.epsilon, args.seed, fps=fps)
    echo = {
        "checkpoint_sha256": _sha256(args.checkpoint),
        "checkpoint_epoch": ck.state.epoch,
        "data_seed": manifest.get("seed"),
        "epsilon": args.epsilon,
        "seed": args.seed,
        "fps": fps,
        "model": cfg.to_dict(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(echo))
    out.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_json(echo), end="")
    return 0


# ---------------------------------------------------------------- predict / interpolate

def _load_history(path, model: StarsModel) -> tuple[D.MotionRecord, np.ndarray]:
    rec = D.load_motion_file(path, model.skeleton)
    T_h = model.config.T_h
    fr = np.asarray(rec.frames, dtype=np.float64)
    if fr.shape[0] < T_h:
        raise ParameterError(f"{path}: {fr.shape[0]} frames, the model needs a history of {T_h}")
    return rec, fr[-T_h:]


def _noise_draws(model: StarsModel, seed: int, n: int):
    cfg = model.config
    if not cfg.stochastic or cfg.noise_dim == 0 or cfg.noise_layer is None:
        return [None] * n
    rng = TR.substream(seed, "noise")
    return [rng.standard_normal(cfg.noise_dim) for _ in range(n)]


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--anchor expects i,j, got {text!r}") from None
    return i, j


def _emit(out: Path, fname: str, src: D.MotionRecord, model: StarsModel, fut: np.ndarray):
    rec = D.MotionRecord(f"{src.id}_prediction", src.fps, model.skeleton.name, list(model.skeleton.joint_names),
                         fut, None)
    D.save_motion_file(rec, out / fname)


def _echo_invocation(out: Path, args, ck_path, extra: dict):
    echo = {"command": args.command, "checkpoint_sha256": _sha256(ck_path), "seed": args.seed, **extra}
    _write_json(out / "invocation.json", echo)


def cmd_predict(args) -> int:
    ck = TR.load_checkpoint(args.checkpoint)
    model = ck.state.model
    src, X = _load_history(args.input, model)
    cfg = model.config
    if args.k_all:
        pairs = model.all_pairs() if cfg.uses_anchors else [(0, 0)]
    else:
        i, j = _parse_pair(args.anchor)
        if cfg.uses_anchors and not (0 <= i < cfg.K_s and 0 <= j < cfg.K_t):
            raise ParameterError(f"--anchor {i},{j} outside the anchor grid ({cfg.K_s}, {cfg.K_t})")
        if not cfg.uses_anchors and (i, j) != (0, 0):
            raise ParameterError("this checkpoint has no anchors; only --anchor 0,0 is valid")
        pairs = [(i, j)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    zs = _noise_draws(model, args.seed, len(pairs))
    provenance = []
    for k, ((i, j), z) in enumerate(zip(pairs, zs)):
        fut, _ = model.forward_one(X, i, j, z)
        fname = f"pred_{k:03d}.json"
        _emit(out, fname, src, model, fut)
        provenance.append({"file": fname, "spatial": i, "temporal": j, "noise_draw": k if z is not None else None,
                           "seed": args.seed})
    _write_json(out / "provenance.json", provenance)
    _echo_invocation(out, args, args.checkpoint, {"input_sha256": _sha256(args.input),
                                                  "anchor": args.anchor, "k_all": bool(args.k_all)})
    print(f"wrote {len(pairs)} prediction(s) to {out}")
    return 0


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise ParameterError(f"--steps must be >= 2, got {args.steps}")
    ck = TR.load_checkpoint(args.checkpoint)
    model = ck.state.model
    cfg = model.config
    if not cfg.uses_anchors:
        raise ParameterError("interpolation needs a stochastic checkpoint with anchors")
    src, X = _load_history(args.input, model)
    n_axis = cfg.K_s if args.axis == "spatial" else cfg.K_t
    n_other = cfg.K_t if args.axis == "spatial" else cfg.K_s
    for name, v in (("--from", args.from_), ("--to", args.to)):
        if not (0 <= v < n_axis):
            raise ParameterError(f"{name} {v} outside [0, {n_axis}) for the {args.axis} axis")
    if not (0 <= args.fixed < n_other):
        raise ParameterError(f"--fixed {args.fixed} outside [0, {n_other})")
    (z,) = _noise_draws(model, args.seed, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = []
    for s in range(args.steps):
        alpha = s / (args.steps - 1)
        override = {(lvl, args.axis): interpolate_anchor(model.anchors, lvl, args.axis, args.from_, args.to, alpha)
                    for lvl in range(len(model.anchors.levels))}
        if args.axis == "spatial":
            i, j = args.from_, args.fixed
        else:
            i, j = args.fixed, args.from_
        fut, _ = model.forward_one(X, i, j, z, anchor_override=override)
        fname = f"interp_{s:03d}.json"
        _emit(out, fname, src, model, fut)
        provenance.append({"file": fname, "axis": args.axis, "from": args.from_, "to": args.to, "alpha": alpha,
                           "fixed": args.fixed, "noise_draw": 0 if z is not None else None, "seed": args.seed})
    _write_json(out / "provenance.json", provenance)
    _echo_invocation(out, args, args.checkpoint, {"input_sha256": _sha256(args.input), "axis": args.axis,
                                                  "from": args.from_, "to": args.to, "steps": args.steps,
                                                  "fixed": args.fixed})
    print(f"wrote {args.steps} interpolated prediction(s) to {out}")
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    cfg = RunConfig.from_file(args.config, variant=args.variant)
    report = run_gradcheck(cfg.model, cfg.weights, args.seed, args.tolerance, args.primitive_tolerance,
                           cap=args.max_params, corrupt=args.corrupt, max_coords=args.max_coords)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
    return 0 if report.passed else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stars", description="Anchor-based diverse human motion prediction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic multi-modal motion dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    t.add_argument("--resume", help="checkpoint to continue from (its stored config is used)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="compute the metric report on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--epsilon", type=float, default=0.5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="sample predictions for one motion file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    mode = pr.add_mutually_exclusive_group(required=True)
    mode.add_argument("--k-all", action="store_true")
    mode.add_argument("--anchor")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    it = sub.add_parser("interpolate", help="sweep linearly between two anchors")
    it.add_argument("--checkpoint", required=True)
    it.add_argument("--input", required=True)
    it.add_argument("--axis", choices=("spatial", "temporal"), required=True)
    it.add_argument("--from", dest="from_", type=int, required=True)
    it.add_argument("--to", type=int, required=True)
    it.add_argument("--steps", type=int, required=True)
    it.add_argument("--fixed", type=int, default=0, help="index on the other anchor axis")
    it.add_argument("--seed", type=int, default=0)
    it.add_argument("--out", required=True)
    it.set_defaults(func=cmd_interpolate)

    gc = sub.add_parser("gradcheck", help="compare gradients with finite differences",
                        description="Tolerance 0 always fails: a block passes only when its error is "
                                    "strictly below the tolerance.")
    gc.add_argument("--config", required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--primitive-tolerance", type=float, default=1e-4)
    gc.add_argument("--max-params", type=int, default=DEFAULT_PARAM_CAP)
    gc.add_argument("--max-coords", type=int, default=None, help="sample at most this many entries per block")
    gc.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    gc.add_argument("--corrupt", metavar="PRIMITIVE", help="scale one adjoint to test the harness")
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.config and not args.resume:
        parser.error("train needs --config (or --resume)")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (StarsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
