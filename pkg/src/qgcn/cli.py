"""Command line front end.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure,
5 IO error.  Failures print ``ErrorClass: message`` on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IOFailure, QGCNError, UsageError

METRIC_UNITS = {"mpjpe": "m", "p_mpjpe": "m", "root_error": "m", "maad": "rad", "n_windows": "count"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _topology(ref: str):
    from .skeleton import load_topology

    return load_topology(ref)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` pairs (dotted keys reach into nested sections; values parse as JSON)."""
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return d


def load_train_config(path: str | None, overrides: list[str]):
    from .trainer import TrainConfig

    d = TrainConfig().to_dict()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise IOFailure(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        model = user.pop("model", {})
        d.update(user)
        d["model"].update(model)
    apply_overrides(d, overrides)
    try:
        return TrainConfig.from_dict(d)
    except TypeError as e:
        raise UsageError(str(e)) from None


def _open_log(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stderr if path == "-" else None)
    try:
        return open(path, "a")
    except OSError as e:
        raise IOFailure(f"cannot open log {path}: {e}") from None


def _split_val(bundle, val_path: str | None, val_fraction: float):
    from .datahub import load_bundle

    if val_path:
        return bundle, load_bundle(val_path)
    if val_fraction > 0:
        n_val = max(1, int(round(val_fraction * len(bundle))))
        return bundle.split(len(bundle) - n_val)
    return bundle, None


def write_metrics_csv(path, metrics: dict, split: str) -> None:
    rows = [(k, v, METRIC_UNITS.get(k, "rad" if k.startswith("maad") else "")) for k, v in metrics.items()]
    fh = sys.stdout if path == "-" else open(path, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "units", "split"])
        for k, v, u in rows:
            w.writerow([k, repr(float(v)) if isinstance(v, float) else v, u, split])
    finally:
        if fh is not sys.stdout:
            fh.close()


# ---------------------------------------------------------------------------
# subcommands


def cmd_topo_validate(args) -> int:
    topo = _topology(args.path)
    print(f"ok: {topo.name}: {topo.n_joints} joints, {topo.n_bones} bones, root {topo.joint_names[topo.root]}, "
          f"{len(topo.symmetry_pairs)} symmetry pairs, total bone length {topo.total_bone_length:.4g} {topo.units}")
    return 0


def cmd_synth(args) -> int:
    from .datahub import MotionParams, generate_synthetic, save_bundle

    topo = _topology(args.topo)
    motion = MotionParams(amplitude=args.amplitude, keyframe_interval=args.keyframe_interval, root_drift=args.root_drift,
                          min_bend=args.min_bend)
    bundle = generate_synthetic(topo, args.sequences, args.frames, args.seed, motion)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: {len(bundle)} sequences x {args.frames} frames, topology {topo.name}")
    return 0


def cmd_derive(args) -> int:
    from .datahub import import_pose3d_csv, save_bundle

    topo = _topology(args.topo)
    bundle = import_pose3d_csv(args.csv, topo, labeled=not args.unlabeled)
    bundle.validate()
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: {len(bundle)} sequences, topology {topo.name}")
    return 0


def cmd_strip(args) -> int:
    from .datahub import load_bundle, save_bundle, strip_labels

    bundle = strip_labels(load_bundle(args.data), args.fraction, args.seed)
    save_bundle(bundle, args.out)
    print(f"wrote {args.out}: {bundle.n_labeled()} of {len(bundle)} sequences keep quaternion labels")
    return 0


def cmd_train(args) -> int:
    from .datahub import load_bundle
    from .trainer import TrainConfig, load_checkpoint, run_training

    bundle = load_bundle(args.data)
    train, val = _split_val(bundle, args.val, args.val_fraction)
    state = None
    if args.resume:
        if args.config:
            raise UsageError("--resume reuses the checkpoint's config; use --set to change individual keys")
        state, cfg = load_checkpoint(args.resume)
        cfg = TrainConfig.from_dict(apply_overrides(cfg.to_dict(), args.set))
    else:
        cfg = load_train_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = args.log or str(out / "train.ndjson")
    with _open_log(log_path) as log:
        state = run_training(cfg, train, val, state=state, checkpoint_dir=out, log=log)
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "steps": state.step, **{k: v for k, v in last.items() if k != "epoch"}}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .datahub import load_bundle
    from .trainer import evaluate, load_checkpoint

    state, _ = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.data)
    metrics = evaluate(state.model, bundle, batch_size=args.batch_size, flip_average=args.flip_average)
    for k, v in metrics.items():
        print(f"{k:12s} {v:.6g} {METRIC_UNITS.get(k, '')}".rstrip())
    if args.csv:
        write_metrics_csv(args.csv, metrics, args.split)
    return 0


def cmd_gradcheck(args) -> int:
    from .trainer import gradcheck_model

    report = gradcheck_model(_topology(args.topo), frames=args.frames, channels=tuple(args.channels),
                             hidden=args.hidden, batch=args.batch, probes=args.probes, tol=args.tol,
                             seed=args.seed)
    print(report.summary())
    if args.verbose:
        for t in report.tensors:
            print(f"  {t.name:28s} {str(t.shape):16s} probes={t.probed:4d} max_rel={t.max_rel_error:.3e}")
    if not report.passed:
        from .errors import NumericError

        raise NumericError(f"gradient check failed: max relative error {report.max_rel_error:.3e} > {args.tol:g}")
    return 0


def cmd_project(args) -> int:
    from .datahub import load_bundle
    from .quatkin import project_rotations_2d, rotation_angles
    from .trainer import load_checkpoint, make_windows, predict

    state, cfg = load_checkpoint(args.checkpoint)
    model = state.model
    if not cfg.model.use_orientation_head:
        raise UsageError("the checkpoint has no orientation head, so there is nothing to project")
    bundle = load_bundle(args.data)
    win = make_windows(bundle, cfg.model.receptive_field, mode="all")
    _, _, quats = predict(model, win.pose2d, win.rot2d)
    theta = rotation_angles(project_rotations_2d(quats, model.topo))
    observed = rotation_angles(win.rot2d[:, cfg.model.receptive_field // 2])
    diff = np.abs(np.arctan2(np.sin(theta - observed), np.cos(theta - observed)))
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", "bone", "theta_projected", "theta_observed", "abs_diff"])
        for i in range(len(win)):
            for b in range(model.topo.n_bones):
                w.writerow([int(win.sequence[i]), int(win.frame[i]), model.topo.bone_name(b),
                            repr(float(theta[i, b])), repr(float(observed[i, b])), repr(float(diff[i, b]))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    print(f"mean abs 2D rotation difference: {diff.mean():.6g} rad over {len(win)} frames", file=sys.stderr)
    return 0


def cmd_ablation(args) -> int:
    from .datahub import load_bundle
    from .trainer import run_ablation, summarize_ablation

    bundle = load_bundle(args.data)
    train, val = _split_val(bundle, args.val, args.val_fraction)
    if val is None:
        raise UsageError("ablation compares held-out metrics; give --val or --val-fraction")
    base = load_train_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _open_log(args.log or str(out / "ablation.ndjson")) as log:
        results = run_ablation(base, train, val, seeds=args.seeds, labeled_fraction=args.labeled_fraction, log=log,
                               on_result=lambda r: print(f"{r['config']:22s} seed={r['seed']} mpjpe={r['mpjpe']:.5f}", file=sys.stderr))
    summary = summarize_ablation(results)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "mpjpe", "p_mpjpe", "maad"])
        for r in results:
            w.writerow([r["config"], r["seed"], r["mpjpe"], r["p_mpjpe"], r.get("maad", "")])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "config", "seeds", "mpjpe", "p_mpjpe", "maad"])
        for i, s in enumerate(summary, 1):
            w.writerow([i, s["config"], s["seeds"], s["mpjpe"], s["p_mpjpe"], s.get("maad", "")])
    print(f"{'#':>2}  {'config':22s} {'MPJPE (m)':>11s} {'P-MPJPE (m)':>12s} {'mAAD (rad)':>11s}")
    for i, s in enumerate(summary, 1):
        maad = f"{s['maad']:11.5f}" if "maad" in s else f"{'-':>11s}"
        print(f"{i:>2}  {s['config']:22s} {s['mpjpe']:11.5f} {s['p_mpjpe']:12.5f} {maad}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _add_config_flags(p):
    p.add_argument("--config", help="training config file (JSON; keys of TrainConfig, model settings under 'model')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key after the file is read; dotted keys reach the model section "
                        "(e.g. model.channels=[32,32]); values parse as JSON; repeatable")


def _add_split_flags(p):
    p.add_argument("--val", help="held-out bundle; its sequences must be disjoint from the training data")
    p.add_argument("--val-fraction", type=float, default=0.0,
                   help="hold out this fraction of sequences (taken from the end) when --val is not given")


def build_parser() -> argparse.ArgumentParser:
    from .model import ModelConfig

    model_defaults = ModelConfig()
    ap = _Parser(prog="qgcn", description="Quaternion graph convolution for 2D-to-3D pose lifting.")
    ap.add_argument("--version", action="version", version=f"qgcn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("topo", help="topology utilities")
    tsub = p.add_subparsers(dest="topo_command", required=True, parser_class=_Parser)
    v = tsub.add_parser("validate", help="check a topology file (or bundled name) and summarize it")
    v.add_argument("path", help="path to a .topo file or a bundled topology name")
    v.set_defaults(func=cmd_topo_validate)

    p = sub.add_parser("synth", help="generate a synthetic FK-consistent dataset bundle")
    p.add_argument("--topo", default="h36m17", help="topology file or bundled name (default h36m17)")
    p.add_argument("--sequences", type=int, required=True, help="number of sequences")
    p.add_argument("--frames", type=int, required=True, help="frames per sequence")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--amplitude", type=float, default=0.6, help="max keyframe angle per Euler axis, radians")
    p.add_argument("--keyframe-interval", type=int, default=9, help="frames between slerp keyframes")
    p.add_argument("--min-bend", type=float, default=0.25,
                   help="floor on each bone's keyframe bend away from its parent, radians (capped at --amplitude)")
    p.add_argument("--root-drift", type=float, default=0.0, help="max root displacement per keyframe")
    p.add_argument("--out", required=True, help="output bundle path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("derive", help="turn 3D joint CSVs (frame,joint,x,y,z) into an oriented bundle")
    p.add_argument("csv", nargs="+", help="one CSV per sequence")
    p.add_argument("--topo", default="h36m17", help="topology file or bundled name")
    p.add_argument("--unlabeled", action="store_true", help="omit the derived quaternion labels")
    p.add_argument("--out", required=True, help="output bundle path")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("strip", help="withhold quaternion labels from a seeded subset of sequences")
    p.add_argument("data", help="input bundle")
    p.add_argument("--fraction", type=float, required=True, help="fraction of sequences that keep labels, in (0, 1]")
    p.add_argument("--seed", type=int, default=0, help="selection seed")
    p.add_argument("--out", required=True, help="output bundle path")
    p.set_defaults(func=cmd_strip)

    p = sub.add_parser("train", help="train a model; writes checkpoints and an NDJSON log")
    p.add_argument("--data", required=True, help="training bundle")
    _add_split_flags(p)
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from this checkpoint (its config is reused; --set still applies)")
    p.add_argument("--out", required=True, help="output directory for last.ckpt / best.ckpt / train.ndjson")
    p.add_argument("--log", help="log path ('-' for stderr; default OUT/train.ndjson)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="bundle with 3D labels")
    p.add_argument("--flip-average", action="store_true", help="average predictions on the input and its mirror image")
    p.add_argument("--batch-size", type=int, default=256, help="evaluation batch size (does not change results)")
    p.add_argument("--split", default="test", help="value of the split column in the CSV")
    p.add_argument("--csv", help="write metrics as CSV (metric,value,units,split); '-' for stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model loss at random init")
    p.add_argument("--topo", default="h36m17", help="topology file or bundled name")
    p.add_argument("--frames", type=int, default=9, help="receptive field (a power of 3)")
    p.add_argument("--seed", type=int, default=0, help="seed for parameters, data and probe selection")
    p.add_argument("--batch", type=int, default=2, help="batch size")
    p.add_argument("--channels", type=int, nargs="+", default=list(model_defaults.channels),
                   help="channels per block (default: the model default)")
    p.add_argument("--hidden", type=int, default=model_defaults.orient_hidden, help="orientation head hidden width")
    p.add_argument("--probes", type=int, default=200, help="probed coordinates per parameter tensor (all if fewer)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--verbose", action="store_true", help="per-tensor report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("project", help="2D rotations of a checkpoint's predicted orientations, per frame and bone")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="bundle with 2D inputs")
    p.add_argument("--out", default="-", help="CSV output path ('-' for stdout)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("ablation", help="train the six component combinations and compare held-out metrics")
    p.add_argument("--data", required=True, help="training bundle")
    _add_split_flags(p)
    _add_config_flags(p)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--labeled-fraction", type=float, default=0.5, help="fraction of training sequences keeping quaternion labels")
    p.add_argument("--out", required=True, help="output directory for ablation.csv and the log")
    p.add_argument("--log", help="log path (default OUT/ablation.ndjson)")
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except QGCNError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"IOFailure: {e}", file=sys.stderr)
        return IOFailure.exit_code
    except (ValueError, TypeError) as e:
        print(f"UsageError: {e}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
