"""Command-line entry point: ``egoflow <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, flowviz, gradnet, mfg, objmotion, synthgen
from .egosolver import (DegenerateInputError, RobustSolveOptions, recover_rotation,
                        recover_translation, robust_egomotion)
from .geometry import CameraModel, integrate_trajectory, relative_egomotion


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def fmt(x) -> str:
    """Nine significant digits for scalars and vectors."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return " ".join(f"{v:.9g}" for v in arr)


# --- key=value config files ---------------------------------------------------------

def _parse_value(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = raw.replace(",", " ").split()
        if len(parts) != len(default):
            raise ValueError(f"{name}: expected {len(default)} values, got {raw!r}")
        return tuple(_parse_value(v, d, name) for v, d in zip(parts, default))
    if isinstance(default, int):
        v = float(raw)
        if v != int(v):
            raise ValueError(f"{name}: expected an integer, got {raw!r}")
        return int(v)
    if default is None or isinstance(default, float):
        if raw.lower() == "none":
            return None
        return float(raw)
    return raw


def load_config(path, cls, base=None, skip=(), reset=()):
    """Apply ``key = value`` lines from ``path`` on top of ``base`` (or defaults).

    Fields named in ``reset`` go back to None so that derived defaults are
    recomputed from the new values.
    """
    base = base if base is not None else cls()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e.strerror}") from None
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls) if f.name not in skip}
    updates = {name: None for name in reset}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise DataError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            updates[key] = _parse_value(raw, known[key], key)
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: {e}") from None
    try:
        return dataclasses.replace(base, **updates)
    except (ValueError, TypeError) as e:
        raise DataError(f"{path}: {e}") from None


# --- helpers ----------------------------------------------------------------------------

def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _say(args, *lines):
    if not args.quiet:
        for line in lines:
            print(line)


def _load_checkpoint(path):
    model, cam = mfg.MfgModel.from_tensors(gradnet.load_checkpoint(path))
    if cam is None:
        cam = CameraModel.default(model.config.width, model.config.height)
    return model, cam


def _camera_for(args, flow_px):
    H, W = flow_px.shape[:2]
    if getattr(args, "manifest", None):
        cam = dataio.read_manifest(args.manifest).camera
    elif getattr(args, "camera", None):
        f, cx, cy = args.camera
        cam = CameraModel(f, cx, cy, W, H)
    else:
        cam = CameraModel.default(W, H)
    if cam.shape != (H, W):
        raise DataError(f"flow is {W}x{H} but camera expects {cam.width}x{cam.height}")
    return cam


def _read_flow_for(cam, path):
    flow = dataio.read_flow(path)
    if flow.shape[:2] != cam.shape:
        raise DataError(f"{path}: flow is {flow.shape[1]}x{flow.shape[0]}, "
                        f"model expects {cam.width}x{cam.height}")
    return cam.to_normalized(flow)


def _parse_klist(text):
    try:
        ks = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad k list {text!r}") from None
    if not ks or any(not 0 < k <= 100 for k in ks):
        raise UsageError("k values must lie in (0, 100]")
    return ks


# --- subcommands ------------------------------------------------------------------------

def cmd_generate(args):
    cfg = synthgen.SceneConfig()
    if args.config:
        cfg = load_config(args.config, synthgen.SceneConfig, cfg)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cam = cfg.camera()
    out = _out_dir(args)
    if args.sequence:
        samples, traj = synthgen.generate_sequence(cfg, args.count + 1)
    else:
        samples, traj = synthgen.generate(cfg, args.count), None
    dataio.write_dataset(out, cam, samples, traj)
    _say(args, f"wrote {len(samples)} samples to {out}")


def cmd_train(args):
    man, data = dataio.load_dataset(args.dataset)
    cam = man.camera
    cfg = mfg.MfgConfig(width=cam.width, height=cam.height)
    if args.config:
        cfg = load_config(args.config, mfg.MfgConfig, cfg, skip=("encoder", "width", "height"),
                          reset=("encoder",))
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if not data:
        raise DataError("dataset has no samples")
    seed = args.seed or 0
    model = mfg.MfgModel(cfg, seed=seed)
    samples = [mfg.TrainSample(s.flow, s.ego) for s in data]
    model, history = mfg.train(model, samples, cam, args.epochs, seed=seed)
    out = _out_dir(args)
    ckpt = Path(args.checkpoint_out) if args.checkpoint_out else out / "model.mfg"
    gradnet.save_checkpoint(ckpt, model.to_tensors(cam))
    with open(out / "loss.csv", "w") as f:
        mfg.write_loss_csv(history, f)
    lines = [f"epoch {e.epoch} L_t {fmt(e.l_t)} L_w {fmt(e.l_w)} L_s {fmt(e.l_s)} "
             f"active {fmt(e.active)}" for e in history]
    _say(args, *lines, f"checkpoint {ckpt}")


def cmd_predict(args):
    model, cam = _load_checkpoint(args.checkpoint)
    flow = _read_flow_for(cam, args.flow)
    v_t, v_w, h = mfg.predict_fields(model, flow, args.topk)
    t, w = recover_translation(v_t, cam), recover_rotation(v_w, cam)
    _say(args, f"t {fmt(t)}", f"omega {fmt(w)}",
         f"active {int(np.sum(h > mfg.ACTIVE_THRESHOLD))}")
    if args.write_fields:
        out = _out_dir(args)
        dataio.write_flow(out / "pred_t.flo", cam.to_pixels(v_t))
        dataio.write_flow(out / "pred_w.flo", cam.to_pixels(v_w))


def cmd_solve(args):
    flow_px = dataio.read_flow(args.flow)
    cam = _camera_for(args, flow_px)
    flow = cam.to_normalized(flow_px)
    if args.robust:
        opts = RobustSolveOptions()
    else:
        # plain least squares on the same search: no down-weighting, no rejection
        opts = RobustSolveOptions(huber_delta=float("inf"), irls_iters=1,
                                  inlier_fraction_floor=1.0)
    rep = robust_egomotion(flow, cam, opts)
    t = rep.ego.t
    _say(args, f"t {fmt(t)}", f"omega {fmt(rep.ego.omega)}",
         f"residual_rms {fmt(rep.residual_rms)}",
         f"objective {fmt(rep.objective)}",
         f"inliers {int(rep.inlier_mask.sum())} of {rep.inlier_mask.size}",
         f"degenerate {int(rep.degenerate)}", f"ambiguous {int(rep.ambiguous)}")


def cmd_extract(args):
    model, cam = _load_checkpoint(args.checkpoint)
    flow = _read_flow_for(cam, args.flow)
    rho = dataio.read_depth(args.depth)
    if rho.shape != cam.shape:
        raise DataError("depth raster size does not match the flow")
    v_t, v_w, _ = mfg.predict_fields(model, flow, args.topk)
    res = objmotion.extract_object_motion(flow, v_t, v_w, rho)
    out = _out_dir(args)
    vel_px = cam.to_pixels(res.velocity)
    dataio.write_mask(out / "object_mask.msk", res.mask)
    dataio.write_flow(out / "object_flow.flo", vel_px)
    flowviz.write_raster(flowviz.mask_to_image(res.mask), out / "object_mask.ppm")
    flowviz.write_raster(flowviz.flow_to_image(vel_px), out / "object_flow.ppm")
    n = int(res.mask.sum())
    mean = vel_px[res.mask].mean(axis=0) if n else np.zeros(2)
    _say(args, f"object_pixels {n}", f"mean_velocity_px {fmt(mean)}")


def _predictions(args, data, cam):
    """Predicted per-frame motions and, when given as poses, the trajectory itself."""
    if args.pred_poses:
        poses = dataio.read_pose_file(args.pred_poses)
        if len(poses) != len(data) + 1:
            raise DataError(f"{args.pred_poses}: expected {len(data) + 1} poses, got {len(poses)}")
        return [relative_egomotion(a, b) for a, b in zip(poses[:-1], poses[1:])], poses
    model, mcam = _load_checkpoint(args.checkpoint)
    if mcam.shape != cam.shape:
        raise DataError("checkpoint input size does not match the dataset")
    return [mfg.predict_egomotion(model, s.flow, cam, args.topk) for s in data], None


def cmd_eval(args):
    if bool(args.checkpoint) == bool(args.pred_poses):
        raise UsageError("give exactly one of --checkpoint or --pred-poses")
    man, data = dataio.load_dataset(args.dataset)
    if not data:
        raise DataError("dataset has no samples")
    cam = man.camera
    out = _out_dir(args)
    gt = [s.ego for s in data]
    lines = []
    if args.metric:
        pred, pred_traj = _predictions(args, data, cam)
        if args.metric == "ate":
            if man.poses:
                gt_traj = dataio.read_pose_file(Path(args.dataset) / man.poses)
                if len(gt_traj) != len(data) + 1:
                    raise DataError("pose file length does not match the samples")
            else:
                gt_traj = integrate_trajectory(gt)
            if len(gt_traj) < args.snippet:
                raise DataError(f"ATE needs at least {args.snippet} poses")
            if pred_traj is None:
                pred_traj = integrate_trajectory(pred, gt_traj[0])
            rep = evalkit.ate(pred_traj, gt_traj, evalkit.AteOptions(args.snippet))
            with open(out / "ate.csv", "w") as f:
                evalkit.write_metric_csv(rep, f, "ate")
            lines.append(f"ate mean {fmt(rep.mean)} std {fmt(rep.std)}")
        else:
            te, re = evalkit.rpe(pred, gt)
            with open(out / "rpe.csv", "w") as f:
                f.write("frame,trans_err,rot_err\n")
                for i, (a, b) in enumerate(zip(te.values, re.values)):
                    f.write(f"{i},{a:.9g},{b:.9g}\n")
            lines.append(f"rpe_trans mean {fmt(te.mean)} std {fmt(te.std)}")
            lines.append(f"rpe_rot mean {fmt(re.mean)} std {fmt(re.std)}")
    if args.sparsity_sweep:
        if not args.checkpoint:
            raise UsageError("--sparsity-sweep needs --checkpoint")
        ks = _parse_klist(args.sparsity_sweep)
        model, _ = _load_checkpoint(args.checkpoint)
        metric = "ate" if args.metric == "ate" else "egomotion"
        rows = evalkit.sparsity_sweep(model, data, cam, ks, metric=metric, snippet=args.snippet)
        with open(out / "sweep.csv", "w") as f:
            evalkit.write_sweep_csv(rows, f)
        for r in rows:
            lines.append(f"k {fmt(r.k)} metric {fmt(r.value)} t_dir_deg {fmt(r.t_dir_deg)} "
                         f"omega_err {fmt(r.omega_err)}")
    if not lines:
        raise UsageError("nothing to do: give --metric and/or --sparsity-sweep")
    _say(args, *lines)


def cmd_viz(args):
    if bool(args.flow) == bool(args.trajectory):
        raise UsageError("give exactly one of --flow or --trajectory")
    if args.flow:
        img = flowviz.flow_to_image(dataio.read_flow(args.flow), args.max_magnitude)
    else:
        trajs = [dataio.read_pose_file(p) for p in args.trajectory]
        if any(len(t) == 0 for t in trajs):
            raise DataError("empty pose file")
        img = flowviz.trajectory_plot(trajs, args.trajectory, size=args.size)
    out = Path(args.out) if args.out else _out_dir(args) / "viz.ppm"
    out.parent.mkdir(parents=True, exist_ok=True)
    flowviz.write_raster(img, out)
    _say(args, f"wrote {out}")


# --- parser --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _camera_arg(text):
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected f,cx,cy") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected f,cx,cy")
    return vals


def _topk_arg(text):
    try:
        k = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < k <= 100:
        raise argparse.ArgumentTypeError("k must lie in (0, 100]")
    return k


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="egoflow", description="Egomotion and object motion from optic flow.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--quiet", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--sequence", action="store_true",
                   help="smooth sequence with a ground-truth pose file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--config")
    t.add_argument("--checkpoint-out")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="egomotion from one flow file")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--flow", required=True)
    pr.add_argument("--topk", type=_topk_arg)
    pr.add_argument("--write-fields", action="store_true")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("solve", parents=[common], help="classical geometric solver")
    s.add_argument("--flow", required=True)
    s.add_argument("--robust", action="store_true")
    s.add_argument("--manifest", help="take the camera from a dataset manifest")
    s.add_argument("--camera", type=_camera_arg, help="f,cx,cy in pixels")
    s.set_defaults(func=cmd_solve)

    x = sub.add_parser("extract", parents=[common], help="object motion from flow and depth")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--flow", required=True)
    x.add_argument("--depth", required=True)
    x.add_argument("--topk", type=_topk_arg)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("eval", parents=[common], help="trajectory metrics and sparsity sweep")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--pred-poses", help="pose file to evaluate instead of a model")
    e.add_argument("--metric", choices=("ate", "rpe"))
    e.add_argument("--sparsity-sweep", metavar="K_LIST")
    e.add_argument("--topk", type=_topk_arg)
    e.add_argument("--snippet", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", parents=[common], help="render flow or trajectories")
    v.add_argument("--flow")
    v.add_argument("--trajectory", nargs="+")
    v.add_argument("--out")
    v.add_argument("--max-magnitude", type=float)
    v.add_argument("--size", type=int, default=256)
    v.set_defaults(func=cmd_viz)
    return p


_DATA_ERRORS = (dataio.FormatError, gradnet.CheckpointError, DegenerateInputError,
                DataError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"egoflow: usage error: {e}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        if isinstance(e, OSError) and e.filename:
            msg = f"{e.filename}: {e.strerror}"
        print(f"egoflow: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
