"""Command-line interface: ``polarsplat <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Any subcommand accepts ``--config FILE`` (JSON); its keys override flags.
Set ``POLARSPLAT_THREADS`` to cap BLAS/OpenMP threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import data, metrics, optim, reconstruct, streak
from .geometry import GeometryError, Pose, SonarIntrinsics
from .rasterizer import RenderBundle, render
from .scene import Scene

log = logging.getLogger("polarsplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------- helpers

def load_schema(name: str) -> dict:
    return json.loads(resources.files("polarsplat").joinpath("schemas", f"{name}.schema.json").read_text())


def write_report(obj: dict, path: Path, schema: str) -> None:
    jsonschema.validate(obj, load_schema(schema))
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _num(x: float):
    """JSON-friendly float: infinities become the strings "inf"/"-inf"."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def fan_image(img, intr: SonarIntrinsics, width: int | None = None) -> np.ndarray:
    """Display-only Cartesian fan view (nearest bin; outside the fan is 0)."""
    H, W = intr.shape
    width = width or 2 * H
    half = intr.r_max * max(abs(math.sin(intr.theta_min)), abs(math.sin(intr.theta_max)), 1e-3)
    height = max(2, int(round(width * intr.r_max / (2 * half))))
    ys = np.linspace(half, -half, width)          # left of sensor on the left
    xs = np.linspace(intr.r_max, 0.0, height)     # far range at the top
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    r = np.hypot(X, Y)
    th = np.arctan2(Y, X)
    i = np.floor(r / intr.eps_r).astype(int)
    j = np.floor((th - intr.theta_min) / intr.eps_a).astype(int)
    ok = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    out = np.zeros(X.shape)
    out[ok] = np.asarray(img)[i[ok], j[ok]]
    return out


def dump_bundle(bundle: RenderBundle, directory: Path) -> None:
    """Debug dump of a render: one PNG per image plus ``ma.json``."""
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("I_u", "P_a", "Io", "A", "Ihat"):
        data.save_png16(getattr(bundle, name), directory / f"{name}.png")
    (directory / "ma.json").write_text(json.dumps([float(v) for v in bundle.M_a]) + "\n")


def _load_poses(path: Path) -> list:
    entries = json.loads(path.read_text())
    out = []
    for e in entries:
        q = np.asarray(e["q"], dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > data.QUAT_TOL:
            raise data.QuaternionNormError(f"pose {e.get('id')}: quaternion not unit norm")
        out.append((int(e.get("id", len(out))), Pose(q, e["t"])))
    return out


def _render_kw(args) -> dict:
    return {"use_range_attenuation": bool(args.attenuation), "gamma": float(args.gamma)}


# ---------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    intr = None
    if args.sensor:
        intr = SonarIntrinsics.load(args.sensor)
    spec, traj, intr = data.make_preset(args.preset, args.frames, intr)
    spec.noise = float(args.noise)
    sd = data.generate_synthetic(spec, traj, intr, gamma=args.gamma, seed=args.seed,
                                 quadrature=args.quadrature)
    out = Path(args.out)
    sd.dataset.save(out)
    gt = out / "gt"
    (gt / "clean").mkdir(parents=True, exist_ok=True)
    for f, clean in zip(sd.dataset.frames, sd.clean):
        data.save_png16(clean, gt / "clean" / f"{f.frame_id:05d}.png")
    labels = {f"{f.frame_id:05d}": [int(i) for i in np.flatnonzero(rows)]
              for f, rows in zip(sd.dataset.frames, sd.streak_rows)}
    (gt / "streak_rows.json").write_text(json.dumps(labels, indent=1) + "\n")
    sd.gt_mesh.save_ply(gt / "mesh.ply")
    print(f"wrote {len(sd.dataset)} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = data.load_dataset(args.data)
    cfg_d = {"seed": args.seed}
    if args.iterations is not None:
        cfg_d["iterations"] = args.iterations
    cfg_d.update(args.config_values)
    cfg = optim.TrainConfig.from_dict(cfg_d)
    out = Path(args.out)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    every = int(args.checkpoint_every)

    def on_step(it, scene, _step):
        if every > 0 and (it + 1) % every == 0:
            scene.save(ck / f"scene_{it + 1:06d}.spl")

    res = optim.train(ds.train_frames(), ds.intrinsics, cfg, ds.val_frames(), callback=on_step)
    res.scene.save(out / "scene.spl")
    optim.write_trace_csv(res.trace, out / "trace.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(f"trained {len(res.scene)} Gaussians; wrote {out / 'scene.spl'}")
    return EXIT_OK


def cmd_render(args) -> int:
    scene = Scene.load(args.scene)
    intr = SonarIntrinsics.load(args.sensor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fid, pose in _load_poses(Path(args.poses)):
        b = render(scene, pose, intr, apply_gain=not args.no_gain, **_render_kw(args))
        img = np.clip(b.Ihat, 0.0, 1.0)
        data.save_png16(img, out / f"{fid:05d}.png")
        data.save_png16(fan_image(img, intr), out / f"{fid:05d}_fan.png")
        if args.debug:
            dump_bundle(b, out / f"{fid:05d}_debug")
    return EXIT_OK


def cmd_destreak(args) -> int:
    scene = Scene.load(args.scene)
    ds = data.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = ds.frames if args.frame is None else [f for f in ds.frames if f.frame_id == args.frame]
    if not frames:
        raise data.DatasetError(f"frame {args.frame} not in dataset")
    report = {"mode": args.mode, "frames": []}
    for f in frames:
        b = render(scene, f.pose, ds.intrinsics, apply_gain=True, **_render_kw(args))
        clean = np.clip(streak.destreak(b, args.mode), 0.0, 1.0)
        streaked = np.clip(b.Ihat, 0.0, 1.0)
        sep = np.ones((f.image.shape[0], 2))
        data.save_png16(np.hstack([f.image, sep, streaked, sep, clean]), out / f"{f.frame_id:05d}_destreak.png")
        rows = np.flatnonzero(streak.detect_streak_rows(f.image, args.kappa))
        entry = {"id": f.frame_id, "M_a": [float(v) for v in b.M_a],
                 "streak_rows": [int(r) for r in rows], "icv_before": None, "icv_after": None}
        if len(rows):
            entry["icv_before"] = _num(streak.icv(f.image, rows))
            entry["icv_after"] = _num(streak.icv(clean, rows))
        report["frames"].append(entry)
    write_report(report, out / "destreak.json", "destreak")
    return EXIT_OK


def cmd_mesh(args) -> int:
    scene = Scene.load(args.scene)
    voxel = args.voxel
    if voxel is None:
        voxel = max(scene.extent() / 256.0, 1e-3) if len(scene) else 1.0
    mesh = reconstruct.extract_mesh(scene, voxel, args.iso, args.samples_per_gaussian, args.seed)
    if mesh.is_empty:
        log.warning("density never crosses iso level %.3g; writing an empty mesh", args.iso)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh.save_ply(out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {out}")
    return EXIT_OK


def cmd_eval2d(args) -> int:
    ds = data.load_dataset(args.data)
    frames = [f for i, f in enumerate(ds.frames) if ds.is_validation(i)] or ds.frames
    scene = Scene.load(args.scene) if args.scene else None
    if scene is None and args.pred is None:
        raise UsageError("eval2d needs --scene or --pred")
    rows = []
    for f in frames:
        if scene is not None:
            b = render(scene, f.pose, ds.intrinsics, apply_gain=not args.no_gain, **_render_kw(args))
            pred = np.clip(b.Ihat, 0.0, 1.0)
        else:
            path = Path(args.pred) / f"{f.frame_id:05d}.png"
            if not path.is_file():
                raise data.MissingFileError(f"{path} not found")
            pred = data.load_png16(path)
            if pred.shape != f.image.shape:
                raise data.DimensionMismatchError(f"{path}: shape {pred.shape} != {f.image.shape}")
        rows.append({"id": f.frame_id, "psnr": metrics.psnr(pred, f.image),
                     "ssim": metrics.ssim(pred, f.image)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval2d.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["id"], "inf" if math.isinf(r["psnr"]) else repr(r["psnr"]), repr(r["ssim"])])
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    report = {"n_views": len(rows), "psnr": _num(mean_psnr),
              "ssim": float(np.mean([r["ssim"] for r in rows])),
              "views": [{"id": r["id"], "psnr": _num(r["psnr"]), "ssim": r["ssim"]} for r in rows]}
    write_report(report, out / "eval2d.json", "eval2d")
    print(f"PSNR {report['psnr']}  SSIM {report['ssim']:.4f}")
    return EXIT_OK


def cmd_eval3d(args) -> int:
    pred = reconstruct.TriangleMesh.load_ply(args.pred)
    gt = reconstruct.TriangleMesh.load_ply(args.gt)
    if pred.is_empty or gt.is_empty:
        raise data.DatasetError("eval3d needs two non-empty meshes")
    icp_info = None
    if not args.no_align:
        pred, res = reconstruct.align_and_crop(pred, gt, rng_seed=args.seed, return_icp=True)
        icp_info = {"rms_initial": res.rms_initial, "rms_final": res.rms_final,
                    "iterations": res.iterations, "diverged": bool(res.diverged)}
        if pred.is_empty:
            raise data.DatasetError("prediction lies entirely outside the ground-truth box")
    cd, hd = reconstruct.chamfer_hausdorff(pred, gt, args.n_points, args.trials, args.seed)
    report = {"cd_l1": cd, "hausdorff": hd, "n_points": args.n_points, "trials": args.trials,
              "units": "m", "icp": icp_info}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out, "eval3d")
    print(f"CD-l1 {cd:.5f} m  HD {hd:.5f} m")
    return EXIT_OK


# ----------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polarsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON file whose keys override flags")
        return sp

    def render_flags(sp):
        sp.add_argument("--gamma", type=float, default=10.0, help="gain steepness (default 10)")
        sp.add_argument("--attenuation", action="store_true", help="apply 1/r range attenuation")

    sp = add("synth", cmd_synth, "generate a synthetic dataset with ground truth")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--preset", choices=data.PRESETS, default="tiny")
    sp.add_argument("--frames", type=int, help="number of frames (preset default if omitted)")
    sp.add_argument("--sensor", help="sensor.json overriding the preset intrinsics")
    sp.add_argument("--gamma", type=float, default=10.0, help="gain steepness for injected streaks")
    sp.add_argument("--noise", type=float, default=0.0, help="additive Gaussian noise sigma")
    sp.add_argument("--quadrature", type=int, default=8, help="rays per bin per axis")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train", cmd_train, "optimize a scene on a dataset")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--iterations", type=int, help="override iteration count")
    sp.add_argument("--checkpoint-every", type=int, default=1000, help="checkpoint period (0 disables)")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("render", cmd_render, "render polar and fan PNGs from a scene file")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--sensor", required=True, help="sensor.json")
    sp.add_argument("--poses", required=True, help="poses.json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-gain", action="store_true", help="render without streak gain")
    sp.add_argument("--debug", action="store_true", help="dump intermediate images and M_a")
    render_flags(sp)

    sp = add("destreak", cmd_destreak, "side-by-side de-streaking and ICV report")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frame", type=int, help="frame id (all frames if omitted)")
    sp.add_argument("--mode", choices=("rerender", "divide"), default="rerender")
    sp.add_argument("--kappa", type=float, default=2.0, help="row detector threshold")
    render_flags(sp)

    sp = add("mesh", cmd_mesh, "extract a triangle mesh from a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True, help="output PLY")
    sp.add_argument("--voxel", type=float, help="voxel size in meters")
    sp.add_argument("--iso", type=float, default=reconstruct.DEFAULT_ISO)
    sp.add_argument("--samples-per-gaussian", type=int, default=reconstruct.DEFAULT_SAMPLES_PER_GAUSSIAN)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval2d", cmd_eval2d, "PSNR/SSIM over the validation split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scene", help="scene file to render")
    sp.add_argument("--pred", help="directory of predicted PNGs named like the dataset")
    sp.add_argument("--no-gain", action="store_true")
    render_flags(sp)

    sp = add("eval3d", cmd_eval3d, "ICP-align, crop, and compute CD-l1/HD")
    sp.add_argument("--pred", required=True, help="predicted mesh PLY")
    sp.add_argument("--gt", required=True, help="ground-truth mesh PLY")
    sp.add_argument("--out", required=True, help="report JSON")
    sp.add_argument("--n-points", type=int, default=30000)
    sp.add_argument("--trials", type=int, default=30)
    sp.add_argument("--no-align", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _apply_config(args, parser) -> None:
    args.config_values = {}
    if not getattr(args, "config", None):
        return
    try:
        values = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise data.MissingFileError(f"{args.config} not found") from None
    if not isinstance(values, dict):
        raise data.DatasetError("config file must hold a JSON object")
    if args.command == "train":
        # training hyperparameters go to TrainConfig; CLI keys still override flags
        args.config_values = {k: v for k, v in values.items() if k.replace("-", "_") not in vars(args)}
        if "seed" in values:
            args.config_values["seed"] = values["seed"]
    for k, v in values.items():
        key = k.replace("-", "_")
        if key in vars(args) and key not in ("func", "command", "config", "config_values"):
            setattr(args, key, v)
        elif args.command != "train":
            raise UsageError(f"unknown config key {k!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        _apply_config(args, parser)
        return args.func(args)
    except UsageError as e:
        print(f"polarsplat {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (optim.DivergenceError, FloatingPointError) as e:
        print(f"polarsplat {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DatasetError, GeometryError, FileNotFoundError, KeyError, ValueError,
            jsonschema.ValidationError, OSError) as e:
        print(f"polarsplat {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
