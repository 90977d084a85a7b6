"""Command-line interface: simdata, fit, instantiate, animate, render, bench,
check-grad and serve subcommands.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import os
import sys

import numpy as np


class _UsageError(SystemExit):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise _UsageError(1)


def build_parser():
    # the global flags are accepted both before and after the subcommand
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed")
    shared.add_argument("--deterministic", action="store_true",
                        default=argparse.SUPPRESS,
                        help="force deterministic mode")
    shared.add_argument("--config", default=argparse.SUPPRESS,
                        help="run configuration file (key=value lines)")

    p = Parser(prog="gsavatar",
               description="Feed-forward animatable 3D-Gaussian avatars")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="force deterministic mode")
    p.add_argument("--config", help="run configuration file (key=value lines)")
    sub = p.add_subparsers(dest="command", required=True)

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[shared], **kw)

    sp = add_parser("simdata", help="build a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ids", type=int, default=8)
    sp.add_argument("--exprs", type=int, default=8)
    sp.add_argument("--views", type=int, default=4)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--code-dim", type=int, default=16)

    sp = add_parser("fit", help="train on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--variant", choices=["feature_space", "spatial_deformation"])
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--quiet", action="store_true")

    sp = add_parser("instantiate", help="build an avatar from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--identity", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--points-out", help="also export a flat point list")

    sp = add_parser("animate", help="render an avatar over a code sequence")
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--codes", required=True,
                    help="json array (or array of arrays) or raw .f32 file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--yaw", type=float, default=0.0)
    sp.add_argument("--pitch", type=float, default=0.0)
    sp.add_argument("--dist", type=float, default=2.7)

    sp = add_parser("render", help="render an avatar along a camera orbit")
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--yaw-range", type=float, default=40.0,
                    help="total yaw sweep in degrees")
    sp.add_argument("--code", help="optional json code vector")

    sp = add_parser("bench", help="timing table for the decoupling contract")
    sp.add_argument("--avatar")
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = add_parser("check-grad", help="finite-difference gradient suites")
    sp.add_argument("--suite", default="all",
                    help="comma-separated suite names or 'all'")
    sp.add_argument("--tol", type=float, default=1e-6)

    sp = add_parser("serve", help="live viewer service")
    sp.add_argument("--avatar", required=True)
    sp.add_argument("--port", type=int, default=8787)
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--auto-fps", type=float, default=0.0)
    return p


def _load_run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
    return cfg


def _read_codes(path, dm):
    if path.endswith(".json") or path.strip().startswith("["):
        text = open(path).read() if os.path.exists(path) else path
        data = json.loads(text)
        arr = np.asarray(data, dtype=np.float32)
    else:
        arr = np.fromfile(path, dtype="<f4")
    if arr.ndim == 1:
        if arr.size % dm != 0:
            raise ValueError(f"code data length {arr.size} is not a multiple of {dm}")
        arr = arr.reshape(-1, dm)
    if arr.shape[1] != dm:
        raise ValueError(f"codes have dim {arr.shape[1]}, avatar expects {dm}")
    return arr


def cmd_simdata(args, cfg):
    from .synthia import build_dataset

    manifest = build_dataset(args.out, args.ids, args.exprs, args.views,
                             seed=cfg.seed, resolution=args.resolution,
                             code_dim=args.code_dim)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    return 0


def cmd_fit(args, cfg):
    from . import avatar_io
    from .trainer import AvatarModel, PairedDataset, fit, fit_with_optimizer

    dataset = PairedDataset(args.data)
    if args.steps:
        cfg.steps = args.steps
    if args.variant:
        cfg.variant = args.variant
    log = None if args.quiet else (
        lambda m: print(f"step {m['step']:5d} res {m['resolution']:3d} "
                        f"loss {m['loss']:.4f} l1 {m['l1']:.4f}", flush=True))
    if args.resume:
        model, optimizer, start, cfg = avatar_io.load_checkpoint(args.resume)
        report = fit_with_optimizer(model, optimizer, dataset, cfg,
                                    start_step=start, out_dir=args.out,
                                    log_cb=log)
    else:
        model = AvatarModel(dataset.n_id, cfg)
        report = fit(model, dataset, cfg, out_dir=args.out, log_cb=log)
    print(json.dumps(report, indent=1))
    return 0


def cmd_instantiate(args, cfg):
    from . import avatar_io
    from .bench import build_avatar
    from .sampler import SamplingConfig

    model, _, _, mcfg = avatar_io.load_checkpoint(args.checkpoint)
    if not 0 <= args.identity < model.n_identities:
        raise ValueError(f"identity {args.identity} out of range "
                         f"[0, {model.n_identities})")
    grid = args.grid or mcfg.sample_grid
    scfg = SamplingConfig(grid, mcfg.samples_coarse, mcfg.samples_fine)
    avatar = build_avatar(model.triplanes[args.identity], model.phi, scfg)
    avatar_io.save_avatar(args.out, avatar, model.psi)
    if args.points_out:
        avatar_io.export_point_list(args.points_out, avatar.decode_static())
    print(f"instantiated {avatar.count} primitives -> {args.out}")
    return 0


def cmd_animate(args, cfg):
    from . import autodiff as ad
    from .avatar_io import load_avatar
    from .cameras import orbit_camera
    from .motion import MotionCode, animate
    from .rasterizer import rasterize

    avatar, psi = load_avatar(args.avatar)
    codes = _read_codes(args.codes, psi.code_dim)
    os.makedirs(args.out, exist_ok=True)
    cam = orbit_camera(np.deg2rad(args.yaw), np.deg2rad(args.pitch), args.dist,
                       base_size=args.resolution)
    zero = MotionCode.zeros(psi.code_dim)
    for i, code in enumerate(codes):
        with ad.no_grad():
            gset = animate(avatar, psi, zero, MotionCode(code))
            img = rasterize(gset.detached(), cam, args.resolution)
        img.save_png(os.path.join(args.out, f"frame_{i:04d}.png"))
    print(f"wrote {len(codes)} frames to {args.out}")
    return 0


def cmd_render(args, cfg):
    from . import autodiff as ad
    from .avatar_io import load_avatar
    from .cameras import orbit_camera
    from .motion import MotionCode, animate
    from .rasterizer import rasterize

    avatar, psi = load_avatar(args.avatar)
    zero = MotionCode.zeros(psi.code_dim)
    code = zero
    if args.code:
        code = MotionCode(np.asarray(json.loads(args.code), np.float32),
                          dim=psi.code_dim)
    with ad.no_grad():
        gset = animate(avatar, psi, zero, code).detached()
    os.makedirs(args.out, exist_ok=True)
    half = np.deg2rad(args.yaw_range) / 2
    for i, yaw in enumerate(np.linspace(-half, half, args.frames)):
        cam = orbit_camera(yaw, 0.0, 2.7, base_size=args.resolution)
        with ad.no_grad():
            img = rasterize(gset, cam, args.resolution)
        img.save_png(os.path.join(args.out, f"view_{i:04d}.png"))
    print(f"wrote {args.frames} views to {args.out}")
    return 0


def cmd_bench(args, cfg):
    from .avatar_io import load_avatar
    from .bench import format_table, run_bench

    if args.avatar:
        avatar, psi = load_avatar(args.avatar)
        result = run_bench(cfg, avatar=avatar, psi=psi,
                           resolution=args.resolution, repeats=args.repeats,
                           seed=cfg.seed)
    else:
        result = run_bench(cfg, resolution=args.resolution,
                           repeats=args.repeats, seed=cfg.seed)
    if args.json:
        print(json.dumps(result, indent=1))
    else:
        print(format_table(result))
    return 0


def cmd_check_grad(args, cfg):
    from .gradsuites import run_suites

    names = None if args.suite == "all" else [s.strip()
                                              for s in args.suite.split(",")]
    results = run_suites(names, seed=cfg.seed, tol=args.tol)
    all_ok = True
    for name, (res, ok) in results.items():
        all_ok &= ok
        print(f"{name:10s} {'PASS' if ok else 'FAIL'} "
              f"max_rel_err={res.max_rel_err:.3e} "
              f"(param {res.param_index}, coord {res.coord})")
    return 0 if all_ok else 2


def cmd_serve(args, cfg):
    from .viewer import serve

    serve(args.avatar, args.port, resolution=args.resolution,
          auto_fps=args.auto_fps)
    return 0


COMMANDS = {
    "simdata": cmd_simdata, "fit": cmd_fit, "instantiate": cmd_instantiate,
    "animate": cmd_animate, "render": cmd_render, "bench": cmd_bench,
    "check-grad": cmd_check_grad, "serve": cmd_serve,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        cfg = _load_run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, ArithmeticError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
