"""Command-line entry point wiring all modules into reproducible pipelines.

Exit codes: 0 success, 2 invalid arguments/usage, 1 runtime failure.
All randomness derives from --seed (or TACTFORGE_SEED for the default).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__


def _global_seed_default() -> int:
    env = os.environ.get("TACTFORGE_SEED")
    return int(env) if env else 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_global_seed_default(),
                   help="master random seed (default from TACTFORGE_SEED or 0)")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; explicit flags win over file values")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on module-internal parallelism; results are "
                        "identical for any value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tactforge",
        description="Synthetic optical-tactile sensor data and calibration toolkit.")
    parser.add_argument("--version", action="store_true", help="print version and exit")
    parser.add_argument("--json", action="store_true",
                        help="with --version, print machine-readable JSON")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("pattern", help="generate the stippled-tour surface pattern "
                       "(a single open stroke; a closed cycle would only add one "
                       "long return segment)")
    p.add_argument("--n", type=int, default=8192)
    p.add_argument("--domain-mm", type=float, default=25.0)
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--px-per-mm", type=float, default=20.0)
    p.add_argument("--stroke-mm", type=float, default=0.15)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    _add_common(p)

    p = sub.add_parser("simulate", help="ray-cast an indenter into a depth map")
    p.add_argument("--sphere", type=float, nargs=4, metavar=("R", "CX", "CY", "CZ"),
                   default=None, help="analytic sphere: radius and center (mm)")
    p.add_argument("--stl", default=None, help="STL indenter path")
    p.add_argument("--pose", default=None, help="pose JSON (quaternion + translation mm)")
    p.add_argument("--resolution", type=int, default=640)
    p.add_argument("--bulge-sigma", type=float, default=20.0)
    p.add_argument("--no-bulge", action="store_true")
    p.add_argument("--out", required=True, help="output 8-bit depth PNG")
    _add_common(p)

    p = sub.add_parser("render", help="render an interior camera frame")
    p.add_argument("--depth", required=True, help="8-bit depth PNG (codec space)")
    p.add_argument("--pattern", required=True, help="pattern PNG")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("dataset", help="build, filter, or split datasets")
    dsub = p.add_subparsers(dest="dataset_command")
    b = dsub.add_parser("build")
    b.add_argument("--plan", default=None, help="plan JSON; omit for the default plan")
    b.add_argument("--out", required=True)
    b.add_argument("--indenters", type=int, default=21)
    b.add_argument("--steps", type=int, default=20)
    b.add_argument("--resolution", type=int, default=64)
    b.add_argument("--threshold", type=float, default=0.9)
    _add_common(b)
    f = dsub.add_parser("filter")
    f.add_argument("--images", nargs="+", required=True, help="frames in sequence order")
    f.add_argument("--threshold", type=float, default=0.9)
    _add_common(f)
    s = dsub.add_parser("split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--hold-out", nargs="*", default=[], help="held-out indenter ids")
    s.add_argument("--out-train", default=None)
    s.add_argument("--out-test", default=None)
    _add_common(s)

    p = sub.add_parser("train", help="train a depth or wrench model")
    p.add_argument("--task", choices=["depth", "wrench"], required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=None,
                   help="default 1e-4 for depth, 2e-5 for wrench")
    p.add_argument("--loss", default="default")
    p.add_argument("--input-size", type=int, default=64)
    _add_common(p)

    p = sub.add_parser("transfer", help="fine-tune a pretrained model on a small set")
    p.add_argument("--mode", choices=["3dim", "6dim"], required=True)
    p.add_argument("--pretrained", required=True, help="pretrained checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--freeze-encoder", action="store_true")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and emit a report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report directory")
    _add_common(p)

    p = sub.add_parser("selftest", help="codec roundtrip, gradient check, symmetry oracles")
    _add_common(p)
    return parser


def _active_parser(parser: argparse.ArgumentParser,
                   args: argparse.Namespace) -> argparse.ArgumentParser:
    """The (sub)parser that actually owns the parsed arguments' defaults."""
    active = parser
    for attr in ("command", "dataset_command"):
        name = getattr(args, attr, None)
        if not name:
            break
        for action in active._actions:
            if isinstance(action, argparse._SubParsersAction) and name in action.choices:
                active = action.choices[name]
                break
    return active


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill config-file values into args wherever the flag is still at its
    default (explicit flags win). Defaults live on the subparser that handled
    the command, not on the top-level parser."""
    if getattr(args, "config", None) is None:
        return
    with open(args.config) as f:
        cfg = json.load(f)
    active = _active_parser(parser, args)
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            continue
        if getattr(args, dest) == active.get_default(dest):
            setattr(args, dest, value)


def _write_resolved_config(args: argparse.Namespace, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k not in ("command", "dataset_command") and not callable(v)}
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


# ---------------------------------------------------------------- commands

def _cmd_pattern(args) -> int:
    from . import pattern
    ps = pattern.stipple(args.n, args.domain_mm, iterations=args.iterations,
                         seed=args.seed)
    tour = pattern.solve_tour(ps, seed=args.seed)
    img = pattern.rasterize_tour(tour, ps, px_per_mm=args.px_per_mm,
                                 stroke_width=args.stroke_mm)
    pattern.save_pattern(img, args.out, svg_path=args.svg, tour=tour, ps=ps,
                         iterations=args.iterations)
    print(f"pattern: {args.n} points, tour {tour.length:.1f} mm, "
          f"coverage {pattern.coverage_fraction(img):.3f} -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    import cv2

    from . import gelsim
    geom = gelsim.SensorGeometry(resolution=args.resolution)
    if args.sphere is not None:
        r, cx, cy, cz = args.sphere
        shape = gelsim.SphereIndenter(center=(cx, cy, cz), radius=r)
    elif args.stl is not None:
        shape = gelsim.load_stl(args.stl)
        if args.pose:
            rot, trans = gelsim.load_pose(args.pose)
            shape = shape.transformed(rot, trans)
    else:
        print("error: need --sphere or --stl", file=sys.stderr)
        return 2
    contact = gelsim.raycast_indent(geom, shape)
    surface = contact if args.no_bulge else gelsim.apply_bulge(contact, geom,
                                                               sigma=args.bulge_sigma)
    codec = gelsim.DepthCodec()
    img, n_low, n_high = codec.encode_with_stats(surface.values)
    cv2.imwrite(args.out, img)
    sidecar = {**codec.sidecar(), "saturated_low": n_low, "saturated_high": n_high,
               "meta": {k: v for k, v in surface.meta.items()}}
    with open(args.out + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    print(f"simulate -> {args.out}")
    return 0


def _cmd_render(args) -> int:
    import cv2

    from . import gelsim, optics
    depth_img = cv2.imread(args.depth, cv2.IMREAD_GRAYSCALE)
    if depth_img is None:
        raise FileNotFoundError(args.depth)
    pat = cv2.imread(args.pattern, cv2.IMREAD_GRAYSCALE)
    if pat is None:
        raise FileNotFoundError(args.pattern)
    codec = gelsim.DepthCodec()
    values = codec.decode(depth_img)
    cam = optics.CameraModel(width=depth_img.shape[1], height=depth_img.shape[0])
    frame = optics.render_frame(values, cam, optics.LightRig(),
                                optics.SurfaceMaterial(texture=pat))
    cv2.imwrite(args.out, frame[..., ::-1])
    print(f"render -> {args.out}")
    return 0


def _cmd_dataset(args) -> int:
    from . import dataio
    if args.dataset_command == "build":
        if args.plan:
            with open(args.plan) as f:
                plan_json = json.load(f)
            sensor = dataio.SensorConfig(**plan_json.pop("sensor", {}))
            plan = dataio.DatasetPlan(sensor=sensor, **plan_json)
        else:
            plan = dataio.DatasetPlan.default(
                n_indenters=args.indenters, steps=args.steps,
                sensor=dataio.SensorConfig(resolution=args.resolution))
            plan.filter_threshold = args.threshold
        manifest = dataio.build_dataset(plan, args.out, seed=args.seed)
        _write_resolved_config(args, args.out)
        print(f"dataset: {len(manifest.records)} records -> {manifest.root}")
        return 0
    if args.dataset_command == "filter":
        import cv2
        frames = []
        for path in args.images:
            img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
            if img is None:
                raise FileNotFoundError(path)
            frames.append(img)
        kept = [args.images[i] for i, _ in dataio.filter_stream(frames, args.threshold)]
        for path in kept:
            print(path)
        print(f"kept {len(kept)} of {len(frames)}", file=sys.stderr)
        return 0
    if args.dataset_command == "split":
        manifest = dataio.Manifest.load(args.manifest)
        train, test = dataio.split(manifest, args.hold_out)
        if not train.records and test.records:
            print("warning: degenerate split, training set is empty", file=sys.stderr)
        out_train = args.out_train or args.manifest.replace(".jsonl", ".train.jsonl")
        out_test = args.out_test or args.manifest.replace(".jsonl", ".test.jsonl")
        train.save(out_train)
        test.save(out_test)
        print(f"split: {len(train.records)} train / {len(test.records)} test")
        return 0
    print("error: dataset needs a subcommand (build|filter|split)", file=sys.stderr)
    return 2


def _cmd_train(args) -> int:
    from . import calib, dataio, neural
    manifest = dataio.Manifest.load(args.manifest)
    val = dataio.Manifest.load(args.val) if args.val else None
    lr = args.lr if args.lr is not None else (1e-4 if args.task == "depth" else 2e-5)
    cfg = calib.TrainConfig(batch_size=args.batch_size, epochs=args.epochs, lr=lr,
                            seed=args.seed, loss=args.loss)
    spec = neural.ModelSpec(task=args.task, input_size=args.input_size)
    model, history = calib.train(spec, manifest, val, cfg)
    os.makedirs(args.out, exist_ok=True)
    neural.save_checkpoint(os.path.join(args.out, "checkpoint.tfck"), model, spec)
    history.save(os.path.join(args.out, "history.json"))
    with open(os.path.join(args.out, "model_spec.json"), "w") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    _write_resolved_config(args, args.out)
    final = history.val_loss[-1] if history.val_loss else history.train_loss[-1]
    print(f"train: final loss {final:.5f}, convergence step "
          f"{history.convergence_step} -> {args.out}")
    return 0


def _cmd_transfer(args) -> int:
    from . import calib, dataio, neural
    manifest = dataio.Manifest.load(args.manifest)
    val = dataio.Manifest.load(args.val) if args.val else None
    cfg = calib.TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                            lr=args.lr, seed=args.seed,
                            freeze_encoder=args.freeze_encoder)
    if args.mode == "3dim":
        model, history = calib.transfer_3dim(args.pretrained, manifest, val, cfg)
    else:
        model, history = calib.transfer_6dim(args.pretrained, manifest, val, cfg)
    os.makedirs(args.out, exist_ok=True)
    neural.save_checkpoint(os.path.join(args.out, "checkpoint.tfck"), model,
                           model.spec, extra={"transfer_mode": args.mode})
    history.save(os.path.join(args.out, "history.json"))
    _write_resolved_config(args, args.out)
    print(f"transfer {args.mode}: convergence step {history.convergence_step} "
          f"-> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import torch

    from . import calib, dataio, evalreport, gelsim, neural, wrench as wrench_mod
    manifest = dataio.Manifest.load(args.manifest)
    model, spec, _ = neural.load_checkpoint(args.ckpt)
    model.eval()
    data = calib.ManifestDataset(manifest, spec.task,
                                 six_channel=spec.input_channels == 6)
    preds = []
    with torch.no_grad():
        for lo in range(0, len(data), 32):
            preds.append(model(data.x[lo:lo + 32]))
    pred = torch.cat(preds).numpy()
    gt = data.y.numpy()
    violins = {}
    depth_stats = wrench_stats = None
    if spec.task == "depth":
        codec = gelsim.DepthCodec(d_min=manifest.codec["d_min_mm"],
                                  step=manifest.codec["step_mm"])
        pred_px = np.round(np.clip(pred[:, 0] * 255.0, 0, 255))
        gt_px = np.round(gt[:, 0] * 255.0)
        depth_stats = evalreport.depth_errors(pred_px, gt_px, codec)
        violins["depth_l1_mm"] = evalreport.violin_stats(depth_stats.per_frame_l1_mm)
    else:
        ranges = wrench_mod.WrenchRanges.from_json(manifest.wrench_ranges)
        lo_a, hi_a = ranges.as_arrays()
        pred_raw = lo_a + pred * (hi_a - lo_a)
        gt_raw = lo_a + gt * (hi_a - lo_a)
        wrench_stats = evalreport.wrench_errors(pred_raw, gt_raw)
        violins["force_err_N"] = evalreport.violin_stats(
            np.abs(pred_raw[:, :3] - gt_raw[:, :3]).mean(axis=1))
        violins["torque_err_Nmm"] = evalreport.violin_stats(
            np.abs(pred_raw[:, 3:] - gt_raw[:, 3:]).mean(axis=1))
    path = evalreport.emit_report(args.out, depth_stats=depth_stats,
                                  wrench_stats=wrench_stats, violins=violins,
                                  metadata={"manifest": args.manifest,
                                            "task": spec.task,
                                            "n_records": len(manifest.records)},
                                  checkpoint_path=args.ckpt)
    _write_resolved_config(args, args.out)
    print(f"eval -> {path}")
    return 0


def _cmd_selftest(args) -> int:
    from . import gelsim, neural, wrench as wrench_mod
    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"  [{'ok' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1

    codec = gelsim.DepthCodec()
    px = np.arange(256, dtype=np.uint8)
    check("codec roundtrip", np.array_equal(codec.encode(codec.decode(px)), px))
    check("codec nominal pixel", int(codec.encode(np.array([15.5]))[0]) == 180)

    geom = gelsim.SensorGeometry(resolution=64)
    dm = gelsim.analytic_sphere_indent(geom, (0, 0, 19.0), 5.0)
    w = wrench_mod.compute_wrench(dm, geom, wrench_mod.FoundationParams())
    fz = w.force[2]
    check("central contact symmetry",
          fz < 0 and all(abs(v) <= 1e-9 * abs(fz)
                         for v in (w.force[0], w.force[1], *w.torque)))

    err = neural.grad_check(neural.tiny_spec("wrench", input_size=12))
    check("gradient check", err <= 1e-4)
    print("selftest:", "PASS" if failures == 0 else f"{failures} FAILURES")
    return 0 if failures == 0 else 1


_COMMANDS = {
    "pattern": _cmd_pattern,
    "simulate": _cmd_simulate,
    "render": _cmd_render,
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "transfer": _cmd_transfer,
    "eval": _cmd_eval,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        if args.json:
            print(json.dumps({"name": "tactforge", "version": __version__}))
        else:
            print(f"tactforge {__version__}")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    _apply_config(args, parser)
    if getattr(args, "threads", None):
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
