"""``vod`` command-line entry point.

Every command that touches a run directory resolves its configuration as
defaults < run lockfile (or ``--config``) < flags, and leaves ``config.lock.json`` behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import LOCKFILE, resolve_config, write_lock
from .errors import ConflictingFlags, MissingStageInput, VodError
from .pipeline import STAGES, read_marker, run_pipeline

log = logging.getLogger("vod.cli")

# convenience flags and the dotted config keys they set
FLAG_KEYS = {
    "mode": "mode",
    "protocol": "protocol",
    "detector": "detector",
    "epochs": "train.epochs",
    "lr": "train.base_lr",
    "batch_size": "train.batch_size",
    "toy_scale": "network.toy_scale",
    "c_sl": "sampling.c_sl",
    "c_step": "sampling.c_step",
    "c_in": "sampling.c_in",
    "out_size": "sampling.out_size",
    "frame_cap": "sampling.frame_cap",
    "max_segments": "sampling.max_segments",
    "margin": "sampling.margin",
    "allow_train_eval": "eval.allow_train_eval",
    "split": "eval.split",
    "n_boot": "eval.n_boot",
}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _value(v)
    return out


def collect_flags(args) -> dict:
    flags = {"seed": args.seed, "jobs": args.jobs}
    for name, key in FLAG_KEYS.items():
        v = getattr(args, name, None)
        if v is not None:
            flags[key] = v
    manifest = getattr(args, "manifest", None)
    if manifest:
        flags["paths.manifest"] = str(manifest)
    if args.out:
        flags["paths.out"] = str(args.out)
    for k, v in parse_sets(getattr(args, "set", None)).items():
        if k in flags and flags[k] != v:
            raise ConflictingFlags(f"{k} given as {flags[k]!r} and via --set as {v!r}")
        flags[k] = v
    return flags


def load_config(args):
    """Resolve the run configuration; an existing run lockfile stands in for ``--config``."""
    if args.config and args.lock:
        raise ConflictingFlags("--config and --lock are mutually exclusive")
    lock = args.lock
    if lock is None and args.config is None and args.out and (Path(args.out) / LOCKFILE).is_file():
        lock = Path(args.out) / LOCKFILE
    if lock is not None:
        lock = json.loads(Path(lock).read_text())
    return resolve_config(collect_flags(args), args.config, lock=lock)


def _require_out(args) -> Path:
    if not args.out:
        raise SystemExit("error: --out is required")
    return Path(args.out)


# commands -------------------------------------------------------------------


def cmd_synth(args):
    from .manifest import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_real=args.n_real, n_fake=args.n_fake, frames=args.frames, height=args.size,
                         width=args.size, flicker_amplitude=args.flicker, seed=args.seed or 0)
    m = generate_synthetic(spec, _require_out(args))
    print(f"wrote {len(m)} clips and manifest.json to {args.out}")


def _stages(args, stages):
    cfg = load_config(args)
    run = run_pipeline(stages, cfg, _require_out(args), getattr(args, "manifest", None))
    for s in run.executed:
        print(f"{s}: done")
    for s in run.cached:
        print(f"{s}: cached")
    if run.result is not None:
        for r in run.result.reports:
            print(f"{r.target}: video AUC {r.video_auc.point:.4f}  video ACC {r.video_acc.point:.4f}  "
                  f"({r.n_videos} videos)")
    return run


def cmd_volumes(args):
    if args.src is None:
        _stages(args, ["volumes"])
        return
    from .store import derive_store

    cfg = load_config(args)
    out = derive_store(args.src, _require_out(args), cfg.mode)
    print(f"wrote {cfg.mode} volumes to {out}")


def cmd_train(args):
    if args.volumes is None:
        _stages(args, ["train"])
        return
    from .pipeline import train_from_store

    cfg = load_config(args)
    out = _require_out(args)
    write_lock(cfg, out)
    print(f"wrote {train_from_store(cfg, args.volumes, out)}")


def cmd_pipeline(args):
    _stages(args, args.stages or list(STAGES))


def cmd_eval(args):
    if args.ckpt is None:
        _stages(args, ["eval"])
        return
    from .evaluator import run_protocol

    cfg = load_config(args)
    if not args.volumes:
        raise SystemExit("error: --ckpt needs --volumes")
    out = _require_out(args)
    write_lock(cfg, out)
    res = run_protocol(args.ckpt, args.volumes, cfg.protocol, cfg.eval, out, config=cfg.experiment())
    for r in res.reports:
        print(f"{r.target}: video AUC {r.video_auc.point:.4f}")


def cmd_ablate(args):
    from .evaluator import run_ablation

    cfg = load_config(args)
    grid = json.loads(Path(args.grid).read_text()) if args.grid else {"c_sl": args.c_sl_grid, "mode": args.mode_grid}
    grid = {k: v for k, v in grid.items() if v}
    out = _require_out(args)
    write_lock(cfg, out)
    cells = run_ablation(grid, cfg, args.manifest or cfg.paths.manifest, out)
    print((out / "ablation.md").read_text())
    failed = [c.name for c in cells if c.error]
    if failed:
        raise VodError(f"ablation cells failed: {', '.join(failed)}")


def cmd_robust(args):
    from .evaluator import robustness_sweep
    from .report import render_robustness_curves

    cfg = load_config(args)
    run_dir = _require_out(args)
    train = read_marker(run_dir, "train")
    extract = read_marker(run_dir, "extract")
    if train is None:
        raise MissingStageInput("checkpoint")
    if extract is None:
        raise MissingStageInput("segments")
    kinds = [k for item in args.kinds for k in item.split(",") if k] if args.kinds else list(cfg.robust.kinds)
    curves = robustness_sweep(train["outputs"]["checkpoint_path"], extract["outputs"]["segments_dir"], kinds,
                              cfg.robust.severities, cfg.mode, cfg.eval, cfg.seed, run_dir / "robust")
    fig = render_robustness_curves(curves, run_dir / "robust", config=cfg.experiment())
    print(f"wrote {fig.png} and {fig.csv}")


def cmd_viz(args):
    from .backbone import gradcam, load_checkpoint
    from .diffvol import TRANSFORMS, DifferenceVolume, Mode
    from .report import render_gradcam_overlay, render_robustness_curves, render_slice_panel
    from .store import Store

    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir / "viz"
    if args.what == "robust":
        path = run_dir / "robust" / "robustness.json"
        if not path.is_file():
            raise MissingStageInput("robustness.json")
        fig = render_robustness_curves(json.loads(path.read_text()), out)
        print(f"wrote {fig.png}")
        return
    extract = read_marker(run_dir, "extract")
    if extract is None:
        raise MissingStageInput("segments")
    raw_store = Store(extract["outputs"]["segments_dir"])
    entries = [e for e in raw_store.videos if e.shard and (args.video is None or e.id == args.video)]
    if not entries:
        raise MissingStageInput(f"segments for video {args.video}")
    entry = entries[0]
    raw = raw_store.load(entry)[args.segment]
    if args.what == "slice":
        S = raw.data.shape[1]
        diff = DifferenceVolume(TRANSFORMS[Mode.CFD](raw.data), Mode.CFD, raw.spec, raw.label)
        x = S // 2 if args.x is None else args.x
        y = S // 2 if args.y is None else args.y
        p = render_slice_panel(raw, diff, x, y, out / f"slice_{entry.id}_{args.segment}.png")
        print(f"wrote {p}")
        return
    train = read_marker(run_dir, "train")
    volumes = read_marker(run_dir, "volumes")
    if train is None:
        raise MissingStageInput("checkpoint")
    if volumes is None:
        raise MissingStageInput("volumes")
    vstore = Store(volumes["outputs"]["volumes_dir"])
    vol = vstore.load(next(v for v in vstore.videos if v.id == entry.id))[args.segment]
    net, _ = load_checkpoint(train["outputs"]["checkpoint_path"])
    heat = gradcam(net, vol.data, args.target, layer=args.layer)
    paths = render_gradcam_overlay(vol, heat, args.alpha, out / f"gradcam_{entry.id}_{args.segment}")
    print(f"wrote {len(paths)} frames to {paths[0].parent}")


# parser ---------------------------------------------------------------------


def _global(p):
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--lock", type=Path, help="re-run from a config.lock.json")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", type=Path, help="run or output directory")
    p.add_argument("--jobs", type=int, help="worker processes for extraction")


def _overrides(p):
    p.add_argument("--manifest", type=Path)
    p.add_argument("--mode", choices=["cfd", "ssff", "raw"])
    p.add_argument("--protocol", choices=["intra", "cross-manip", "cross-dataset"])
    p.add_argument("--detector")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--toy-scale", type=float)
    p.add_argument("--c-sl", type=int)
    p.add_argument("--c-step", type=int)
    p.add_argument("--c-in", type=int)
    p.add_argument("--out-size", "--size", dest="out_size", type=int)
    p.add_argument("--frame-cap", type=int)
    p.add_argument("--max-segments", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--allow-train-eval", action="store_true", default=None)
    p.add_argument("--split")
    p.add_argument("--n-boot", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any dotted config key, value as JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vod", description="Frame-difference volume deepfake detector.")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic flicker corpus")
    _global(p)
    p.add_argument("--n-real", type=int, default=40)
    p.add_argument("--n-fake", type=int, default=40)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--flicker", type=float, default=12.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("extract", help="crop face segments for every manifest video (run stage in --out)")
    _global(p)
    _overrides(p)
    p.set_defaults(fn=lambda a: _stages(a, ["extract"]))

    p = sub.add_parser("volumes", help="difference volumes: run stage in --out, or --in RAW store to --out")
    _global(p)
    _overrides(p)
    p.add_argument("--in", dest="src", type=Path, help="RAW segment store to derive from")
    p.set_defaults(fn=cmd_volumes)

    p = sub.add_parser("train", help="train: run stage in --out, or --volumes DIR into --out")
    _global(p)
    _overrides(p)
    p.add_argument("--volumes", type=Path, help="volume store to train on")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate the run's checkpoint, or --ckpt on --volumes")
    _global(p)
    _overrides(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--volumes", type=Path, nargs="+")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run several stages end to end")
    _global(p)
    _overrides(p)
    p.add_argument("--stages", nargs="+", choices=STAGES)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("ablate", help="train and evaluate one run per grid cell")
    _global(p)
    _overrides(p)
    p.add_argument("--grid", type=Path, help='JSON such as {"c_sl": [9, 17], "mode": ["cfd", "raw"]}')
    p.add_argument("--c-sl-grid", type=int, nargs="+")
    p.add_argument("--mode-grid", nargs="+", choices=["cfd", "ssff", "raw"])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("robust", help="AUC under blur, noise and JPEG at each severity")
    _global(p)
    _overrides(p)
    p.add_argument("--kinds", nargs="+")
    p.set_defaults(fn=cmd_robust)

    p = sub.add_parser("viz", help="render figures for a run")
    _global(p)
    p.add_argument("what", choices=["slice", "gradcam", "robust"])
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--video")
    p.add_argument("--segment", type=int, default=0)
    p.add_argument("--x", type=int)
    p.add_argument("--y", type=int)
    p.add_argument("--target", type=int, default=1)
    p.add_argument("--layer", default="stage4")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(fn=cmd_viz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except VodError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
