"""Command-line entry point: synth, gt, train, eval, gradcheck, render."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import gradcheck
from .data import FrameStore, SynthConfig, load_manifest, make_windows, write_synth_dataset
from .model import NetConfig
from .tensor import load_dmap, save_dmap
from .train import TrainConfig, evaluate, load_checkpoint, train
from .viz import render_map, render_montage

log = logging.getLogger("e3d")


class CliError(RuntimeError):
    pass


def _read_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise CliError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path}: {e.msg} at line {e.lineno}") from e


def cmd_synth(args) -> None:
    cfg = SynthConfig.from_dict(_read_json(args.config))
    path = write_synth_dataset(cfg, args.out)
    print(json.dumps({"manifest": str(path), "frames": cfg.num_frames}))


def cmd_gt(args) -> None:
    m = load_manifest(args.manifest)
    store = FrameStore(m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(m)):
        save_dmap(out / f"density_{i:05d}.dmap", store.density(i)[None, None, None])
        save_dmap(out / f"target_{i:05d}.dmap", store.target(i)[None, None, None])
    print(json.dumps({"frames": len(m), "out": str(out)}))


def cmd_train(args) -> None:
    m = load_manifest(args.manifest)
    net_cfg = NetConfig.from_dict(_read_json(args.net))
    train_cfg = TrainConfig.from_dict(_read_json(args.train))
    windows = make_windows(m, net_cfg.clip_length, train_cfg.window_stride, mode="train")

    def on_step(step, loss):
        if step == 1 or step % args.log_every == 0 or step == train_cfg.steps:
            log.info("step %d loss %.6g", step, loss)

    res = train(windows, net_cfg, train_cfg, args.out, on_step=on_step)
    print(json.dumps({"checkpoint": str(res.checkpoints[-1]), "final_loss": res.losses[-1],
                      "initial_loss": res.losses[0]}))


def cmd_eval(args) -> None:
    net, header = load_checkpoint(args.ckpt)
    m = load_manifest(args.manifest)
    store = FrameStore(m)
    c_img = len(store.frame(0))
    if c_img != net.config.in_channels:
        raise CliError(f"checkpoint expects {net.config.in_channels} image channel(s), data has {c_img}")
    windows = make_windows(m, net.config.clip_length, mode="eval", store=store)
    report, preds = evaluate(net, windows)
    report["checkpoint"] = str(args.ckpt)
    report["step"] = header.get("step")
    Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    if args.maps_dir:
        d = Path(args.maps_dir)
        d.mkdir(parents=True, exist_ok=True)
        for rec, p in zip(report["frames"], preds):
            save_dmap(d / f"pred_{rec['frame']:05d}.dmap", p[None, None, None])
    print(json.dumps({"mae": report["mae"], "mse": report["mse"], "game": report["game"]}))


def cmd_gradcheck(args) -> int:
    names = None if args.all or not args.op else args.op
    failed = 0
    for rep in gradcheck.run_checks(names, seed=args.seed):
        print(rep, flush=True)
        failed += not rep.passed
    return 1 if failed else 0


def _frame(x: np.ndarray, k: int) -> np.ndarray:
    if x.ndim != 5:
        raise CliError(f"expected a 5-axis DMAP tensor, got {x.shape}")
    n, c, d = x.shape[:3]
    if not 0 <= k < n * c * d:
        raise CliError(f"frame {k} out of range for tensor {x.shape}")
    return x.reshape(-1, *x.shape[3:])[k]


def cmd_render(args) -> None:
    m = _frame(load_dmap(args.input), args.frame)
    if args.gt:
        render_montage([_frame(load_dmap(args.gt), args.frame), m], args.out, scale=args.scale)
    else:
        render_map(m, args.out, scale=args.scale)
    print(json.dumps({"out": str(args.out)}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic moving-crowd dataset")
    s.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gt", help="render density targets as DMAP files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gt)

    s = sub.add_parser("train", help="train a network on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--net", help="NetConfig JSON")
    s.add_argument("--train", help="TrainConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--log-every", type=int, default=10)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--maps-dir", help="also dump ROI-masked predicted maps here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--op", action="append", choices=sorted(gradcheck.CHECKS))
    g.add_argument("--all", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("render", help="write a DMAP map as an 8-bit heatmap")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gt", help="second DMAP shown on the left as a montage")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--scale", type=int, default=1)
    s.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}),
              file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
