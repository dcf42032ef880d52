"""Short training runs over the ablation axes, reporting held-out MAE per config.

Axes: global context on/off, clip length T, and block count. Each config is
trained on one synthetic sequence and evaluated on another. At the default
step count this is a plumbing and trend check, not a benchmark.
"""
import argparse
import itertools
import json
import time

from e3d.data import SynthConfig, synth_windows
from e3d.model import NetConfig
from e3d.train import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--size", type=int, default=64, help="frame height and width")
    ap.add_argument("--clips", default="4,8,12,16")
    ap.add_argument("--blocks", default="4,6,8,10")
    ap.add_argument("--out", help="write results as JSON lines")
    args = ap.parse_args()

    train_cfg = SynthConfig(seed=0, num_frames=32, height=args.size, width=args.size)
    test_cfg = SynthConfig(seed=1, num_frames=32, height=args.size, width=args.size)
    rows = []
    for gc, t, nb in itertools.product((True, False), map(int, args.clips.split(",")),
                                        map(int, args.blocks.split(","))):
        t0 = time.perf_counter()
        net_cfg = NetConfig(block_count=nb, global_context=gc, clip_length=t)
        res = train(synth_windows(train_cfg, t, stride=max(1, t // 2)), net_cfg,
                    TrainConfig(lr=args.lr, steps=args.steps))
        rep, _ = evaluate(res.net, synth_windows(test_cfg, t, mode="eval"))
        row = {"global_context": gc, "T": t, "blocks": nb, "mae": rep["mae"], "mse": rep["mse"],
               "final_loss": res.losses[-1], "seconds": round(time.perf_counter() - t0, 1)}
        rows.append(row)
        print(json.dumps(row), flush=True)
    if args.out:
        with open(args.out, "w") as f:
            f.writelines(json.dumps(r) + "\n" for r in rows)


if __name__ == "__main__":
    main()
