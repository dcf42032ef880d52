"""Acceptance gate: one PASS/FAIL line per criterion, listed in the terminal summary."""
import itertools
import json
import math
import time

import numpy as np
import pytest

from e3d.cli import main as cli_main
from e3d.data import SynthConfig, load_manifest, make_windows, synth_sequence, synth_windows, write_gray, write_synth_dataset
from e3d.density import KernelPolicy, adaptive_sigmas, density_map, render_density
from e3d.gradcheck import run_checks
from e3d.metrics import CountRecord, game, game_frame, mae, mse
from e3d.model import NetConfig, TcaBlockParams, build_network, channel_gate, network_forward, predict, tca_forward
from e3d.ops import ConvParams
from e3d.train import TrainConfig, evaluate, masked_mse_loss, train

from .test_density import brute_sigmas


def _zero_block(c, dtype=np.float32):
    def cp(co, ci, k, pad):
        return ConvParams(np.zeros((co, ci, k, k, k), dtype), np.zeros(co, dtype), 1, pad)

    return TcaBlockParams(cp(c, c, 3, 1), cp(c, c, 3, 1), cp(c // 4, c, 1, 0), cp(c, c // 4, 1, 0))


def test_gradient_suite(acceptance_line):
    t0 = time.perf_counter()
    reports = run_checks()
    secs = time.perf_counter() - t0
    for r in reports:
        print(r)
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = all(r.passed and r.max_rel_error < 1e-4 for r in reports) and secs < 120
    acceptance_line("1 gradient suite", ok,
                    f"{len(reports)} checks, worst {worst.name} {worst.max_rel_error:.2e}, {secs:.1f}s")
    assert ok


def test_residual_identity(acceptance_line):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 16, 4, 8, 8)).astype(np.float32)
    identity = np.array_equal(tca_forward(x, _zero_block(16)).value, x)
    blk = build_network(NetConfig(block_count=4)).blocks[1]
    blk.gate_expand.weight[...] = 0
    u = channel_gate(rng.normal(size=(2, 16, 4, 8, 8)).astype(np.float32), blk).value
    half = bool(np.all(u == 0.5))
    ok = identity and half
    acceptance_line("2 residual identity", ok, f"identity bit-exact={identity}, gate==0.5={half}")
    assert ok


def test_shape_law(acceptance_line):
    t0 = time.perf_counter()
    net = build_network(NetConfig())
    bad = []
    for t, h, w in itertools.product((4, 8, 12, 16), (32, 64), (32, 64)):
        out = predict(np.zeros((1, 1, t, h, w), np.float32), net)
        if out.shape != (1, 1, t, h // 16, w // 16):
            bad.append(((t, h, w), out.shape))
    e2d = build_network(NetConfig(variant="E2D", clip_length=1))
    for h, w in itertools.product((32, 64), (32, 64)):
        out = predict(np.zeros((1, 1, 1, h, w), np.float32), e2d)
        if out.shape != (1, 1, 1, h // 16, w // 16):
            bad.append((("E2D", h, w), out.shape))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 60
    acceptance_line("3 shape law", ok, f"20 shapes, mismatches={bad}, {secs:.1f}s")
    assert ok


def test_density_conservation(acceptance_line):
    h, w = 96, 128
    worst, sigma_mismatch = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201))
        pts = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
        # pin a few heads onto the border
        border = [(0.0, 0.0), (w - 1e-9, h - 1e-9), (0.3, h / 2), (w / 2, h - 0.2)]
        for i, p in enumerate(border[: min(4, n)]):
            pts[i] = p
        policy = [KernelPolicy("fixed", sigma=3.0), KernelPolicy("fixed", sigma=4.0),
                  KernelPolicy("adaptive", k=3, beta=0.3)][seed % 3]
        m = density_map(pts, policy, h, w)
        worst = max(worst, abs(m.sum() - n) / n)
        if policy.kind == "adaptive" and n >= 2:
            if adaptive_sigmas(pts, 3, 0.3).tolist() != brute_sigmas(pts.tolist(), 3, 0.3):
                sigma_mismatch += 1
        assert np.all(m >= 0)
    ok = worst <= 1e-6 and sigma_mismatch == 0
    acceptance_line("4 density conservation", ok,
                    f"max |sum-N|/N={worst:.1e}, adaptive sigma mismatches={sigma_mismatch}")
    assert ok


def test_metric_identities(acceptance_line):
    rng = np.random.default_rng(5)
    fails = []
    for k in range(20):
        preds = [rng.random((16, 16)) * rng.integers(1, 5) for _ in range(4)]
        gts = [rng.random((16, 16)) * rng.integers(1, 5) for _ in range(4)]
        recs = [CountRecord(i, g.sum(), p.sum()) for i, (p, g) in enumerate(zip(preds, gts))]
        if not math.isclose(game(preds, gts, 0), mae(recs), rel_tol=1e-12):
            fails.append(f"game0 fixture {k}")
        for p, g in zip(preds, gts):
            s = [game_frame(p, g, L) for L in range(5)]
            if any(b < a - 1e-12 for a, b in zip(s, s[1:])):
                fails.append(f"monotone fixture {k}")
    for k in range(100):
        n = int(rng.integers(1, 50))
        recs = [CountRecord(i, float(t), float(e)) for i, (t, e) in
                enumerate(zip(rng.uniform(0, 100, n), rng.uniform(0, 100, n)))]
        if mae(recs) > mse(recs) * (1 + 1e-12):
            fails.append(f"mae<=mse set {k}")
    gt, pred = np.zeros((8, 8)), np.zeros((8, 8))
    gt[1, 1], pred[6, 6] = 5.0, 5.0
    if game_frame(pred, gt, 0) != 0.0 or game_frame(pred, gt, 1) != 10.0:
        fails.append("quadrant")
    if not math.isclose(game([pred], [gt], 0), mae([CountRecord(0, 5.0, 5.0)]), abs_tol=0):
        fails.append("quadrant game0 vs mae")
    ok = not fails
    acceptance_line("5 metric identities", ok, "all hold" if ok else ", ".join(fails[:5]))
    assert ok


def test_roi_correctness(acceptance_line, tmp_path):
    cfg = SynthConfig(seed=8, num_frames=6, height=64, width=64)
    mpath = write_synth_dataset(cfg, tmp_path / "data")
    roi = np.zeros((64, 64))
    roi[:, :40] = 1
    roi[40:, :] = 1
    write_gray(tmp_path / "data" / "roi.pgm", roi)
    d = json.loads(mpath.read_text())
    d["roi"] = "roi.pgm"
    mpath.write_text(json.dumps(d))

    net_cfg = NetConfig(stem_channels=8, block_count=4, clip_length=4)
    net = build_network(net_cfg, seed=1, dtype=np.float64)
    wins = make_windows(load_manifest(mpath), 4, mode="eval")
    small = wins[0].roi_small
    fwd = network_forward(wins[0].input, net)
    noise = np.random.default_rng(0).normal(scale=50, size=fwd.value.shape)
    altered = np.where(small, fwd.value, fwd.value + noise)
    _, g1 = masked_mse_loss(fwd.value, wins[0].targets, small)
    _, g2 = masked_mse_loss(altered, wins[0].targets, small)
    a, b = fwd.backward(g1), fwd.backward(g2)
    grads_same = all(np.array_equal(a[k], b[k]) for k in a)

    _, maps = evaluate(net, wins)
    api_zero = bool(np.all(maps[:, ~small] == 0)) and bool(np.any(maps[:, small] != 0))
    res = train(wins, net_cfg, TrainConfig(steps=1), tmp_path / "run")
    rc = cli_main(["eval", "--ckpt", str(res.checkpoints[-1]), "--manifest", str(mpath),
                   "--report", str(tmp_path / "r.json"), "--maps-dir", str(tmp_path / "maps")])
    from e3d.tensor import load_dmap

    cli_maps = [load_dmap(p)[0, 0, 0] for p in sorted((tmp_path / "maps").glob("pred_*.dmap"))]
    cli_zero = rc == 0 and len(cli_maps) == 6 and all(np.all(m[~small] == 0) for m in cli_maps)
    ok = grads_same and api_zero and cli_zero and not small.all()
    acceptance_line("6 ROI correctness", ok,
                    f"grads invariant={grads_same}, eval maps zero outside ROI api={api_zero} cli={cli_zero}")
    assert ok


@pytest.fixture(scope="module")
def overfit_run():
    cfg = SynthConfig(seed=0, num_frames=16, height=64, width=64)
    wins = synth_windows(cfg, 16)
    t0 = time.perf_counter()
    res = train(wins, NetConfig(stem_channels=16, block_count=8), TrainConfig(steps=500))
    secs = time.perf_counter() - t0
    _, pts = synth_sequence(cfg)
    counts = predict(wins[0].input, res.net)[0, 0].sum(axis=(1, 2)).astype(np.float64)
    return res, secs, counts, len(pts[0])


def test_tiny_overfit(acceptance_line, overfit_run):
    res, secs, counts, n_true = overfit_run
    losses = np.array(res.losses)
    ratio = losses[-1] / losses[0]
    count_err = float(np.max(np.abs(counts - n_true)) / n_true)
    ok = ratio <= 0.10 and count_err <= 0.10 and secs < 600
    acceptance_line("7 tiny overfit", ok,
                    f"loss {losses[0]:.3g}->{losses[-1]:.3g} (ratio {ratio:.1e}), "
                    f"worst frame count err {count_err:.1%} vs {n_true} heads, {secs:.0f}s")
    assert ok


def test_tiny_overfit_moving_average(acceptance_line, overfit_run):
    losses = np.array(overfit_run[0].losses)
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    below = np.flatnonzero(ma <= 0.1 * losses[0])
    stop = int(below[0]) if len(below) else len(ma) - 1
    ok = len(below) > 0 and bool(np.all(np.diff(ma[: stop + 1]) < 0))
    acceptance_line("7b overfit moving average", ok, f"10-step average strictly falls until step {stop + 10}")
    assert ok


def test_ablation_grid(acceptance_line):
    cfg = SynthConfig(seed=2, num_frames=16, height=32, width=32)
    failures, runs = [], 0
    t0 = time.perf_counter()
    for gc, t, blocks in itertools.product((True, False), (4, 8, 12, 16), (4, 6, 8, 10)):
        try:
            net_cfg = NetConfig(block_count=blocks, global_context=gc, clip_length=t)
            res = train(synth_windows(cfg, t), net_cfg, TrainConfig(steps=1))
            rep, _ = evaluate(res.net, synth_windows(cfg, t, mode="eval"))
            assert rep["n_frames"] == 16 and np.isfinite(rep["mae"])
            runs += 1
        except Exception as e:  # noqa: BLE001 - report every failing cell
            failures.append(f"gc={gc},T={t},blocks={blocks}: {e}")
    ok = not failures and runs == 32
    acceptance_line("8 ablation grid", ok, f"{runs}/32 configs built, trained, evaluated in "
                    f"{time.perf_counter() - t0:.0f}s" + (f"; {failures[:3]}" if failures else ""))
    assert ok


def test_reproducibility(acceptance_line, tmp_path):
    cli_main(["synth", "--out", str(tmp_path / "data")])
    (tmp_path / "net.json").write_text(json.dumps({"block_count": 8, "clip_length": 4}))
    (tmp_path / "train.json").write_text(json.dumps({"steps": 12, "seed": 42, "window_stride": 2}))
    outs = []
    for run in ("a", "b"):
        rc = cli_main(["train", "--manifest", str(tmp_path / "data" / "manifest.json"),
                       "--net", str(tmp_path / "net.json"), "--train", str(tmp_path / "train.json"),
                       "--out", str(tmp_path / run)])
        assert rc == 0
        outs.append(((tmp_path / run / "final.ckpt").read_bytes(), (tmp_path / run / "losses.json").read_bytes()))
    same_ckpt = outs[0][0] == outs[1][0]
    same_loss = outs[0][1] == outs[1][1]
    ok = same_ckpt and same_loss
    acceptance_line("9 reproducibility", ok, f"checkpoint bytes equal={same_ckpt}, loss curve equal={same_loss}")
    assert ok
