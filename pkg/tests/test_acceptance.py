"""Acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
numbers (visible without ``-s``) and then asserts at the stated tolerance.
The desk-scale training runs dominate the runtime (roughly half an hour on
one core).
"""
import hashlib
import math
import time

import numpy as np
import pytest
import torch

from conftest import central_diff, rel_err
from modsiren import set_threads
from modsiren.adaptation import encode_dataset, fit_latents_batch
from modsiren.downstream import evaluate, knn_predict
from modsiren.field_model import (
    Latent, ModelConfig, SharedParams, build_omega_schedule, forward, init_shared,
)
from modsiren.gradient_engine import (
    ContextSet, grad_latent, meta_gradient, meta_loss_and_gradient, mse_loss,
    omega_lr_equivalence,
)
from modsiren.meta_trainer import TrainConfig, train
from modsiren.signal_io import (
    GridSignal, load_checkpoint, load_latents, load_signals, psnr, save_checkpoint,
    save_latents, save_signals, ssim, synth_1d, synth_2d, to_context,
)

# Desk-scale 2-D task shared by the trend and classification checks.
SIDE = 32
N_TRAIN_2D = 200
N_TEST_2D = 60
ITERS_2D = 400
B_2D = 4
BETA_2D = 1e-4
P_2D = 64


@pytest.fixture
def report(capsys):
    def _report(number, ok, text):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {text}", flush=True)
        return ok

    return _report


def held_out_psnr(shared, signals, H=20, alpha=1e-2):
    _, losses = fit_latents_batch(shared, [to_context(s) for s in signals], H, alpha)
    return float(np.mean([psnr(l) for l in losses]))


# --- criterion 1 ----------------------------------------------------------------

def test_c1_omega_lr_equivalence(report):
    rows, worst, slowest = [], 0.0, 0.0
    for om, on in [(20, 200), (30, 60), (10, 400)]:
        t0 = time.perf_counter()
        rep = omega_lr_equivalence(om, on, 1e-2, 100)
        slowest = max(slowest, time.perf_counter() - t0)
        assert rep["tau_n"] == pytest.approx(1e-2 * (om / on) ** 2, rel=1e-15)
        worst = max(worst, rep["max_rel_deviation"])
        rows.append(f"({om},{on}) {rep['max_rel_deviation']:.1e}")
    ok = worst <= 1e-9 and slowest < 1.0
    report(1, ok, f"max rel deviation {worst:.2e} <= 1e-9, slowest {slowest:.3f}s < 1s; "
           + ", ".join(rows))
    assert ok


# --- criterion 2 ----------------------------------------------------------------

def _objective(config, flat, contexts, G, alpha):
    shared = SharedParams.from_flat(config, flat)
    total = 0.0
    for c in contexts:
        phi = np.zeros(config.P)
        for _ in range(G):
            phi = phi - alpha * grad_latent(shared, Latent(phi), c)
        total += mse_loss(shared, Latent(phi), c)
    return total / len(contexts)


def test_c2_gradient_exactness(report):
    t0 = time.perf_counter()
    worst_phi = worst_meta = 0.0
    fo_failures = 0
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        w1 = rng.uniform(5, 30)
        cfg = ModelConfig(K=3, L=4, P=2, omega_first=w1, omega_last=w1 * rng.uniform(1, 3))
        shared = init_shared(cfg, seed=i)
        contexts = [ContextSet(rng.uniform(-1, 1, (5, 1)), rng.uniform(0, 1, (5, 1)))
                    for _ in range(2)]
        alpha = rng.uniform(0.05, 0.5)
        phi = rng.normal(size=2)
        g = grad_latent(shared, Latent(phi), contexts[0])
        fd = central_diff(lambda p: mse_loss(shared, Latent(p), contexts[0]), phi)
        worst_phi = max(worst_phi, rel_err(g, fd).max())
        fd = central_diff(lambda v: _objective(cfg, v, contexts, 2, alpha), shared.flat())
        exact = meta_gradient(shared, contexts, 2, alpha)
        worst_meta = max(worst_meta, rel_err(exact, fd).max())
        first = meta_gradient(shared, contexts, 2, alpha, first_order=True)
        fo_failures += bool(rel_err(first, fd).max() >= 1e-4)
    secs = time.perf_counter() - t0
    ok = worst_phi < 1e-4 and worst_meta < 1e-4 and fo_failures >= 1 and secs < 30
    report(2, ok, f"grad_latent max rel err {worst_phi:.1e}, meta_gradient {worst_meta:.1e} "
           f"(< 1e-4); first-order fails on {fo_failures}/20 instances; {secs:.1f}s < 30s")
    assert ok


# --- criterion 3 ----------------------------------------------------------------

def test_c3_zero_latent_and_schedule(report):
    shared = init_shared(ModelConfig(K=8, L=64, P=64, C=2), 0)
    x = np.random.default_rng(0).uniform(-1, 1, size=(1000, 2))
    modulated = forward(shared, Latent.zeros(64), x)
    base = forward(shared, None, x)
    max_ulp = int(np.max(np.abs(modulated.view(np.int64) - base.view(np.int64))))
    s = np.array(build_omega_schedule(20, 400, 15).values)
    d = np.diff(s)
    spacing_ok = bool(np.all(np.abs(d - d[0]) <= np.spacing(s[1:])))
    ok = max_ulp == 0 and s[0] == 20.0 and s[-1] == 400.0 and len(s) == 14 and spacing_ok
    report(3, ok, f"zero-latent deviation {max_ulp} ulp on 1000 points; schedule endpoints "
           f"({s[0]}, {s[-1]}), constant spacing {spacing_ok}")
    assert ok


# --- criterion 4 ----------------------------------------------------------------

def test_c4_desk_scale_1d(report):
    train_set = [to_context(s) for s in synth_1d(200, 64, 0)]
    test_signals = synth_1d(50, 64, 123)
    mc = ModelConfig(K=8, L=64, P=64, omega_first=20, omega_last=200)
    tc = TrainConfig(B=8, total_iters=10_000, G=10, alpha=1e-2, beta=3e-6, gamma=1.0,
                     eval_every=1000, H=20, dtype="float32")
    t0 = time.perf_counter()
    ckpt, _ = train(train_set, mc, tc)
    secs = time.perf_counter() - t0
    shared = ckpt.best_shared
    score = held_out_psnr(shared, test_signals)
    baseline = float(np.mean([psnr(mse_loss(shared, None, to_context(s))) for s in test_signals]))
    ok = score >= 30.0 and score - baseline >= 8.0 and secs <= 900
    report(4, ok, f"held-out PSNR {score:.2f} dB (need >= 30), phi=0 baseline {baseline:.2f} dB "
           f"(margin {score - baseline:.2f}, need >= 8), training {secs:.0f}s (<= 900s)")
    assert ok


# --- shared 2-D runs ------------------------------------------------------------

_CACHE = {}


def desk_2d(omega_first, omega_last, seed=0, gamma=0.25, n_classes=2):
    key = (omega_first, omega_last, seed, gamma, n_classes)
    if key not in _CACHE:
        signals, _ = synth_2d(N_TRAIN_2D, SIDE, n_classes, 0)
        mc = ModelConfig(K=8, L=64, P=P_2D, C=2, omega_first=omega_first, omega_last=omega_last)
        tc = TrainConfig(B=B_2D, total_iters=ITERS_2D, G=10, alpha=1e-2, beta=BETA_2D,
                         gamma=gamma, seed=seed, eval_every=ITERS_2D // 4, H=20,
                         dtype="float32")
        ckpt, _ = train([to_context(s) for s in signals], mc, tc)
        test, _ = synth_2d(N_TEST_2D, SIDE, n_classes, 1)
        _CACHE[key] = (ckpt, held_out_psnr(ckpt.best_shared, test))
    return _CACHE[key]


# --- criterion 5 ----------------------------------------------------------------

def test_c5_schedule_benefit(report):
    sched = [desk_2d(20.0, 200.0, seed)[1] for seed in range(3)]
    const = [desk_2d(30.0, 30.0, seed)[1] for seed in range(3)]
    margin = float(np.mean(sched) - np.mean(const))
    ok = margin >= 0.0
    report(5, ok, f"scheduled 20->200 {np.mean(sched):.2f} dB vs constant 30 "
           f"{np.mean(const):.2f} dB, margin {margin:+.2f} dB (need >= 0, expect >= 0.5); "
           f"per seed {['%.2f' % v for v in sched]} vs {['%.2f' % v for v in const]}")
    assert ok


# --- criterion 6 ----------------------------------------------------------------

def test_c6_context_reduction(report):
    scores = {g: desk_2d(20.0, 200.0, 0, gamma=g)[1] for g in (0.1, 0.25, 1.0)}
    M = SIDE * SIDE
    counts_ok = True
    shared = init_shared(ModelConfig(K=8, L=64, P=P_2D, C=2), 0)
    signals, _ = synth_2d(2, SIDE, 2, 0)
    contexts = [to_context(s) for s in signals]
    for g in (0.1, 0.25, 1.0):
        record = []
        meta_loss_and_gradient(shared, contexts, 3, 1e-2, g, np.random.default_rng(0),
                               record=record)
        expected = [("inner", math.ceil(g * M))] * 3 + [("outer", M)]
        counts_ok &= record == expected
    trend_ok = scores[1.0] >= scores[0.25] - 0.3 and scores[0.25] >= scores[0.1] - 0.3
    ok = trend_ok and counts_ok
    report(6, ok, "PSNR gamma=0.1/0.25/1.0: " + " / ".join(f"{scores[g]:.2f}" for g in
           (0.1, 0.25, 1.0)) + f" dB (non-decreasing within 0.3 dB: {trend_ok}); "
           f"inner counts = ceil(gamma*{M}), outer = {M}: {counts_ok}")
    assert ok


# --- criterion 7 ----------------------------------------------------------------

def test_c7_latent_classification(report):
    ckpt, _ = desk_2d(20.0, 200.0, 0)
    shared = ckpt.best_shared
    train_sig, train_lab = synth_2d(N_TRAIN_2D, SIDE, 2, 0)
    test_sig, test_lab = synth_2d(N_TEST_2D, SIDE, 2, 1)
    tr = encode_dataset(shared, [to_context(s) for s in train_sig], 20, 1e-2, train_lab)
    te = encode_dataset(shared, [to_context(s) for s in test_sig], 20, 1e-2, test_lab)
    latent_acc = evaluate(knn_predict(tr.latents, tr.labels, te.latents, 1), test_lab).accuracy
    raw_tr = np.stack([s.values[:, 0] for s in train_sig])
    raw_te = np.stack([s.values[:, 0] for s in test_sig])
    raw_acc = evaluate(knn_predict(raw_tr, train_lab, raw_te, 1), test_lab).accuracy
    ok = latent_acc >= 0.90 and latent_acc >= raw_acc - 0.05
    report(7, ok, f"latent 1-NN accuracy {latent_acc:.1%} (need >= 90% and >= raw-pixel "
           f"1-NN {raw_acc:.1%} - 5 points)")
    assert ok


# --- criterion 8 ----------------------------------------------------------------

def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _pipeline(tmp, threads):
    # both the package's worker pool and torch's own pool get the thread count
    set_threads(threads)
    torch.set_num_threads(threads)
    try:
        signals = synth_2d(24, 16, 2, 5)[0]
        save_signals(tmp / "s.mfsg", signals)
        contexts = [to_context(s) for s in load_signals(tmp / "s.mfsg")[0]]
        mc = ModelConfig(K=4, L=32, P=16, C=2)
        tc = TrainConfig(B=10, total_iters=12, gamma=0.25, beta=1e-4, eval_every=6,
                         val_fraction=0.1)
        ckpt, log = train(contexts, mc, tc)
        save_checkpoint(tmp / "c.mfck", ckpt)
        ds = encode_dataset(ckpt.best_shared, contexts, 5, 1e-2)
        save_latents(tmp / "l.mfld", ds)
        return ckpt, [{k: v for k, v in r.items() if k != "secs"} for r in log], ds
    finally:
        set_threads(1)
        torch.set_num_threads(1)


def test_c8_determinism_and_persistence(report, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ca, la, da = _pipeline(tmp_path / "a", 1)
    cb, lb, db = _pipeline(tmp_path / "b", 4)
    same_logs = la == lb
    same_latents = da.latents.tobytes() == db.latents.tobytes()
    same_files = all(_sha(tmp_path / "a" / f) == _sha(tmp_path / "b" / f)
                     for f in ("s.mfsg", "c.mfck", "l.mfld"))
    back = load_checkpoint(tmp_path / "a" / "c.mfck")
    round_trip = (back.shared.flat().tobytes() == ca.shared.flat().tobytes()
                  and back.optimizer.v.tobytes() == ca.optimizer.v.tobytes()
                  and load_latents(tmp_path / "a" / "l.mfld").latents.tobytes()
                  == da.latents.tobytes())
    contexts = [to_context(s) for s in synth_2d(24, 16, 2, 5)[0]]
    mc = ModelConfig(K=4, L=32, P=16, C=2)
    tc = TrainConfig(B=10, total_iters=12, gamma=0.25, beta=1e-4, eval_every=6, val_fraction=0.1)
    half, _ = train(contexts, mc, tc, stop_at=7)
    save_checkpoint(tmp_path / "half.mfck", half)
    resumed, _ = train(contexts, mc, tc, resume=load_checkpoint(tmp_path / "half.mfck"))
    resume_ok = resumed.shared.flat().tobytes() == ca.shared.flat().tobytes()
    ok = same_logs and same_latents and same_files and round_trip and resume_ok
    report(8, ok, f"logs equal across 1/4 threads {same_logs}, latents {same_latents}, "
           f"file hashes {same_files}, container round trip {round_trip}, resume {resume_ok}")
    assert ok


# --- criterion 9 ----------------------------------------------------------------

def test_c9_metric_correctness(report):
    checks = {}
    checks["psnr 1e-4 -> 40"] = psnr(1e-4) == pytest.approx(40.0, abs=1e-12)
    checks["psnr 0 -> inf"] = psnr(0.0) == math.inf
    checks["psnr 1 -> 0"] = psnr(1.0) == 0.0
    cfg = ModelConfig(K=3, L=2, P=1)
    zero = SharedParams.from_flat(cfg, np.zeros(init_shared(cfg, 0).flat().size))
    checks["mse hand"] = mse_loss(zero, None, ContextSet(np.array([[0.0], [0.5]]),
                                                         np.array([[1.0], [1.0]]))) == 1.0
    rng = np.random.default_rng(0)
    a = GridSignal((32, 32), rng.uniform(size=1024))
    b = GridSignal((32, 32), rng.uniform(size=1024))
    checks["ssim(a,a)=1"] = abs(ssim(a, a) - 1.0) <= 1e-12
    checks["ssim symmetric"] = ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    c0, c1 = GridSignal((16, 16), np.zeros(256)), GridSignal((16, 16), np.ones(256))
    checks["ssim constants < 0.01"] = ssim(c0, c1) < 0.01
    fixtures = [
        ([0, 1, 2, 2, 1, 0, 2, 2], [0, 1, 1, 2, 2, 0, 1, 2], 5 / 8, [1.0, 0.4, 4 / 7]),
        ([0, 0, 0, 0], [0, 1, 2, 0], 0.5, [2 / 3, 0.0, 0.0]),
        ([1, 2, 0, 1, 2, 0], [1, 2, 0, 2, 1, 0], 4 / 6, [1.0, 0.5, 0.5]),
    ]
    for i, (pred, true, acc, f1) in enumerate(fixtures):
        r = evaluate(pred, true, 3)
        checks[f"confusion fixture {i}"] = (r.accuracy == pytest.approx(acc)
                                            and np.allclose(r.per_class_f1, f1)
                                            and r.macro_f1 == pytest.approx(np.mean(f1)))
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    report(9, ok, f"{len(checks) - len(failed)}/{len(checks)} metric checks"
           + (f"; failed: {failed}" if failed else ""))
    assert ok
