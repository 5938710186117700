"""Command-line entry point: ``modsiren <command> [flags]``.

Every command writes a JSON run manifest next to its main output holding the
full flag set, seeds, package version and SHA-256 hashes of inputs/outputs.
Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import set_threads
from .errors import ConfigError, DataFormatError, ModsirenError, NumericalError, UsageError

log = logging.getLogger("modsiren")

# Published hyperparameters per signal dimensionality; the remaining
# defaults are local choices and are tagged as such in --help.
PRESETS = {
    1: dict(K=8, L=64, P=64, omega1=20.0, omegaK=200.0, B=64, gamma=1.0),
    2: dict(K=15, L=256, P=2048, omega1=20.0, omegaK=400.0, B=24, gamma=0.25),
}
COMMON = dict(G=10, alpha=1e-2, beta=3e-6, H=20)

PUB = "[published]"
OWN = "[local choice]"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, args, inputs, outputs, seeds):
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": command,
        "flags": flags,
        "seeds": seeds,
        "version": __version__,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_tuple(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_signals(path):
    from .signal_io import load_signals

    return load_signals(path)


def _load_checkpoint(path):
    from .signal_io import load_checkpoint

    return load_checkpoint(path)


# --- commands ---------------------------------------------------------------

def cmd_synth(args):
    from .signal_io import save_signals, synth_1d, synth_2d

    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.kind == "1d":
        signals, labels = synth_1d(args.count, args.size, args.seed), None
    else:
        signals, labels = synth_2d(args.count, args.size, args.classes, args.seed)
    save_signals(args.out, signals, labels)
    write_manifest(_manifest_path(args.out), "synth", args, [], [args.out], {"seed": args.seed})
    print(f"wrote {len(signals)} signals to {args.out}")


def _model_and_train_config(args, C, D):
    from .field_model import ModelConfig
    from .meta_trainer import TrainConfig

    preset = PRESETS.get(C)
    if preset is None:
        raise UsageError(f"no default configuration for {C}-D signals; pass every model flag")
    pick = lambda name: getattr(args, name) if getattr(args, name) is not None else preset[name]  # noqa: E731
    mc = ModelConfig(K=pick("K"), L=pick("L"), P=pick("P"), C=C, D=D,
                     omega_first=pick("omega1"), omega_last=pick("omegaK"))
    tc = TrainConfig(B=pick("B"), total_iters=args.iters, G=args.G, alpha=args.alpha,
                     beta=args.beta, gamma=pick("gamma"), seed=args.seed,
                     eval_every=args.eval_every, H=args.H, lr_schedule=args.lr_schedule,
                     first_order=args.first_order, dtype=args.dtype)
    return mc, tc


def _contexts(signals):
    from .signal_io import to_context

    return [to_context(s) for s in signals]


def cmd_train(args):
    from .meta_trainer import train
    from .plotting import loss_curve
    from .signal_io import save_checkpoint

    signals, _ = _load_signals(args.data)
    C, D = len(signals[0].shape), signals[0].channels
    mc, tc = _model_and_train_config(args, C, D)
    resume = _load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    records = []
    if resume is not None and log_path.exists():
        with open(log_path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        records = [r for r in records if r["iter"] < resume.iteration]
    with open(log_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

        def on_record(rec):
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        try:
            ckpt, _ = train(_contexts(signals), mc, tc, resume=resume, on_record=on_record,
                            stop_at=args.stop_at)
        except NumericalError as exc:
            if exc.checkpoint is not None:
                failed = out.with_name(out.name + ".failed")
                save_checkpoint(failed, exc.checkpoint)
                log.error("last good state written to %s", failed)
            raise
    save_checkpoint(out, ckpt)
    outputs = [out, log_path]
    if args.plot and records:
        plot = Path(args.plot)
        loss_curve(records, plot)
        outputs.append(plot)
    inputs = [args.data] + ([args.resume] if args.resume else [])
    write_manifest(_manifest_path(out), "train", args, inputs, outputs, {"seed": tc.seed})
    msg = f"trained to iteration {ckpt.iteration}; checkpoint {out}"
    if math.isfinite(ckpt.best_val_psnr):
        msg += f"; best val PSNR {ckpt.best_val_psnr:.2f} dB at {ckpt.best_iteration}"
    print(msg)


def cmd_fit(args):
    from .adaptation import encode_dataset
    from .signal_io import save_latents

    ckpt = _load_checkpoint(args.checkpoint)
    signals, labels = _load_signals(args.data)
    shared = ckpt.shared if args.use_latest else ckpt.best_shared
    ds = encode_dataset(shared, _contexts(signals), args.H, args.alpha, labels=labels)
    save_latents(args.out, ds)
    write_manifest(_manifest_path(args.out), "fit", args, [args.checkpoint, args.data],
                   [args.out], {})
    print(f"fitted {len(ds)} latents ({len(ds.failed)} failed) to {args.out}")


def cmd_reconstruct(args):
    from .adaptation import reconstruct
    from .field_model import Latent
    from .signal_io import GridSignal, load_latents, psnr, ssim, write_pgm

    ckpt = _load_checkpoint(args.checkpoint)
    ds = load_latents(args.latents)
    shared = ckpt.shared if args.use_latest else ckpt.best_shared
    if ds.checkpoint_id != shared.content_hash():
        log.warning("latents were fitted against a different checkpoint")
    signals = None
    if args.data:
        signals, _ = _load_signals(args.data)
        if len(signals) != len(ds):
            raise DataFormatError(f"{len(signals)} signals but {len(ds)} latents")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {"mse": [], "psnr": [], "ssim": []}
    outputs = []
    for i in range(len(ds)):
        if i in ds.failed:
            continue
        if args.grid:
            grid = args.grid
        elif signals is not None:
            grid = signals[i].shape
        else:
            raise UsageError("pass --grid or --data to define the output lattice")
        shape, values = reconstruct(shared, Latent(ds.latents[i]), grid)
        if len(shape) == 2 and values.shape[1] == 1:
            path = out_dir / f"recon_{i:04d}.pgm"
            write_pgm(path, values[:, 0].reshape(shape))
            outputs.append(path)
        if signals is not None and tuple(shape) == signals[i].shape:
            ref = signals[i]
            mse = float(np.mean(np.sum((values - ref.values) ** 2, axis=1)))
            metrics["mse"].append(mse)
            metrics["psnr"].append(psnr(mse))
            if all(s >= 7 for s in shape):
                metrics["ssim"].append(ssim(ref, GridSignal(shape, values.astype(np.float32))))
    summary = {k: (float(np.mean(v)) if v else None) for k, v in metrics.items()}
    report = {"per_signal": metrics, "mean": summary, "n": len(ds),
              "failed": list(ds.failed)}
    mpath = out_dir / "metrics.json"
    mpath.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    outputs.append(mpath)
    inputs = [args.checkpoint, args.latents] + ([args.data] if args.data else [])
    write_manifest(out_dir / "manifest.json", "reconstruct", args, inputs, outputs, {})
    print(json.dumps(summary, sort_keys=True))


def holdout_split(n: int, seed: int, fraction: float = 0.2):
    """(train, test) index arrays with ``ceil(fraction * n)`` held out."""
    n_test = max(1, int(math.ceil(fraction * n)))
    if n_test >= n:
        raise UsageError(f"need more than {n_test} signals for a held-out split")
    perm = np.random.default_rng([seed, 0x7E57]).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def evaluate_checkpoint(shared, signals, H, alpha):
    """Mean PSNR and SSIM of test-time fitted reconstructions (raw outputs)."""
    from .adaptation import fit_latents_batch
    from .field_model import Latent, forward
    from .signal_io import GridSignal, grid_coords, psnr, ssim

    latents, losses = fit_latents_batch(shared, _contexts(signals), H, alpha)
    ps = [psnr(l) for l in losses]
    ss = []
    for s, phi in zip(signals, latents):
        if all(d >= 7 for d in s.shape):
            vals = forward(shared, Latent(phi), grid_coords(s.shape))
            ss.append(ssim(s, GridSignal(s.shape, vals.astype(np.float32))))
    return float(np.mean(ps)), (float(np.mean(ss)) if ss else float("nan"))


def cmd_gridsearch(args):
    from .field_model import ModelConfig
    from .meta_trainer import TrainConfig, train
    from .plotting import gridsearch_heatmap

    signals, _ = _load_signals(args.data)
    C, D = len(signals[0].shape), signals[0].channels
    preset = PRESETS.get(C, PRESETS[2])
    tr, te = holdout_split(len(signals), args.seed)
    ctx = _contexts([signals[i] for i in tr])
    test = [signals[i] for i in te]
    rows = []
    for w1 in args.omega1:
        for delta in args.delta:
            mc = ModelConfig(K=args.K or preset["K"], L=args.L or preset["L"],
                             P=args.P or preset["P"], C=C, D=D,
                             omega_first=w1, omega_last=w1 * delta)
            tc = TrainConfig(B=args.B or preset["B"], total_iters=args.iters, G=args.G,
                             alpha=args.alpha, beta=args.beta,
                             gamma=args.gamma if args.gamma is not None else preset["gamma"],
                             seed=args.seed, eval_every=0, dtype=args.dtype)
            ckpt, _ = train(ctx, mc, tc)
            p, s = evaluate_checkpoint(ckpt.best_shared, test, args.H, args.alpha)
            rows.append({"omega1": w1, "omegaK": w1 * delta, "psnr": p, "ssim": s})
            log.info("omega1=%g omegaK=%g psnr=%.3f ssim=%.4f", w1, w1 * delta, p, s)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["omega1", "omegaK", "psnr", "ssim"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(float(v)) for k, v in r.items()})
    outputs = [args.out]
    if args.plot:
        gridsearch_heatmap(rows, args.plot)
        outputs.append(args.plot)
    write_manifest(_manifest_path(args.out), "gridsearch", args, [args.data], outputs,
                   {"seed": args.seed})
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_dynamics(args):
    from .gradient_engine import omega_lr_equivalence
    from .plotting import dynamics_plot

    scaled = omega_lr_equivalence(args.omega_m, args.omega_n, args.tau_m, args.steps,
                                  seed=args.seed, scaled=True)
    unscaled = omega_lr_equivalence(args.omega_m, args.omega_n, args.tau_m, args.steps,
                                    seed=args.seed, scaled=False)
    report = {
        "omega_m": args.omega_m, "omega_n": args.omega_n, "tau_m": args.tau_m,
        "tau_n": scaled["tau_n"], "steps": args.steps, "seed": args.seed,
        "scaled_max_rel_deviation": scaled["max_rel_deviation"],
        "unscaled_max_rel_deviation": unscaled["max_rel_deviation"],
        "traces": {"scaled": scaled["deviation_trace"],
                   "unscaled": unscaled["deviation_trace"]},
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    outputs = [args.out]
    if args.plot:
        dynamics_plot(report, args.plot)
        outputs.append(args.plot)
    write_manifest(_manifest_path(args.out), "dynamics", args, [], outputs, {"seed": args.seed})
    print(f"tau_n={report['tau_n']:.6g} scaled deviation={report['scaled_max_rel_deviation']:.3e} "
          f"unscaled deviation={report['unscaled_max_rel_deviation']:.3e}")


def cmd_classify(args):
    from .downstream import knn_report, mlp_classify_train
    from .signal_io import load_latents

    ds = load_latents(args.latents)
    if ds.labels is None:
        raise UsageError("latent dataset carries no labels")
    if ds.failed:
        raise DataFormatError(f"latent dataset has {len(ds.failed)} failed rows: {list(ds.failed)}")
    if args.mode == "knn":
        report = knn_report(ds, k=args.k, seed=args.seed)
    else:
        _, report = mlp_classify_train(ds, hidden=args.hidden, dropout=args.dropout,
                                       epochs=args.epochs, lr=args.lr, seed=args.seed)
    out = report.to_dict()
    out["mode"] = args.mode
    if args.mode == "knn":
        out["k"] = args.k
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    outputs = []
    if args.out:
        Path(args.out).write_text(text)
        outputs.append(args.out)
        write_manifest(_manifest_path(args.out), "classify", args, [args.latents], outputs,
                       {"seed": args.seed})
    sys.stdout.write(text)


# --- parser -------------------------------------------------------------------

def _add_model_flags(p, with_defaults_note=True):
    note = "default from the published configuration for the data's dimensionality"
    p.add_argument("--K", type=int, help=f"number of layers ({note}: 8 for 1-D, 15 for 2-D) {PUB}")
    p.add_argument("--L", type=int, help=f"hidden width (64 / 256) {PUB}")
    p.add_argument("--P", type=int, help=f"latent size (64 / 2048) {PUB}")
    p.add_argument("--B", type=int, help=f"meta-batch size (64 / 24) {PUB}")
    p.add_argument("--gamma", type=float, help=f"context-reduction fraction (1.0 / 0.25) {PUB}")
    p.add_argument("--G", type=int, default=COMMON["G"], help=f"inner steps (default 10) {PUB}")
    p.add_argument("--alpha", type=float, default=COMMON["alpha"],
                   help=f"inner learning rate (default 1e-2) {PUB}")
    p.add_argument("--beta", type=float, default=COMMON["beta"],
                   help=f"outer learning rate (default 3e-6) {PUB}")
    p.add_argument("--H", type=int, default=COMMON["H"],
                   help=f"test-time steps for validation (default 20) {PUB}")
    p.add_argument("--seed", type=int, default=0, help=f"random seed (default 0) {OWN}")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64",
                   help=f"compute precision (default float64) {OWN}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modsiren",
        description="Meta-learned modulated sinusoidal fields: training, fitting, ablations.",
        epilog=f"Defaults tagged {PUB} come from the published configuration; "
               f"{OWN} marks values chosen for this implementation.")
    parser.add_argument("--threads", type=int, default=1,
                        help=f"worker threads (default 1); results do not depend on it {OWN}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic signal collection")
    p.add_argument("--kind", choices=["1d", "2d"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64, help=f"length or image side (default 64) {OWN}")
    p.add_argument("--classes", type=int, default=2, help=f"2-D classes (default 2) {OWN}")
    p.add_argument("--seed", type=int, default=0, help=f"(default 0) {OWN}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-learn shared weights")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_model_flags(p)
    p.add_argument("--omega1", type=float, help=f"first-layer frequency (20) {PUB}")
    p.add_argument("--omegaK", type=float, help=f"last sinusoidal frequency (200 / 400) {PUB}")
    p.add_argument("--iters", type=int, default=1000, help=f"outer iterations (default 1000) {OWN}")
    p.add_argument("--stop-at", type=int, help="stop early at this iteration (resumable)")
    p.add_argument("--eval-every", type=int, default=500, help=f"(default 500) {OWN}")
    p.add_argument("--lr-schedule", choices=["cosine", "constant"], default="cosine",
                   help=f"(default cosine) {PUB}")
    p.add_argument("--first-order", action="store_true", help="drop second-order terms")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="JSONL log path (default <out>.log.jsonl)")
    p.add_argument("--plot", help="loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit latents to signals with frozen shared weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--H", type=int, default=COMMON["H"], help=f"steps (default 20) {PUB}")
    p.add_argument("--alpha", type=float, default=COMMON["alpha"],
                   help=f"learning rate (default 1e-2) {PUB}")
    p.add_argument("--use-latest", action="store_true",
                   help="use the latest weights instead of the best-validation ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("reconstruct", help="render fitted latents and score them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--data", help="reference signals for metrics")
    p.add_argument("--grid", type=_int_tuple, help="output lattice, e.g. 128,128 for upscaling")
    p.add_argument("--use-latest", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gridsearch", help="sweep first/last frequencies")
    p.add_argument("--data", required=True)
    p.add_argument("--omega1", type=_float_list, default=[10, 20, 30, 40, 50],
                   help=f"first-layer frequencies (default 10..50) {PUB}")
    p.add_argument("--delta", type=_float_list, default=[1, 2, 5, 10, 20],
                   help=f"ratios omegaK/omega1 (default 1,2,5,10,20) {PUB}")
    p.add_argument("--iters", type=int, default=5000, help=f"iterations per cell (default 5000) {OWN}")
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", help="heatmap PNG")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("dynamics", help="frequency/learning-rate equivalence check")
    p.add_argument("--omega-m", type=float, default=20.0)
    p.add_argument("--omega-n", type=float, default=200.0)
    p.add_argument("--tau-m", type=float, default=1e-2)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--plot", help="deviation plot PNG")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("classify", help="classify latent vectors")
    p.add_argument("--latents", required=True)
    p.add_argument("--mode", choices=["knn", "mlp"], default="knn")
    p.add_argument("--k", type=int, default=1, help=f"neighbours (default 1) {PUB}")
    p.add_argument("--hidden", type=_int_tuple, default=(512, 128),
                   help=f"MLP hidden sizes (default 512,128) {OWN}")
    p.add_argument("--dropout", type=float, default=0.2, help=f"(default 0.2) {OWN}")
    p.add_argument("--epochs", type=int, default=50, help=f"(default 50) {PUB}")
    p.add_argument("--lr", type=float, default=1e-3, help=f"(default 1e-3) {PUB}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    set_threads(args.threads)
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ModsirenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
