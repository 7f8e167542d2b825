"""Command-line front end.

Subcommands: gen-data, train, eval, perturb, analyze, selfcheck.
Common flags: --config PATH, --seed N, --out DIR, --f64.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure,
4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .analysis import (DEFAULT_K_RANGE, analyze_model, kmeans_silhouette,
                       pearson, write_analysis_csv)
from .data import (DataError, NOISE_FAMILIES, PhantomConfig, gen_phantoms,
                   load_dataset, save_dataset)
from .gradcheck import finite_difference_check
from .metrics import (dsc_iou, evaluate_model, hd95, perturbation_grid,
                      write_perturb_csv)
from .network import (CheckpointError, ModelConfig, Network, copy_shared_weights,
                      load_checkpoint)
from .nnops import init_conv, conv3d, instance_norm, leaky_relu
from .recordio import ContainerError
from .ssm import SSMParams, init_mamba_block, mamba_block, kernel_apply, ssm_kernel, ssm_scan
from .tensor import NumericError, Rng, Tensor
from .train import ExperimentConfig, run_experiment
from .util import build_id, read_json, write_json

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_SELFCHECK = 4


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="run seed (u64)")
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--f64", action="store_true", help="64-bit float test mode")


def build_parser():
    parser = argparse.ArgumentParser(prog="diffumamba",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic phantom volumes")
    _add_common(p)
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--size", type=int, nargs=3, default=[32, 32, 32],
                   metavar=("D", "H", "W"))
    p.add_argument("--blobs", type=int, nargs=2, default=None, metavar=("MIN", "MAX"))
    p.add_argument("--radius", type=float, nargs=2, default=None, metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--train-manifest", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--no-nrm", action="store_true",
                   help="train the baseline without the noise reduction module")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--manifest", type=str, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="noise-robustness grid on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--families", type=str, nargs="+", default=list(NOISE_FAMILIES),
                   choices=list(NOISE_FAMILIES))
    p.add_argument("--levels", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6])
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("analyze", help="latent-space analysis of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--lambda-trace", type=str, default=None,
                   help="lambda_trace.csv from training (optional)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selfcheck", help="run built-in verification oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None,
                   help="optional directory for the written report")
    p.add_argument("--f64", action="store_true")
    p.add_argument("--corrupt-adjoint", action="store_true",
                   help="testing hook: inject a matmul adjoint fault")
    p.set_defaults(func=cmd_selfcheck)
    return parser


# ----------------------------------------------------------------------
# commands


def _echo(args, extra=None):
    os.makedirs(args.out, exist_ok=True)
    info = {"command": args.command, "seed": args.seed, "build_id": build_id(),
            **(extra or {})}
    write_json(os.path.join(args.out, "run.json"), info)
    return info


def cmd_gen_data(args):
    cfg = PhantomConfig(shape=tuple(args.size))
    if args.blobs:
        cfg.n_blobs = tuple(args.blobs)
    if args.radius:
        cfg.radius = tuple(args.radius)
    samples = gen_phantoms(args.n, args.seed, cfg)
    manifest = save_dataset(samples, args.out)
    _echo(args, {"n": args.n, "manifest": manifest,
                 "shape": list(cfg.shape), "n_blobs": list(cfg.n_blobs)})
    print(f"wrote {args.n} samples; manifest: {manifest}")
    return EXIT_OK


def cmd_train(args):
    if args.config:
        cfg = ExperimentConfig.from_dict(read_json(args.config))
    else:
        cfg = ExperimentConfig()
    # flags win over the config file
    if args.train_manifest:
        cfg.train_manifest = args.train_manifest
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if args.no_nrm:
        cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), "nrm_enabled": False})
    cfg.train.seed = args.seed
    cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), "seed": args.seed})
    cfg.out_dir = args.out
    if not cfg.train_manifest:
        raise DataError("no training manifest given (--train-manifest or config)")
    samples = load_dataset(cfg.train_manifest)
    _echo(args, {"config": cfg.to_dict()})
    result = run_experiment(cfg, samples)
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint:  {result.best_path} (loss {result.best_epoch_loss:.4f})")
    return EXIT_OK


def cmd_eval(args):
    model, aux = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.manifest)
    meta = {"seed": args.seed, "build_id": build_id(), "checkpoint": args.checkpoint,
            "step": aux.get("step", 0)}
    report = evaluate_model(model, samples, meta=meta)
    _echo(args, {"checkpoint": args.checkpoint, "n_samples": len(samples)})
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    report.write_json(os.path.join(args.out, "metrics.json"))
    s = report.summary()
    print(f"mean DSC {s['dsc']['mean']:.4f}  mean IoU {s['iou']['mean']:.4f}  "
          f"HD95 {s['hd95']['mean'] if s['hd95']['mean'] is not None else 'n/a'}")
    return EXIT_OK


def cmd_perturb(args):
    model, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.manifest)
    for lv in args.levels:
        if not 1 <= lv <= 6:
            raise DataError(f"noise level {lv} outside 1..6")
    cells = perturbation_grid(model, samples, args.families, args.levels, seed=args.seed)
    _echo(args, {"checkpoint": args.checkpoint, "families": args.families,
                 "levels": args.levels})
    write_perturb_csv(cells, os.path.join(args.out, "perturbation.csv"),
                      meta={"seed": args.seed, "build_id": build_id()})
    for c in cells:
        print(f"{c.family:12s} level {c.level}  param {c.param:<7g} "
              f"DSC {c.mean_dsc:.4f}  |delta| {c.mean_perturbation:.4f}")
    return EXIT_OK


def cmd_analyze(args):
    model, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.manifest)
    trace = None
    if args.lambda_trace:
        from .analysis import read_lambda_trace_csv
        trace = read_lambda_trace_csv(args.lambda_trace)
    _echo(args, {"checkpoint": args.checkpoint})
    meta = {"seed": args.seed, "build_id": build_id()}
    rows, summary = analyze_model(model, samples, k_range=DEFAULT_K_RANGE,
                                  seed=args.seed, out_dir=args.out,
                                  lambda_trace=trace, meta=meta)
    write_analysis_csv(rows, os.path.join(args.out, "analysis.csv"), meta=meta)
    write_json(os.path.join(args.out, "analysis.json"), summary)
    mp = summary.get("mean_pearson_m1_m2")
    print(f"samples {summary['n_samples']}  mean silhouette "
          f"{summary['mean_silhouette']:.4f}  mean pearson(m1,m2) "
          f"{mp if mp is not None else 'n/a (baseline checkpoint)'}")
    return EXIT_OK


# ----------------------------------------------------------------------
# selfcheck


def _check(name, measured, tol, ok, lines):
    status = "PASS" if ok else "FAIL"
    lines.append(f"[{status}] {name:40s} measured={measured:.3e}  tol={tol:g}")
    return ok


def run_selfcheck(seed=0, corrupt_adjoint=False, print_fn=print) -> bool:
    """Gradient, scan-vs-kernel, equivalence and metric oracles."""
    lines = []
    ok = True
    rng = Rng(seed, "selfcheck")
    if corrupt_adjoint:
        T.set_gradient_fault(1.02)
    try:
        # gradient checks on representative ops (f32 tolerance)
        a = Tensor(rng.normal((4, 5)), requires_grad=True)
        b = Tensor(rng.normal((5, 3)), requires_grad=True)

        def fd(name, out_fn, wiggle):
            nonlocal ok
            try:
                rel, _ = finite_difference_check(out_fn, wiggle, rel_tol=1e-3, seed=seed)
                ok &= _check(name, rel, 1e-3, True, lines)
            except AssertionError as err:
                ok &= _check(name, float("nan"), 1e-3, False, lines)
                lines.append(f"       {err}")

        fd("grad: matmul", lambda: a @ b, [a, b])

        conv = init_conv(rng.derive("c"), 2, 3, (3, 3, 3))
        x = Tensor(rng.normal((1, 2, 4, 4, 4)), requires_grad=True)
        gamma = Tensor(np.ones(3), requires_grad=True)
        beta = Tensor(np.zeros(3), requires_grad=True)
        fd("grad: conv3d+instancenorm+lrelu",
           lambda: leaky_relu(instance_norm(conv3d(x, conv), gamma, beta)),
           [x, conv.weight, gamma])

        mp = init_mamba_block(rng.derive("m"), 3, n_state=4)
        xm = Tensor(rng.normal((1, 3, 2, 2, 2)), requires_grad=True)
        fd("grad: mamba block", lambda: mamba_block(xm, mp),
           [xm, mp.a_log, mp.dt_bias])

        # LTI scan vs kernel
        worst = 0.0
        for i in range(10):
            r = rng.derive(f"lti{i}")
            n = 4
            params = SSMParams(a=-np.exp(r.normal((2, n), dtype=np.float64)),
                               b=r.normal((n,), dtype=np.float64),
                               c=r.normal((n,), dtype=np.float64),
                               delta=float(np.exp(r.uniform(-3, -0.5))))
            xs = r.normal((24, 2), dtype=np.float64)
            diff = np.abs(ssm_scan(params, xs)
                          - kernel_apply(ssm_kernel(params, 24), xs)).max()
            worst = max(worst, float(diff))
        ok &= _check("ssm: scan == kernel conv (10 seeds)", worst, 1e-5, worst < 1e-5, lines)

        y = ssm_scan(SSMParams(a=np.zeros((1, 1)), b=np.ones(1), c=np.ones(1), delta=1.0),
                     np.ones(3))
        exact = float(np.abs(y - np.array([1.0, 2.0, 3.0])).max())
        ok &= _check("ssm: worked case y=[1,2,3]", exact, 0.0, exact == 0.0, lines)

        # equivalence: noise reduction module off == baseline
        cfg = ModelConfig(channels=(4, 8), strides=(1, 2), n_stages=2, seed=seed)
        diff_model = Network(cfg)
        base_model = Network(ModelConfig.from_dict({**cfg.to_dict(), "nrm_enabled": False}))
        copy_shared_weights(diff_model, base_model)
        diff_model.nrm.lam.values.data[...] = 0.0
        for name, t in diff_model.nrm.m2.named("m2"):
            if name.endswith(("_b", "bias", "beta")):
                t.data[...] = 0.0
        worst = 0.0
        for i in range(3):
            xi = Tensor(rng.derive(f"eq{i}").normal((1, 1, 8, 8, 8)))
            with T.no_grad():
                d = diff_model.forward(xi).data
                bse = base_model.forward(xi).data
            worst = max(worst, float(np.abs(d - bse).max()))
        ok &= _check("equivalence: module-off == baseline", worst, 1e-6, worst < 1e-6, lines)

        # metric oracles
        rng_m = rng.derive("metrics")
        worst = 0.0
        for i in range(5):
            p = rng_m.random((6, 6, 6)) < 0.2
            g = rng_m.random((6, 6, 6)) < 0.2
            if not p.any() or not g.any():
                continue
            h_fast = hd95(p, g)
            h_brute = _brute_hd95(p, g)
            worst = max(worst, abs(h_fast - h_brute))
        ok &= _check("metrics: hd95 == brute force", worst, 1e-6, worst < 1e-6, lines)

        p = rng_m.random((5, 5, 5)) < 0.3
        g = rng_m.random((5, 5, 5)) < 0.3
        d, i_ = dsc_iou(p, g)
        ident = abs(d - 2 * i_ / (1 + i_))
        ok &= _check("metrics: dsc == 2*iou/(1+iou)", ident, 1e-6, ident < 1e-6, lines)

        r = pearson([1, 2, 3], [1, 2, 4])
        err = abs(r - 0.9819805060619659)
        ok &= _check("analysis: pearson hand case", err, 1e-5, err < 1e-5, lines)

        pts = np.array([[0.0], [0.1], [10.0], [10.1]])
        _, _, mean_s = kmeans_silhouette(pts, k_range=(2,), seed=0)
        ok &= _check("analysis: silhouette 2-cluster fixture", mean_s, 0.8,
                     mean_s > 0.8, lines)
    finally:
        T.set_gradient_fault(None)

    for line in lines:
        print_fn(line)
    print_fn(f"selfcheck: {'all checks passed' if ok else 'FAILURES detected'}")
    return ok


def _brute_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    from .metrics import surface_voxels
    sp = np.argwhere(surface_voxels(pred)) * np.asarray(spacing)
    sg = np.argwhere(surface_voxels(gt)) * np.asarray(spacing)
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95, method="linear"))


def cmd_selfcheck(args):
    lines = []

    def tee(msg):
        print(msg)
        lines.append(msg)

    ok = run_selfcheck(seed=args.seed, corrupt_adjoint=args.corrupt_adjoint,
                       print_fn=tee)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "selfcheck.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"# seed={args.seed} build_id={build_id()}\n")
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_SELFCHECK


# ----------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if getattr(args, "f64", False):
        T.set_default_dtype("f64")
    try:
        return args.func(args)
    except (DataError, ContainerError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
