"""``msnlab`` command line: train, sweep, gan, check, report."""

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import reporting
from .errors import MsnlabError
from .norm import SCHEMES
from .train import ExperimentConfig, GanConfig, load_data, recompute_records, train, train_gan


def _csv_list(kind):
    def parse(text):
        return [kind(t) for t in text.split(",") if t]
    return parse


def _add_experiment_flags(p, norm_list=False):
    d = ExperimentConfig()
    p.add_argument("--model", choices=("mlp", "cnn3"), default=d.model)
    if norm_list:
        p.add_argument("--norm", type=_csv_list(str), default=["bn", "sn", "msn"],
                       help="comma-separated schemes (default bn,sn,msn)")
        p.add_argument("--lr", type=_csv_list(float), default=[d.lr], help="comma-separated learning rates")
    else:
        p.add_argument("--norm", choices=SCHEMES, default=d.norm)
        p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--data-dir", default=None, help="MNIST IDX directory (fallback: $MSNLAB_DATA_DIR)")
    p.add_argument("--subset", type=int, default=d.subset)
    p.add_argument("--test-subset", type=int, default=d.test_subset)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--snap-every", type=int, default=d.snap_every)
    p.add_argument("--sparsity-tol", type=float, default=d.sparsity_tol)
    p.add_argument("--widths", type=_csv_list(int), default=[])
    p.add_argument("--slope", type=float, default=d.slope)
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="msnlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_experiment_flags(sub.add_parser("train", help="run one experiment"))
    _add_experiment_flags(sub.add_parser("sweep", help="schemes x learning rates, one subdirectory each"),
                          norm_list=True)

    g = sub.add_parser("gan", help="toy GAN on the 8-Gaussian ring")
    gd = GanConfig()
    g.add_argument("--norm", choices=SCHEMES, default=gd.norm)
    g.add_argument("--steps", type=int, default=gd.steps)
    g.add_argument("--batch", type=int, default=gd.batch)
    g.add_argument("--lr", type=float, default=gd.lr)
    g.add_argument("--seed", type=int, default=gd.seed)
    g.add_argument("--out", required=True)

    c = sub.add_parser("check", help="gradient and oracle property suites")
    c.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="recompute diagnostics from a run's snapshots")
    r.add_argument("run_dir")
    r.add_argument("--out", default=None, help="write recomputed metrics here (default: print)")
    return parser


def _config_from(args, norm, lr, out):
    data_dir = args.data_dir or os.environ.get("MSNLAB_DATA_DIR")
    return ExperimentConfig(model=args.model, norm=norm, widths=tuple(args.widths), slope=args.slope,
                            data_dir=data_dir, subset=args.subset, test_subset=args.test_subset, lr=lr,
                            batch=args.batch, epochs=args.epochs, seed=args.seed, snap_every=args.snap_every,
                            sparsity_tol=args.sparsity_tol, out=out)


def cmd_train(args):
    cfg = _config_from(args, args.norm, args.lr, args.out)
    cfg.validate()
    art = train(cfg)
    last = art.records[-1]
    print(f"{cfg.norm}: test_acc={reporting.fmt(last.test_acc)} mean_step_ms={art.mean_step_ms:.3f} -> {cfg.out}")
    return 0


def cmd_sweep(args):
    configs = []
    for norm in args.norm:
        for lr in args.lr:
            out = os.path.join(args.out, f"{norm}_lr{lr:g}")
            cfg = _config_from(args, norm, lr, out)
            cfg.validate()
            configs.append(cfg)
    train_ds, test_ds = load_data(configs[0])
    os.makedirs(args.out, exist_ok=True)
    rows = ["norm,lr,mean_step_ms,median_step_ms,steps,test_acc,init_weight_sha256"]
    for cfg in configs:
        art = train(cfg, train_ds, test_ds)
        t = art.timing()
        rows.append(f"{cfg.norm},{cfg.lr!r},{t['mean_step_ms']!r},{t['median_step_ms']!r},{t['steps']},"
                    f"{reporting.fmt(art.records[-1].test_acc)},{art.init_weight_hash}")
        print(f"{cfg.norm} lr={cfg.lr:g}: test_acc={reporting.fmt(art.records[-1].test_acc)} "
              f"mean_step_ms={t['mean_step_ms']:.3f}")
    reporting.write_text(os.path.join(args.out, "timing.csv"), "\n".join(rows) + "\n")
    return 0


def cmd_gan(args):
    cfg = GanConfig(norm=args.norm, steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed, out=args.out)
    art = train_gan(cfg)
    print(f"{cfg.norm}: modes_covered={art.modes}/8 lipschitz_ratio={art.lipschitz:.4f} -> {cfg.out}")
    return 0


def _check_suites(seed):
    from .gradcheck import GRAD_RTOL, all_layer_checks
    from .spectral import converge_power_iteration, init_power_state, jacobi_svd, sn_weight
    from .tensor import Tensor, backward, conv2d, tensor_sum

    def gradients():
        worst = max(all_layer_checks(seed).values())
        return worst <= GRAD_RTOL, f"max rel err {worst:.2e} over dense/conv x {len(SCHEMES)} schemes"

    def power_vs_svd():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(20):
            a = rng.standard_normal((rng.integers(1, 33), rng.integers(1, 33)))
            s = jacobi_svd(a)[1][0]
            est, _ = converge_power_iteration(a, init_power_state(*a.shape, rng))
            worst = max(worst, abs(est - s) / s)
        return worst <= 1e-6, f"max rel err {worst:.2e} on 20 random matrices"

    def svd_reconstruction():
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((12, 7))
        u, s, vt = jacobi_svd(a)
        err = np.abs(u * s @ vt - a).max()
        return err <= 1e-10, f"reconstruction err {err:.2e}"

    def sn_unit_norm():
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((8, 5))
        _, st = converge_power_iteration(w, init_power_state(8, 5, rng))
        w_hat, _, _ = sn_weight(w, st, 0)
        s = jacobi_svd(w_hat)[1][0]
        return abs(s - 1) <= 1e-6, f"sigma(w_hat) = {s:.12f}"

    def conv_adjoint():
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = rng.standard_normal((4, 3, 3, 3))
        y = conv2d(x, w, 1, 1)
        r = rng.standard_normal(y.shape)
        backward(tensor_sum(y * r))
        lhs, rhs = float(np.sum(y.data * r)), float(np.sum(x.data * x.grad))
        return abs(lhs - rhs) <= 1e-9 * abs(lhs), f"<conv x, r> - <x, conv^T r> = {lhs - rhs:.2e}"

    return [("gradients", gradients), ("power-vs-svd", power_vs_svd), ("svd-reconstruction", svd_reconstruction),
            ("sn-unit-norm", sn_unit_norm), ("conv-adjoint", conv_adjoint)]


def cmd_check(args):
    failed = 0
    for name, suite in _check_suites(args.seed):
        t0 = time.perf_counter()
        ok, detail = suite()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return 1 if failed else 0


def cmd_report(args):
    config, records = recompute_records(args.run_dir)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        reporting.write_records(args.out, records)
        print(f"{len(records)} snapshots -> {os.path.join(args.out, 'metrics.csv')}")
    else:
        sys.stdout.write(reporting.metrics_csv(records))
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "gan": cmd_gan, "check": cmd_check, "report": cmd_report}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except MsnlabError as exc:
        print(f"msnlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"msnlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
