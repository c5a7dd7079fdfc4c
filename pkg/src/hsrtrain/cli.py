"""Command-line driver for training runs and the measurement experiments.

Exit codes: 0 success, 1 an embedded property check failed, 2 usage error,
3 training diverged.  Settings resolve as flags > --config file > defaults;
the config file holds ``name=value`` lines using the long flag names.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import kernel_rfs as krfs
from .core import Distribution, Rng, quadratic_form_polynomial, sample_even_polynomial, sample_sphere
from .network import init_net, save_checkpoint
from .trainer import (DivergenceError, TrainConfig, held_out_loss, scaling_experiment, sparsity_experiment,
                      train, write_manifest)

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _grid(kind):
    def parse(text: str):
        try:
            vals = [kind(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"malformed grid {text!r}") from None
        if not vals:
            raise argparse.ArgumentTypeError("grid is empty")
        return vals
    parse.__name__ = f"{kind.__name__} grid"
    return parse


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# name -> (type, default, help); default None with "required" marks a mandatory value
_COMMON = {
    "seed": (int, 0, "root random seed"),
    "out": (str, None, "output directory (default: runs/<command>)"),
}

COMMANDS = {
    "train": {
        "d": (_positive_int, "required", "input dimension"),
        "m": (_positive_int, "required", "neuron pairs (the net has 2m neurons)"),
        "eta": (float, "required", "learning rate"),
        "batch": (_positive_int, "required", "mini-batch size"),
        "steps": (_positive_int, "required", "SGD iterations"),
        "backend": (str, "hsr", "hsr or dense"),
        "b0": (float, None, "activation threshold (default sqrt(0.4 ln 2m))"),
        "B": (float, 1.0, "output weight magnitude"),
        "target-degree": (int, 2, "degree bound of the random even polynomial target"),
        "target-norm": (float, 1.0, "coefficient norm of the target"),
        "eval-samples": (_positive_int, 10_000, "held-out samples for the reported losses"),
    },
    "sparsity": {
        "m-grid": (_grid(int), "required", "comma-separated m values"),
        "d": (_positive_int, 8, "input dimension"),
        "trials": (_positive_int, 1, "nets per m"),
        "inputs": (_positive_int, 100, "sphere inputs per net"),
        "b0": (float, None, "threshold (default sqrt(0.4 ln m))"),
        "ratio-min": (float, 0.8, "lowest accepted observed / Phi(-b0) ratio"),
        "ratio-max": (float, 1.2, "highest accepted observed / Phi(-b0) ratio"),
    },
    "scaling": {
        "m-grid": (_grid(int), "required", "comma-separated m values"),
        "d": (_positive_int, 8, "input dimension"),
        "batch": (_positive_int, 16, "mini-batch size"),
        "steps": (_positive_int, 30, "iterations per run"),
        "eta": (float, 0.05, "learning rate"),
        "repeats": (_positive_int, 1, "sweeps over the grid; each m keeps the median"),
        "max-slope": (float, 0.95, "largest accepted hsr slope"),
    },
    "kernel-check": {
        "m": (_grid(int), "required", "comma-separated feature counts"),
        "eps": (float, 0.05, "deviation threshold"),
        "trials": (_positive_int, 1000, "random input pairs"),
        "d": (_positive_int, 8, "input dimension"),
        "b0": (float, 0.0, "feature threshold"),
        "ref-samples": (_positive_int, 1_000_000, "Monte Carlo samples for the reference kernel"),
        "max-rate": (float, 0.02, "largest accepted violation rate"),
    },
    "rfs": {
        "m": (_grid(int), "required", "comma-separated feature counts"),
        "d": (_positive_int, 8, "input dimension"),
        "b0": (float, 0.0, "feature threshold"),
        "steps": (_positive_int, 4096, "SGD iterations T"),
        "batch": (_positive_int, 1, "mini-batch size"),
        "loss": (str, "absolute", "absolute or hinge"),
        "eta": (float, None, "learning rate (default M / (sqrt(T) L C))"),
        "seeds": (_positive_int, 5, "independent runs per m"),
        "eval-samples": (_positive_int, 10_000, "held-out samples"),
        "margin": (float, 2.0, "accepted multiple of the theoretical envelope"),
    },
    "ntk-equiv": {
        "B-grid": (_grid(float), "1,10,100,1000", "comma-separated output scales"),
        "d": (_positive_int, 8, "input dimension"),
        "m": (_positive_int, 1024, "neuron pairs"),
        "eta": (float, 1.0, "base learning rate (the network uses eta / B^2)"),
        "batch": (_positive_int, 16, "mini-batch size"),
        "steps": (_positive_int, 500, "SGD iterations"),
        "seeds": (_positive_int, 5, "independent runs"),
        "eval-samples": (_positive_int, 10_000, "held-out samples"),
        "min-fraction": (float, 0.8, "share of seeds whose last-B gap must beat the first-B gap"),
    },
}


def _dest(name: str) -> str:
    return name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsrtrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="file of name=value defaults")
        for name, (kind, default, help_text) in {**opts, **_COMMON}.items():
            shown = "required" if default == "required" else f"default {default}"
            # real defaults are applied after the config file is merged
            p.add_argument(f"--{name}", dest=_dest(name), type=kind, default=None,
                           help=f"{help_text} ({shown})")
    return parser


def _read_config(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line without '=': {raw.rstrip()}")
            out[key.strip().lstrip("-")] = value.strip()
    return out


def resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse argv and fill unset options from the config file, then defaults."""
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    opts = {**COMMANDS[args.command], **_COMMON}
    config = {}
    if args.config:
        try:
            config = _read_config(args.config)
        except (OSError, ValueError) as exc:
            sub.error(f"cannot read config: {exc}")
        unknown = set(config) - set(opts)
        if unknown:
            sub.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    for name, (kind, default, _) in opts.items():
        dest = _dest(name)
        if getattr(args, dest) is not None:
            continue
        if name in config:
            try:
                setattr(args, dest, kind(config[name]))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                sub.error(f"bad config value for {name}: {exc}")
        elif default == "required":
            sub.error(f"the following arguments are required: --{name}")
        elif isinstance(default, str) and kind is not str:
            setattr(args, dest, kind(default))
        else:
            setattr(args, dest, default)
    if args.out is None:
        args.out = os.path.join("runs", args.command)
    return args


def _write_table(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _append_manifest(path: str, entries: dict) -> None:
    with open(path, "a") as fh:
        for k, v in entries.items():
            fh.write(f"{k}={v}\n")


def _start(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "manifest.txt")
    entries = {"command": args.command}
    entries.update({k: (",".join(map(str, v)) if isinstance(v, list) else v)
                    for k, v in vars(args).items() if k not in ("command",)})
    write_manifest(path, entries)
    return path


# ---- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    if args.backend not in ("hsr", "dense"):
        raise _Usage("--backend must be hsr or dense")
    rng = Rng(args.seed)
    if args.target_degree < 0 or args.target_norm <= 0:
        raise _Usage("--target-degree must be >= 0 and --target-norm > 0")
    target = sample_even_polynomial(args.target_degree, args.target_norm, args.d, rng.split("target"))
    cfg = TrainConfig(d=args.d, m=args.m, eta=args.eta, batch=args.batch, T=args.steps, seed=args.seed,
                      B=args.B, b0=args.b0, backend=args.backend, target=target)
    manifest = _start(args)
    _append_manifest(manifest, {f"config.{k}": v for k, v in cfg.manifest().items()})
    try:
        result = train(cfg)
    except DivergenceError as exc:
        _append_manifest(manifest, {"status": "diverged", "diverged_at": exc.iteration})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    result.metrics.write_csv(os.path.join(args.out, "metrics.csv"))
    save_checkpoint(result.returned, os.path.join(args.out, "checkpoint_returned.bin"))
    save_checkpoint(result.final, os.path.join(args.out, "checkpoint_final.bin"))
    init = init_net(cfg.d, cfg.m, cfg.B, rng.split("init"), cfg.resolved_b0)
    # both losses are measured on the same held-out sample
    init_loss, _ = held_out_loss(init, target, cfg.input, rng.split("evaluation"), args.eval_samples)
    final_loss, _ = held_out_loss(result.final, target, cfg.input, rng.split("evaluation"),
                                  args.eval_samples)
    if not math.isfinite(final_loss):
        _append_manifest(manifest, {"status": "diverged"})
        print("error: final loss is not finite", file=sys.stderr)
        return EXIT_DIVERGED
    _append_manifest(manifest, {"status": "ok", "t_star": result.t_star, "initial_loss": repr(init_loss),
                                "final_loss": repr(final_loss)})
    print(f"initial_loss={init_loss!r}")
    print(f"final_loss={final_loss!r}")
    return EXIT_OK


def cmd_sparsity(args) -> int:
    manifest = _start(args)
    rows = sparsity_experiment(args.m_grid, args.d, args.trials, Rng(args.seed), args.inputs, args.b0)
    _write_table(os.path.join(args.out, "sparsity.csv"), rows)
    ok = all(args.ratio_min <= r["ratio_phi"] <= args.ratio_max and r["max_ok"] for r in rows)
    for r in rows:
        print(f"m={r['m']} mean_fired={r['mean_fired']:.2f} ratio_phi={r['ratio_phi']:.4f} "
              f"max_fired={r['max_fired']}")
    _append_manifest(manifest, {"status": "ok" if ok else "property-failed"})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_scaling(args) -> int:
    if len(args.m_grid) < 2:
        raise _Usage("--m-grid needs at least two values")
    manifest = _start(args)
    rows, slopes = scaling_experiment(args.m_grid, args.d, args.batch, args.steps, Rng(args.seed), args.eta,
                                       repeats=args.repeats)
    for r in rows:
        r["slope_hsr"] = slopes["hsr"]
        r["slope_dense"] = slopes["dense"]
    _write_table(os.path.join(args.out, "scaling.csv"), rows)
    ok = (slopes["hsr"] < args.max_slope and slopes["hsr"] < slopes["dense"]
          and all(r["fired_equal"] for r in rows))
    print(f"slope_hsr={slopes['hsr']:.4f}")
    print(f"slope_dense={slopes['dense']:.4f}")
    _append_manifest(manifest, {"slope_hsr": slopes["hsr"], "slope_dense": slopes["dense"],
                                "status": "ok" if ok else "property-failed"})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_kernel_check(args) -> int:
    manifest = _start(args)
    rng = Rng(args.seed)
    rows = []
    for m in args.m:
        res = krfs.kernel_concentration_check(args.d, args.b0, m, args.eps, args.trials,
                                              rng.split("kernel-check", m), args.ref_samples)
        rows.append({"m": m, "eps": args.eps, "b0": args.b0, "trials": res.trials,
                     "violations": res.violations, "violation_rate": res.violation_rate,
                     "stderr": res.stderr, "delta_bound": res.delta_bound,
                     "max_deviation": res.max_deviation})
        print(f"m={m} violation_rate={res.violation_rate:.4f}")
    _write_table(os.path.join(args.out, "kernel_check.csv"), rows)
    ok = all(r["violation_rate"] <= args.max_rate for r in rows)
    _append_manifest(manifest, {"status": "ok" if ok else "property-failed"})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_rfs(args) -> int:
    if args.loss not in krfs.LOSSES:
        raise _Usage(f"--loss must be one of {', '.join(krfs.LOSSES)}")
    manifest = _start(args)
    rng = Rng(args.seed)
    dist = Distribution.sphere(args.d)
    L = C = R = M = 1.0
    eta = M / (math.sqrt(args.steps) * L * C) if args.eta is None else args.eta
    rows = []
    try:
        for m in args.m:
            losses = []
            for s in range(args.seeds):
                sr = rng.split("rfs", m * 1000 + s)
                u = sample_sphere(args.d, sr.split("u"))
                target = krfs.linear_witness_target(u, args.b0)
                if args.loss == "hinge":
                    base = target
                    target = lambda X, f=base: np.sign(f(X))  # noqa: E731
                emb = krfs.RfsEmbedding.sample(m, args.d, args.b0, sr.split("embedding"))
                res = krfs.rfs_train(emb, args.loss, eta, args.batch, args.steps, target, dist, sr.split("train"))
                X = dist.sample(sr.split("holdout"), args.eval_samples)
                vals, _ = krfs._loss_and_slope(args.loss, res.model.predict(X), target(X))
                losses.append(float(vals.mean()))
            bound = krfs.sgdrfs_bound(L, R, C, M, m, args.d, args.steps)
            mean = float(np.mean(losses))
            se = float(np.std(losses, ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else float("nan")
            rows.append({"m": m, "T": args.steps, "eta": eta, "loss": args.loss, "mean_loss": mean,
                         "stderr": se, "bound": bound, "ok": mean <= args.margin * bound})
            print(f"m={m} mean_loss={mean:.5f} bound={bound:.5f}")
    except DivergenceError as exc:
        _append_manifest(manifest, {"status": "diverged"})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_table(os.path.join(args.out, "rfs.csv"), rows)
    # the envelope only applies to the realizable absolute-loss setup
    ok = args.loss != "absolute" or all(r["ok"] for r in rows)
    _append_manifest(manifest, {"status": "ok" if ok else "property-failed"})
    return EXIT_OK if ok else EXIT_PROPERTY


def cmd_ntk_equiv(args) -> int:
    manifest = _start(args)
    rng = Rng(args.seed)
    rows = []
    wins = 0
    for s in range(args.seeds):
        sr = rng.split("ntk", s)
        u = sample_sphere(args.d, sr.split("u"))
        target = quadratic_form_polynomial(u, 1.0)
        res = krfs.ntk_equivalence_experiment(args.d, args.m, args.eta, args.batch, args.steps, args.B_grid,
                                              target, sr, args.eval_samples)
        for r in res:
            rows.append({"seed": s, **r})
        first, last = res[0], res[-1]
        wins += bool(not first["diverged"] and not last["diverged"] and last["gap"] < first["gap"])
        print(f"seed={s} " + " ".join(f"gap[B={r['B']:g}]={r['gap']:.3e}" for r in res))
    _write_table(os.path.join(args.out, "ntk_equiv.csv"), rows)
    ok = wins >= args.min_fraction * args.seeds
    _append_manifest(manifest, {"seeds_improved": wins, "status": "ok" if ok else "property-failed"})
    return EXIT_OK if ok else EXIT_PROPERTY


class _Usage(Exception):
    pass


HANDLERS = {
    "train": cmd_train, "sparsity": cmd_sparsity, "scaling": cmd_scaling,
    "kernel-check": cmd_kernel_check, "rfs": cmd_rfs, "ntk-equiv": cmd_ntk_equiv,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return HANDLERS[args.command](args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"hsrtrain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
