"""``patconv`` command line: derive patterns, prune, compile, run and benchmark."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .bench import SUITES, run_bench, run_pattern_sweep
from .compiler import compile_model, emit_plan_text, read_plans, write_plans
from .errors import PatConvError, ValidationError
from .executor import default_threads, run_network
from .patterns import (PatternSet, extended_pattern_set, read_pattern_manifest,
                       write_pattern_manifest)
from .pruning import PruneConfig, compression_stats
from .serialization import load_model, read_tensor, save_model, write_tensor

__all__ = ["main", "build_parser"]

SUPPORTED_K = (4, 8, 12)


def _cmd_derive_patterns(args):
    if args.k not in SUPPORTED_K:
        raise ValidationError(f"unsupported pattern count {args.k}; choose from "
                              f"{', '.join(map(str, SUPPORTED_K))}")
    pset = extended_pattern_set(args.k)
    write_pattern_manifest(pset, args.out)
    print(f"wrote {len(pset)} patterns to {args.out}: codes {list(pset.codes)}")


def _cmd_make_model(args):
    from .admm import make_synthetic_dataset, toy_cnn, train_dense
    model = toy_cnn(args.seed)
    if args.train_epochs:
        data = make_synthetic_dataset(seed=args.seed)
        model = train_dense(model, data, epochs=args.train_epochs, seed=args.seed)
    save_model(model, args.out)
    print(f"wrote {args.out}: input {model.input_shape}, {len(model.layers)} layers")


def _cmd_make_input(args):
    rng = np.random.default_rng(args.seed)
    shape = tuple(int(d) for d in args.shape.split(","))
    write_tensor(args.out, rng.standard_normal(shape).astype(np.float32))
    print(f"wrote {args.out}: shape {shape}")


def _prune_config(args) -> PruneConfig:
    d = PruneConfig.from_file(args.config).to_dict() if args.config else {}
    overrides = {"keep_ratio": args.connectivity, "method": args.method, "seed": args.seed,
                 "balanced": args.balanced}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return PruneConfig.from_dict(d)


def _cmd_prune(args):
    from .admm import make_synthetic_dataset, prune_model
    from .pruning import magnitude_prune
    model = load_model(args.model)
    pset: PatternSet = read_pattern_manifest(args.patterns)
    config = _prune_config(args)
    config.pattern_count = len(pset)
    if config.method == "magnitude":
        pruned = magnitude_prune(model, config, pset)
    else:
        if list(pset.codes) != list(extended_pattern_set(len(pset)).codes):
            raise ValidationError("ADMM pruning uses the derived pattern library; "
                                  "pass a manifest written by derive-patterns")
        pruned = prune_model(model, config, make_synthetic_dataset(seed=config.seed))
    save_model(pruned, args.out)
    print(compression_stats(pruned).summary())


def _cmd_compile(args):
    model = load_model(args.model)
    threads = default_threads(args.threads)
    plans = compile_model(model, threads)
    write_plans(plans, args.out)
    if args.emit_plan:
        for p in plans:
            if p is not None:
                print(emit_plan_text(p))
    print(f"wrote {args.out}: {sum(p is not None for p in plans)} compiled layers, "
          f"{threads} worker(s)")


def _cmd_run(args):
    model = load_model(args.model)
    plans = read_plans(args.plan)
    x = read_tensor(args.input)
    if x.ndim == 3:
        x = x[None]
    y = run_network(model, plans, x)
    write_tensor(args.out, y)
    print(f"wrote {args.out}: shape {tuple(y.shape)}")


def _cmd_bench(args):
    threads = default_threads(args.threads)
    progress = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    if args.sweep_k:
        report = run_pattern_sweep(args.suite, threads=threads, reps=args.reps,
                                   keep_ratio=args.keep, seed=args.seed, progress=progress)
    else:
        report = run_bench(args.suite, threads=threads, reps=args.reps, k=args.k,
                           keep_ratio=args.keep, seed=args.seed, progress=progress)
    if args.csv:
        report.write_csv(args.csv)
    print(report.summary())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patconv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("derive-patterns", help="write a pattern library manifest")
    s.add_argument("--k", type=int, required=True, help="library size: 4, 8 or 12")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_derive_patterns)

    s = sub.add_parser("make-model", help="write the toy CNN as a .pconv model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-epochs", type=int, default=0,
                   help="train on the synthetic dataset first (0 keeps random weights)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_make_model)

    s = sub.add_parser("make-input", help="write a seeded random tensor file")
    s.add_argument("--shape", required=True, help="comma-separated dims, e.g. 1,1,16,16")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_make_input)

    s = sub.add_parser("prune", help="pattern + connectivity prune a model")
    s.add_argument("--model", required=True)
    s.add_argument("--patterns", required=True, help="pattern manifest from derive-patterns")
    s.add_argument("--connectivity", type=float, default=None, help="kernel keep ratio in (0, 1]")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--balanced", dest="balanced", action="store_true", default=None)
    g.add_argument("--unbalanced", dest="balanced", action="store_false")
    s.add_argument("--method", choices=("magnitude", "admm"), default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config", help="JSON PruneConfig file; flags override its values")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_prune)

    s = sub.add_parser("compile", help="compile pruned layers into a .pplan file")
    s.add_argument("--model", required=True)
    s.add_argument("--threads", type=int, default=None,
                   help="worker count (default: $PCONV_THREADS or 1)")
    s.add_argument("--emit-plan", action="store_true", help="print the plan dump")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_compile)

    s = sub.add_parser("run", help="execute a compiled model on a tensor file")
    s.add_argument("--plan", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("bench", help="time dense, CSR and pattern execution")
    s.add_argument("--suite", required=True, help=", ".join(SUITES))
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--k", type=int, default=4, help="pattern library size")
    s.add_argument("--keep", type=float, default=0.5, help="connectivity keep ratio")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep-k", action="store_true", help="time the pattern executor at k=4,8,12")
    s.add_argument("--csv")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (PatConvError, OSError, json.JSONDecodeError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
