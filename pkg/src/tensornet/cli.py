"""Command-line interface: train, predict, check, inspect, bench, fixture.

Exit codes: 0 success, 1 runtime failure or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path


__all__ = ["main", "run_cli", "build_parser"]

_HEAD_ALIASES = {"e": "energy", "f": "forces", "mu": "dipole", "alpha": "polarizability",
                 "sigma": "shielding"}


class UsageError(Exception):
    """Bad combination of arguments detected after parsing."""


def _fmt(x) -> str:
    return repr(float(x))


def _parse_heads(text: str) -> list[str]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if item in _HEAD_ALIASES:
            item = _HEAD_ALIASES[item]
        if item not in _HEAD_ALIASES.values():
            raise UsageError(f"unknown head {item!r}; choose from e,f,mu,alpha,sigma")
        out.append(item)
    if not out:
        raise UsageError("no heads requested")
    return out


def _model_from_args(args):
    """(cfg, params) from --ckpt or from --random-init --seed."""
    from tensornet.io.checkpoint import load_checkpoint
    from tensornet.model import HEADS, ModelConfig, init_params

    if getattr(args, "ckpt", None):
        ckpt = load_checkpoint(args.ckpt)
        return ckpt.model_cfg, ckpt.param_store()
    if not getattr(args, "random_init", False):
        raise UsageError("give --ckpt <file> or --random-init")
    cfg = ModelConfig(n_channels=args.channels, n_rbf=16, n_layers=args.layers, group=args.group,
                      heads=HEADS)
    return cfg, init_params(cfg, args.seed)


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    from tensornet.io.checkpoint import load_checkpoint, restore_trainer
    from tensornet.io.config import parse_config
    from tensornet.io.extxyz import parse_extxyz
    from tensornet.training import train_loop

    model_cfg, train_cfg = parse_config(args.config)
    data = parse_extxyz(args.data)
    trainer = None
    if args.resume:
        # the model architecture comes from the checkpoint, the schedule from --config
        trainer = restore_trainer(load_checkpoint(args.resume), data.systems, train_cfg)
    trainer = train_loop(data.systems, model_cfg, train_cfg, args.out, trainer=trainer)
    ev = trainer.evaluate(trainer.train_set)
    summary = " ".join(f"{k} {v:.6g}" for k, v in sorted(ev.items()) if k.endswith("_mae"))
    print(f"trained steps {trainer.step_count} epochs {trainer.epoch} train {summary}")
    print(f"checkpoints written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    from tensornet.io.checkpoint import load_checkpoint
    from tensornet.io.extxyz import parse_extxyz
    from tensornet.model import predict

    heads = _parse_heads(args.heads)
    ckpt = load_checkpoint(args.ckpt)
    data = parse_extxyz(args.data)
    lines = []
    for idx, system in enumerate(data.systems):
        res = predict([system], ckpt.param_store(), ckpt.model_cfg, heads=heads)[0]
        if "energy" in heads or "forces" in heads:
            lines.append(f"frame {idx} energy {_fmt(res['energy'])}")
        if "forces" in heads:
            for a, f in enumerate(res["forces"]):
                lines.append(f"frame {idx} atom {a} force {' '.join(_fmt(v) for v in f)}")
        if "dipole" in heads:
            lines.append(f"frame {idx} dipole {' '.join(_fmt(v) for v in res['dipole'])}")
        if "polarizability" in heads:
            lines.append(f"frame {idx} polarizability "
                         f"{' '.join(_fmt(v) for v in res['polarizability'].ravel())}")
        if "shielding" in heads:
            for a, s in enumerate(res["shielding"]):
                lines.append(f"frame {idx} atom {a} shielding {' '.join(_fmt(v) for v in s.ravel())}")
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def cmd_check(args) -> int:
    from tensornet import verification as ver
    from tensornet.synthetic import random_system

    if args.what == "appendix":
        results = ver.appendix_oracle_suite(args.seed, args.cases)
        for r in results:
            print(r.line())
        bounded = [r for r in results if r.kind == "max"]
        failed = [r for r in results if not r.passed]
        worst = failed[0] if failed else max(bounded, key=lambda r: r.value)
        print(f"RESULT {'fail' if failed else 'pass'} max_dev={worst.value:.6e} "
              f"transform=appendix head={worst.key}")
        return 1 if failed else 0

    cfg, params = _model_from_args(args)
    if args.what == "equivariance":
        system = random_system(args.atoms or 20, seed=args.seed)
        report = ver.equivariance_report(cfg, params, system, n_trials=args.trials, seed=args.seed,
                                         parity=(False,) if args.no_parity else (False, True))
        print(report.table())
        print(report.result_line())
        return 0 if report.passed else 1
    system = random_system(args.atoms or 10, seed=args.seed)
    report = ver.gradient_report(cfg, params, system, h=args.h)
    print(f"max_abs_error {report.max_abs_error:.3e} max_rel_error {report.max_rel_error:.3e} "
          f"net_force {report.net_force:.3e}")
    print(report.result_line())
    return 0 if report.passed else 1


def cmd_inspect(args) -> int:
    from tensornet.io.checkpoint import load_checkpoint
    from tensornet.io.config import canonical_text

    ckpt = load_checkpoint(args.ckpt)
    print(f"format TNETCKPT version {ckpt.version}")
    sys.stdout.write(canonical_text(ckpt.model_cfg, ckpt.train_cfg, ckpt.metrics))
    arrays = ckpt.arrays()
    print(f"arrays {len(arrays)}")
    for name, a in arrays.items():
        print(f"  {name} {a.dtype.name} {'x'.join(map(str, a.shape)) or 'scalar'}")
    n_params = sum(a.size for a in ckpt.params.values())
    print(f"parameters {n_params}")
    return 0


def cmd_bench(args) -> int:
    from tensornet.io.checkpoint import load_checkpoint
    from tensornet.io.extxyz import parse_extxyz
    from tensornet.model import energy, forces

    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    ckpt = load_checkpoint(args.ckpt)
    params, cfg = ckpt.param_store(), ckpt.model_cfg
    data = parse_extxyz(args.data)
    print(f"{'frame':>5} {'atoms':>6} {'forward_ms':>11} {'fwd+bwd_ms':>11}")
    for idx, system in enumerate(data.systems):
        energy(system, params, cfg)  # warm-up
        t0 = time.perf_counter()
        for _ in range(args.repeat):
            energy(system, params, cfg)
        t1 = time.perf_counter()
        for _ in range(args.repeat):
            forces(system, params, cfg)
        t2 = time.perf_counter()
        print(f"{idx:5d} {len(system):6d} {(t1 - t0) / args.repeat * 1e3:11.3f} "
              f"{(t2 - t1) / args.repeat * 1e3:11.3f}")
    return 0


def cmd_fixture(args) -> int:
    from tensornet.io.extxyz import write_extxyz
    from tensornet.synthetic import morse_dataset

    systems = morse_dataset(args.n, seed=args.seed)
    write_extxyz(args.out, systems)
    print(f"wrote {len(systems)} Morse conformations to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tensornet", description="Cartesian tensor message passing potentials.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model to an extended-XYZ dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="evaluate a checkpoint on every frame")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--heads", default="e,f", help="comma list of e,f,mu,alpha,sigma")
    pr.add_argument("--out", required=True, help="output file, or - for stdout")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("check", help="symmetry, gradient and algebra checks")
    c.add_argument("what", choices=("equivariance", "gradients", "appendix"))
    c.add_argument("--ckpt")
    c.add_argument("--random-init", action="store_true")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=50)
    c.add_argument("--atoms", type=int, default=None)
    c.add_argument("--cases", type=int, default=1000)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--no-parity", action="store_true", help="rotations only")
    c.add_argument("--group", choices=("O3", "SO3"), default="O3", help="with --random-init")
    c.add_argument("--channels", type=int, default=16, help="with --random-init")
    c.add_argument("--layers", type=int, default=2, help="with --random-init")
    c.set_defaults(func=cmd_check)

    i = sub.add_parser("inspect", help="print a checkpoint's config and arrays")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", help="time forward and forward+backward per frame")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--repeat", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fixture", help="write the synthetic Morse dataset as extended XYZ")
    f.add_argument("--out", required=True)
    f.add_argument("--n", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fixture)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    from tensornet.io.config import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tensornet: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"tensornet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
