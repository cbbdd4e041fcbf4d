"""Command-line entry point: ``se2gcnn <subcommand> [flags]``.

Every subcommand takes ``--config FILE`` (``key=value`` lines naming the
subcommand's long flags, dashes or underscores) and ``--threads``. Flags on
the command line win over the file; unknown keys are usage errors. The seed
falls back to ``$SE2_SEED`` and then 0.

Exit codes: 0 ok, 1 usage, 2 verification failure, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import harness
from .datasets import GENERATORS, load_dataset, save_dataset, write_netpbm
from .geometry import GroupElement, OrientationSampling, apply_L, apply_U
from .kernels import build_rotation_operator
from .network import (
    ModelFormatError,
    NetworkConfig,
    TABLE_TOTALS,
    build_network,
    count_weights,
    init_weights,
    load_model,
    save_model,
)
from .tensorio import TensorFormatError, atomic_write_bytes, load_tensor, read_netpbm, save_tensor
from .training import AUGMENTATIONS, TrainingDiverged, TrainSettings, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


# Defaults live here rather than in argparse so a config file can tell which
# flags were given explicitly (those parse as non-None).
DEFAULTS = {
    "build": {"n_orientations": 4, "pool_layers": (), "head": "patch", "precision": "float32",
              "input_channels": 3},
    "train": {"iterations": 2000, "lr": 0.01, "momentum": 0.9, "batch_size": 64, "augment": "none",
              "log_every": 50, "pool_layers": (1, 2, 3), "head": "patch", "precision": "float32"},
    "eval": {"tta": "none"},
    "verify": {"n_orientations": 4, "skip_gradients": False},
    "synth": {"generator": "rotated_patterns", "count": 2000, "dump": 0},
    "rotate": {"theta": 0.0, "tx": 0.0, "ty": 0.0, "kind": "image", "n_orientations": None},
    "dump-operator": {"kernel_size": 5, "n_orientations": 8},
}


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="key=value file of flag overrides (flags win)")
    p.add_argument("--threads", type=_positive_int, help="cap BLAS worker threads")
    if seed:
        p.add_argument("--seed", type=int, help="RNG seed (default $SE2_SEED or 0)")


def _add_network_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-orientations", type=int, help="orientation samples N (any N >= 1)")
    p.add_argument("--channels", type=_int_list, help="six comma-separated layer widths")
    p.add_argument("--pool-layers", type=_int_list, help="layers followed by 2x2 max pooling, e.g. 1,2,3")
    p.add_argument("--head", choices=("patch", "pixel"))
    p.add_argument("--precision", choices=("float32", "float64"))


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="se2gcnn", description="SE(2,N) group-equivariant CNN toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="write a freshly initialized model file")
    _add_common(p)
    _add_network_flags(p)
    p.add_argument("--input-channels", type=_positive_int)
    p.add_argument("--out", help="model file to write")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_common(p)
    p.add_argument("--data", help="dataset directory written by 'synth'")
    p.add_argument("--model", help="starting model file; omit to build one from the network flags")
    _add_network_flags(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--augment", choices=AUGMENTATIONS)
    p.add_argument("--log-every", type=_positive_int)
    p.add_argument("--log", help="also write the loss lines to this file")
    p.add_argument("--out", help="trained model file to write")

    p = sub.add_parser("eval", help="print test metrics for a model on a dataset")
    _add_common(p, seed=False)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--tta", choices=("none", "transpose", "rot90"))
    p.add_argument("--out", help="also write the metrics lines to this file")

    p = sub.add_parser("verify", help="equivariance, gradient and weight-count report")
    _add_common(p)
    p.add_argument("--model", help="model to check for chain invariance")
    p.add_argument("--n-orientations", type=int, help="N for layer checks when no model is given")
    p.add_argument("--skip-gradients", action="store_const", const=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--generator", choices=sorted(GENERATORS))
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--out")
    p.add_argument("--dump", type=int, help="also write this many samples as PGM/PPM images")

    p = sub.add_parser("rotate", help="apply U_g (image) or L_g (SE(2) image) to a tensor file")
    _add_common(p, seed=False)
    p.add_argument("--input", help="SE2T tensor, or PGM/PPM image")
    p.add_argument("--out")
    p.add_argument("--theta", type=float, help="rotation angle in radians")
    p.add_argument("--tx", type=float)
    p.add_argument("--ty", type=float)
    p.add_argument("--kind", choices=("image", "se2"), help="image: [H,W(,C)]; se2: [H,W,N,C]")
    p.add_argument("--n-orientations", type=int, help="check that --theta is in the N-sampling")

    p = sub.add_parser("dump-operator", help="print rotation-operator triplets 'row col value'")
    _add_common(p, seed=False)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--n-orientations", type=int)
    p.add_argument("--out")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def _apply_config(sub: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    """Fill flags that were not given on the command line from ``--config``."""
    actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    for line_no, line in enumerate(Path(args.config).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        dest = key.strip().lstrip("-").replace("-", "_")
        if not sep or dest not in actions:
            raise UsageError(f"{args.config}:{line_no}: unknown key {key.strip()!r}")
        if getattr(args, dest) is not None:
            continue
        action = actions[dest]
        value = value.strip()
        try:
            if isinstance(action, argparse._StoreConstAction):
                parsed = value.lower() in ("1", "true", "yes")
            else:
                parsed = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}:{line_no}: bad value for {key.strip()}: {exc}")
        if action.choices is not None and parsed not in action.choices:
            raise UsageError(f"{args.config}:{line_no}: {key.strip()} must be one of {sorted(action.choices)}")
        setattr(args, dest, parsed)


def resolve_args(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(_subparser(parser, args.command), args)
    for key, value in DEFAULTS[args.command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if hasattr(args, "seed") and args.seed is None:
        env = os.environ.get("SE2_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"SE2_SEED must be an integer, got {env!r}")
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _network_config(args) -> NetworkConfig:
    N = args.n_orientations
    if N is None or N < 1:
        raise UsageError(f"--n-orientations must be a positive integer, got {N}")
    try:
        return NetworkConfig(N=N, input_channels=getattr(args, "input_channels", 3) or 3,
                             channels=args.channels, pool_layers=args.pool_layers, head=args.head,
                             precision=args.precision)
    except ValueError as exc:
        raise UsageError(str(exc))


def _emit(lines: list[str], out: str | None = None) -> None:
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        atomic_write_bytes(out, text.encode())


def cmd_build(args) -> int:
    _require(args, "out")
    cfg = _network_config(args)
    model = init_weights(build_network(cfg), args.seed)
    save_model(model, args.out)
    counts = count_weights(model)
    _emit([f"model={args.out} N={cfg.N} seed={args.seed} " + " ".join(f"{k}={v}" for k, v in counts.items())])
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    if args.model:
        model = load_model(args.model)
    else:
        if args.n_orientations is None:
            raise UsageError("give --model or --n-orientations")
        model = init_weights(build_network(_network_config(args)), args.seed)
    N = model.config.N
    if args.augment == "rot90" and N != 1:
        raise UsageError("--augment rot90 is reserved for the N=1 baseline; the G-CNN handles rotations itself")
    try:
        settings = TrainSettings(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                                 iterations=args.iterations, augmentation=args.augment, seed=args.seed,
                                 log_every=args.log_every)
    except ValueError as exc:
        raise UsageError(str(exc))
    data = load_dataset(args.data)
    lines: list[str] = []

    def log(line: str) -> None:
        lines.append(line)
        print(line, flush=True)

    try:
        train(model, data, settings, log=log)
    except TrainingDiverged as exc:
        print(f"error: {exc}; try a smaller --lr", file=sys.stderr)
        return EXIT_VERIFY
    save_model(model, args.out)
    if args.log:
        atomic_write_bytes(args.log, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "model", "data")
    model = load_model(args.model)
    data = load_dataset(args.data)
    metrics = evaluate(model, data, tta=args.tta)
    _emit([f"{k}={v:.6f}" for k, v in metrics.items()], args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.model:
        model = load_model(args.model)
        N = model.config.N
    else:
        N = args.n_orientations
        if N is None or N < 1:
            raise UsageError(f"--n-orientations must be a positive integer, got {N}")
        model = None
    lines = []
    ok = True

    reports = harness.layer_suite(N, seed=args.seed)
    if model is not None:
        cfg = model.config
        size = 8 * 2 ** len(cfg.pool_layers)
        f = harness.smooth_image((1, size, size, cfg.input_channels), args.seed)
        reports.append(harness.chain_invariance_check(model, f, GroupElement((0, 0), math.pi / 2)))
    else:
        reports += harness.chain_suite(seed=args.seed)
    if N >= 2:
        reports.append(harness.between_samples_residual(N, seed=args.seed))
    for r in reports:
        lines.append(r.key_values())
        ok &= r.passed

    if not args.skip_gradients:
        for layer in harness.AUDITED_LAYERS:
            for r in harness.gradient_audit(layer, seed=args.seed, N=max(N, 1)):
                lines.append(r.key_values())
                ok &= r.passed

    if N in TABLE_TOTALS:
        counts = count_weights(build_network(NetworkConfig(N=N)))
        expected = TABLE_TOTALS[N]
        match = counts["total"] == expected
        lines.append(f"check=weight_count N={N} total={counts['total']} expected={expected} passed={int(match)}")
        ok &= match

    width = max(len(r.name) for r in reports)
    print("check".ljust(width), "transform".ljust(20), "rel_error".rjust(12), " class         result")
    for r in reports:
        g = r.transform
        status = "REPORTED" if r.tolerance is None else "PASS" if r.passed else "FAIL"
        if r.expect_fail:
            status += " (expected fail)" if r.passed else " (unexpectedly invariant)"
        desc = f"th={g.index}/{g.sampling.N} t=({g.x[0]:g},{g.x[1]:g})"
        print(r.name.ljust(width), desc.ljust(20), f"{r.rel_error:12.3e}", f" {r.exactness:13s}", status)
    for line in lines:
        print(line)
    print(f"verify={'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_synth(args) -> int:
    _require(args, "out")
    data = GENERATORS[args.generator](args.count, args.seed)
    save_dataset(data, args.out)
    if args.dump:
        for i in range(min(args.dump, len(data))):
            write_netpbm(Path(args.out) / f"sample_{i:03d}.ppm", data.patches[i])
    pos = float(np.mean(data.labels))
    _emit([f"dataset={args.out} generator={args.generator} count={len(data)} seed={args.seed} "
           f"positive_fraction={pos:.4f}"])
    return EXIT_OK


def cmd_rotate(args) -> int:
    _require(args, "input", "out")
    src = Path(args.input)
    if src.suffix.lower() in (".pgm", ".ppm"):
        arr = read_netpbm(src)
    else:
        arr = load_tensor(src)
    g = GroupElement((args.tx, args.ty), args.theta)
    if args.kind == "se2":
        if arr.ndim not in (4, 5):
            raise UsageError(f"--kind se2 needs a [H,W,N,C] tensor, got shape {arr.shape}")
        out = apply_L(g, arr)
    else:
        if args.n_orientations:
            OrientationSampling(args.n_orientations).index_of(g.theta)
        out = apply_U(g, arr)
    save_tensor(args.out, np.asarray(out))
    _emit([f"out={args.out} shape={','.join(map(str, out.shape))}"])
    return EXIT_OK


def cmd_dump_operator(args) -> int:
    if args.kernel_size < 1 or args.kernel_size % 2 == 0:
        raise UsageError("--kernel-size must be odd and positive")
    if args.n_orientations < 1:
        raise UsageError("--n-orientations must be a positive integer")
    text = build_rotation_operator(args.kernel_size, args.n_orientations).triplets_text()
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "synth": cmd_synth,
    "rotate": cmd_rotate,
    "dump-operator": cmd_dump_operator,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = resolve_args(parser, argv)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"se2gcnn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TensorFormatError, ModelFormatError) as exc:
        print(f"se2gcnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining ValueErrors come from malformed arguments (e.g. off-grid angles)
        print(f"se2gcnn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
