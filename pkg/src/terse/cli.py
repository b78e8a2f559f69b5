"""``terse`` command line: experiments, reports and checks.

Exit codes: 0 ok, 1 runtime failure, 2 invalid configuration.
"""
import argparse
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

from . import config as config_mod
from .config import ConfigError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
LOCK_NAME = ".terse.lock"

# flags that map directly onto RunConfig keys
FLAG_KEYS = {
    "data_dir": str, "seed": int, "cycles": int, "baseline": str, "per_class_capacity": int,
    "increment_total": int, "target_epochs": float, "synth_batch": int, "background": str,
}


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


class OutputLocked(RuntimeError):
    pass


@contextmanager
def locked(out):
    """Hold an exclusive lock file in ``out`` for the duration of a run."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{out} is in use by another run (remove {lock} if it is stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _parser():
    p = argparse.ArgumentParser(prog="terse", description="Experiments, reports and gradient checks.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
        sp.add_argument("--data-dir", dest="data_dir")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        return sp

    common(sub.add_parser("prepare-data", help="write the bundled MNIST sample as IDX files"), out=False)
    common(sub.add_parser("train-baseline", help="train the MNIST-only target"))
    for name, what in (("run-terse", "adversarial cycles"), ("run-random-baseline", "random-affine comparator")):
        sp = common(sub.add_parser(name, help=what))
        sp.add_argument("--baseline", help="baseline target checkpoint (trained in-process if omitted)")
        sp.add_argument("--cycles", type=int)
        sp.add_argument("--per-class-capacity", dest="per_class_capacity", type=int)
        sp.add_argument("--increment-total", dest="increment_total", type=int)
        sp.add_argument("--target-epochs", dest="target_epochs", type=float)
        sp.add_argument("--synth-batch", dest="synth_batch", type=int)
        sp.add_argument("--background", choices=["black", "gray"])

    sp = common(sub.add_parser("hardness-report", help="hardness histogram of generated composites"))
    sp.add_argument("--target", required=True, help="frozen target checkpoint")
    sp.add_argument("--generator", choices=["learned", "random"], required=True)
    sp.add_argument("--synth", help="synthesizer checkpoint for the learned generator")
    sp.add_argument("--train-steps", type=int, default=0,
                    help="train a fresh synthesizer against the target for this many steps")
    sp.add_argument("-n", type=int, default=2000)

    sp = common(sub.add_parser("export-samples", help="dump generated composites as images"))
    sp.add_argument("--synth", help="synthesizer checkpoint (uniform-random parameters if omitted)")
    sp.add_argument("--target", help="target checkpoint used to score hardness")
    sp.add_argument("-n", type=int, default=100)
    sp.add_argument("--format", choices=["pgm", "png"], default="pgm")

    sp = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), out=False)
    sp.add_argument("--out", help="optional directory for the report")
    return p


def resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "out", None):
        overrides["out"] = str(args.out)
    return config_mod.load(args.config, overrides)


def _write_config(out, cfg):
    (Path(out) / "config.txt").write_text(cfg.dumps(), encoding="utf-8")


def _baseline_target(cfg, train):
    from .adversary import train_baseline
    from .nets import TargetNet, load_checkpoint

    if cfg.baseline:
        return load_checkpoint(cfg.baseline, TargetNet())
    _log(f"training baseline target for {cfg.baseline_epochs:g} epochs")
    return train_baseline(train, cfg)


def _data_dir(cfg):
    """The configured data directory, materialized from the bundled sample if empty."""
    from .data import MNIST_FILES, write_bundled_mnist

    path = Path(cfg.data_dir)
    if not all((path / f).exists() for pair in MNIST_FILES.values() for f in pair):
        _log(f"writing bundled MNIST sample to {path}")
        write_bundled_mnist(path)
    return path


def cmd_prepare_data(args, cfg):
    path = _data_dir(cfg)
    print(path)
    return EXIT_OK


def cmd_train_baseline(args, cfg):
    from .adversary import MetricsWriter, baseline_row, eval_sets, train_baseline
    from .data import load_mnist
    from .nets import save_checkpoint

    data = _data_dir(cfg)
    with locked(cfg.out) as out:
        _write_config(out, cfg)
        train = load_mnist(data, "train")
        target = train_baseline(train, cfg)
        save_checkpoint(out / "baseline.ckpt", target)
        row = baseline_row(target, eval_sets(cfg, data), cfg)
        MetricsWriter(out / "metrics.csv").append(row)
        _log(f"baseline: acc_mnist {row.acc_mnist:.4f} acc_affine {row.acc_affine:.4f}")
    return EXIT_OK


def _cmd_run(cfg, method):
    from .adversary import eval_sets, run_cycles
    from .data import load_mnist
    from .nets import save_checkpoint

    data = _data_dir(cfg)
    with locked(cfg.out) as out:
        _write_config(out, cfg)
        train = load_mnist(data, "train")
        target = _baseline_target(cfg, train)
        _, state = run_cycles(cfg, target, train, eval_sets(cfg, data), out=out, log=_log, method=method)
        save_checkpoint(out / "target.ckpt", state.target)
        if method == "terse":
            save_checkpoint(out / "synth.ckpt", state.synth)
            if state.disc is not None:
                save_checkpoint(out / "disc.ckpt", state.disc)
    return EXIT_OK


def cmd_run_terse(args, cfg):
    return _cmd_run(cfg, "terse")


def cmd_run_random_baseline(args, cfg):
    return _cmd_run(cfg, "random")


def _synth(args, cfg, target, train):
    from .adversary import train_generator
    from .nets import SynthesizerNet, load_checkpoint

    if args.synth:
        return load_checkpoint(args.synth, SynthesizerNet(cfg.ranges()), cfg.ranges())
    if getattr(args, "train_steps", 0) > 0:
        return train_generator(target, train, cfg, args.train_steps, log=_log)
    return None


def cmd_hardness_report(args, cfg):
    from .adversary import hardness_report, write_histogram
    from .data import load_mnist
    from .nets import TargetNet, load_checkpoint

    if args.n <= 0:
        raise ConfigError("n", f"must be positive, got {args.n}")
    if args.generator == "learned" and not args.synth and args.train_steps <= 0:
        raise ConfigError("synth", "the learned generator needs --synth or --train-steps")
    data = _data_dir(cfg)
    with locked(cfg.out) as out:
        _write_config(out, cfg)
        train = load_mnist(data, "train")
        target = load_checkpoint(args.target, TargetNet())
        synth = _synth(args, cfg, target, train) if args.generator == "learned" else None
        rows, h = hardness_report(target, train, cfg, args.generator, args.n, cfg.seed, synth)
        write_histogram(out / f"hardness_{args.generator}.csv", rows)
        _log(f"{args.generator}: mean hardness {h.mean():.4f} over {len(h)} composites")
    return EXIT_OK


def cmd_export_samples(args, cfg):
    from .adversary import generate, hardness_of
    from .data import CompositeSample, export_samples, load_mnist
    from .nets import TargetNet, load_checkpoint

    if args.n <= 0:
        raise ConfigError("n", f"must be positive, got {args.n}")
    data = _data_dir(cfg)
    with locked(cfg.out) as out:
        _write_config(out, cfg)
        train = load_mnist(data, "train")
        synth = _synth(args, cfg, None, train)
        images, labels, _ = generate(synth, train, cfg, args.n, cfg.seed)
        h = [float("nan")] * args.n
        if args.target:
            h = hardness_of(load_checkpoint(args.target, TargetNet()), images, labels)
        provenance = "synthesized" if synth is not None else "random-augment"
        samples = [CompositeSample(images[k], int(labels[k]), provenance, 0, k, float(h[k]))
                   for k in range(args.n)]
        export_samples(samples, out / "samples", args.format)
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    from .checks import run_suite
    from .data import MNIST_FILES, load_mnist, write_bundled_mnist

    path = Path(cfg.data_dir)
    if all((path / f).exists() for f in MNIST_FILES["train"]):
        train = load_mnist(path, "train")
    else:
        with tempfile.TemporaryDirectory() as tmp:
            train = load_mnist(write_bundled_mnist(tmp), "train")
    results = run_suite(train, seed=cfg.seed, log=print)
    if args.out:
        with locked(args.out) as out:
            (out / "gradcheck.txt").write_text("".join(r.line() + "\n" for r in results))
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-baseline": cmd_train_baseline,
    "run-terse": cmd_run_terse,
    "run-random-baseline": cmd_run_random_baseline,
    "hardness-report": cmd_hardness_report,
    "export-samples": cmd_export_samples,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        _log(f"terse: invalid configuration: {exc}")
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        _log(f"terse: invalid configuration: {exc}")
        return EXIT_CONFIG
    except (RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        _log(f"terse {args.command}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
