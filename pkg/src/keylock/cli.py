"""``keylock`` command line.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
Keys are always passed as files, never as literals.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .blockshuffle import ShuffleConfig, read_ppm, shuffle_files
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import load_cifar10, sample_subset, write_manifest
from .keycore import generate_key, key_space_size, load_key, save_key
from .protect import (ProtectionConfig, derive_seed, evaluate, finetune_attack,
                      run_protocol, train_protected)
from .report import render_report

__all__ = ["main", "dispatch", "render_report"]

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _add_desk_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=_positive, default=30)
    p.add_argument("--batch-size", type=_positive, default=128)
    p.add_argument("--n-train", type=_positive, default=10000)
    p.add_argument("--max-lr", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keylock", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="write a new secret key file")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, help="derive the key deterministically from this seed")

    p = sub.add_parser("keyspace", help="print (channels*block*block)!")
    p.add_argument("--channels", required=True, type=_positive)
    p.add_argument("--block", required=True, type=_positive)

    p = sub.add_parser("shuffle", help="block-shuffle a directory of PPM images")
    p.add_argument("--in", dest="src", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--key", required=True, type=Path)
    p.add_argument("--block", required=True, type=_positive)
    p.add_argument("--invert", action="store_true", help="undo a previous shuffle")

    p = sub.add_parser("train", help="train a protected model")
    p.add_argument("--data", required=True, type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--key", type=Path)
    g.add_argument("--plain", action="store_true", help="train the unprotected baseline")
    p.add_argument("--block", type=_positive, default=4)
    p.add_argument("--out", required=True, type=Path)
    _add_desk_flags(p)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--key", type=Path)
    g.add_argument("--plain", action="store_true")
    p.add_argument("--block", type=_positive, help="block size if the checkpoint has none")
    p.add_argument("--n-test", type=_positive)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attack", help="fine-tuning attack with a forged key")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--forge-seed", required=True, type=int)
    p.add_argument("--subset", required=True, type=_positive)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--block", type=_positive)
    p.add_argument("--n-test", type=_positive)
    p.add_argument("--max-lr", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="save the adapted model")
    p.add_argument("--manifest", type=Path, help="write the adversary subset indices")

    p = sub.add_parser("protocol", help="run the full protection experiment")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--block-sizes", type=_int_list, default=(2, 4, 8))
    p.add_argument("--n-test", type=_positive, default=2000)
    p.add_argument("--n-forged", type=_positive, default=5)
    p.add_argument("--attack-sizes", type=_int_list, default=(100, 500, 1000))
    p.add_argument("--attack-epochs", type=int, default=30)
    p.add_argument("--no-baseline", action="store_true")
    p.add_argument("--table", type=Path, help="also write the text table here")
    _add_desk_flags(p)
    return parser


def _config(args, **extra) -> ProtectionConfig:
    fields = {k: getattr(args, k) for k in ("epochs", "batch_size", "n_train", "max_lr", "seed")
              if hasattr(args, k)}
    fields.update(extra)
    try:
        return ProtectionConfig(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_keygen(args) -> None:
    save_key(generate_key(args.seed), args.out)
    print(f"wrote key {args.out} (fingerprint {load_key(args.out).fingerprint()})")


def _cmd_keyspace(args) -> None:
    n = key_space_size(args.channels, args.block)
    print(n)
    print(f"{len(str(n))} digits")


def _cmd_shuffle(args) -> None:
    if args.src.resolve() == args.out.resolve():
        raise UsageError("--in and --out must differ")
    paths = sorted(args.src.glob("*.ppm")) + sorted(args.src.glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm images in {args.src}")
    key = load_key(args.key)
    channels = read_ppm(paths[0]).shape[0]
    cfg = ShuffleConfig(args.block, channels)
    written = shuffle_files(paths, args.out, cfg, cfg.permutation(key), inverse=args.invert)
    print(f"{'unshuffled' if args.invert else 'shuffled'} {len(written)} images into {args.out}")


def _cmd_train(args) -> None:
    cfg = _config(args, block_size=args.block, block_sizes=(args.block,))
    key = None if args.plain else load_key(args.key)
    train, _ = load_cifar10(args.data)
    if cfg.n_train < len(train):
        train = sample_subset(train, cfg.n_train, derive_seed(cfg.seed, "train-subset"))
    progress = None
    if args.verbose:
        progress = lambda e, loss, acc: logging.info("epoch %d loss %.4f acc %.4f", e + 1, loss, acc)
    model = train_protected(train, key, cfg, progress=progress)
    save_checkpoint(args.out, model, None if key is None else args.block,
                    None if key is None else key.fingerprint())
    print(f"wrote {args.out}")


def _eval_setup(args):
    ckpt = load_checkpoint(args.model)
    block = args.block or ckpt.block_size
    _, test = load_cifar10(args.data)
    if args.n_test and args.n_test < len(test):
        test = sample_subset(test, args.n_test, derive_seed(args.seed, "test-subset"))
    return ckpt, block, test


def _cmd_eval(args) -> None:
    ckpt, block, test = _eval_setup(args)
    key = None if args.plain else load_key(args.key)
    if key is not None and block is None:
        raise UsageError("checkpoint has no block size; pass --block")
    cfg = ProtectionConfig(block_size=block or 4, block_sizes=())
    acc = evaluate(ckpt.model, test, key, cfg)
    print(f"accuracy {acc:.4f}")


def _cmd_attack(args) -> None:
    ckpt, block, test = _eval_setup(args)
    if block is None:
        raise UsageError("checkpoint has no block size; pass --block")
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    cfg = ProtectionConfig(block_size=block, block_sizes=(), max_lr=args.max_lr, seed=args.seed,
                           epochs=max(args.epochs, 1), attack_epochs=args.epochs)
    train, _ = load_cifar10(args.data)
    if args.subset > len(train):
        raise UsageError(f"--subset larger than the training split ({len(train)})")
    dprime = sample_subset(train, args.subset, derive_seed(args.forge_seed, "dprime"))
    if args.manifest:
        write_manifest(args.manifest, dprime)
    forged = generate_key(args.forge_seed)
    adapted, acc = finetune_attack(ckpt.model, dprime, forged, args.epochs, cfg, test)
    if args.out:
        save_checkpoint(args.out, adapted, block, forged.fingerprint())
    print(f"attack |D'|={args.subset} epochs={args.epochs} accuracy {acc:.4f}")


def _cmd_protocol(args) -> None:
    cfg = _config(args, block_size=args.block_sizes[0] if args.block_sizes else 4,
                  block_sizes=args.block_sizes, n_test=args.n_test, n_forged=args.n_forged,
                  attack_sizes=args.attack_sizes, attack_epochs=args.attack_epochs)
    dataset = load_cifar10(args.data)
    report = run_protocol(dataset, cfg, baseline=not args.no_baseline)
    report.save(args.out)
    table = render_report(report)
    if args.table:
        args.table.write_text(table, encoding="utf-8")
    sys.stdout.write(table)


COMMANDS = {
    "keygen": _cmd_keygen,
    "keyspace": _cmd_keyspace,
    "shuffle": _cmd_shuffle,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "attack": _cmd_attack,
    "protocol": _cmd_protocol,
}


def _thread_cap() -> int | None:
    raw = os.environ.get("KEYLOCK_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"KEYLOCK_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise UsageError(f"KEYLOCK_THREADS must be a positive integer, got {raw!r}")
    return value


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cap = _thread_cap()
        with threadpool_limits(limits=cap):
            COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"keylock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"keylock: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
