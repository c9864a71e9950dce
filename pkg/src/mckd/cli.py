"""Command-line entry point: train | eval | probe | check | export-embeddings.

Exit codes: 0 success, 1 check failure or training divergence, 2 usage or
config errors. The last stderr line is always a machine-parseable summary of
the form ``mckd: status=<ok|fail|error> command=<cmd> detail=<...>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigError, TrainConfig, load_config, resolve_config
from .train import DivergenceError, Trainer, best_network, evaluate, export_embeddings, linear_probe, train

OUTPUT_ROOT_ENV = "MCKD_OUTPUT_ROOT"


def _summary(status: str, command: str, detail: str = "") -> None:
    print(f"mckd: status={status} command={command} detail={detail}", file=sys.stderr)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mckd", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command")
    for name, helptext in (
        ("train", "train a cohort per the config"),
        ("eval", "evaluate a trained checkpoint on its test split"),
        ("probe", "linear-probe transfer accuracy of a trained checkpoint"),
        ("check", "run the oracle/property suite"),
        ("export-embeddings", "dump final-stage embeddings + labels as CSV"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="JSON config path")
        sp.add_argument("--print-config", action="store_true",
                        help="print the fully resolved config and exit")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted-path config overrides")
        if name in ("eval", "probe", "export-embeddings"):
            sp.add_argument("--checkpoint", help="checkpoint directory "
                            "(default: <out_dir>/checkpoint)")
        if name == "probe":
            sp.add_argument("--probe-seed", type=int, default=0)
        if name == "check":
            sp.add_argument("--only", nargs="*", help="subset of check names")
    return p


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config, overrides=args.overrides or [])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not Path(cfg.out_dir).is_absolute():
        raw = dict(cfg.raw)
        raw["out_dir"] = str(Path(root) / cfg.out_dir)
        cfg = TrainConfig(raw)
    return cfg


def _restored_trainer(args) -> tuple[Trainer, Path]:
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is None:
        cfg = _load_cfg(args)
        ckpt = Path(cfg.out_dir) / "checkpoint"
    _, extra = load_checkpoint(ckpt)
    # the stored resolved config rebuilds identical shapes; CLI overrides win
    document = extra.get("config", {})
    cfg = resolve_config(document, overrides=args.overrides or [])
    trainer = Trainer(cfg)
    trainer.load(ckpt)
    return trainer, ckpt


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.print_config:
        print(cfg.to_json())
        _summary("ok", "train", "printed config")
        return 0
    result = train(cfg)
    last = result.records[-1]
    tests = [last.accuracy[f"net{m}/test"] for m in range(cfg.num_networks)]
    best = best_network(tests)
    for m, acc in enumerate(tests):
        print(f"net{m} test accuracy: {acc:.4f}")
    print(f"best network: net{best} ({tests[best]:.4f}); outputs in {result.out_dir}")
    _summary("ok", "train", f"best=net{best} acc={tests[best]:.4f} out={result.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    trainer, ckpt = _restored_trainer(args)
    accs = [evaluate(net, trainer.test_set) for net in trainer.cohort.networks]
    for m, acc in enumerate(accs):
        print(f"net{m} test accuracy: {acc:.4f}")
    best = best_network(accs)
    print(f"best network: net{best}")
    _summary("ok", "eval", f"best=net{best} acc={accs[best]:.4f}")
    return 0


def _cmd_probe(args) -> int:
    trainer, ckpt = _restored_trainer(args)
    accs = [evaluate(net, trainer.test_set) for net in trainer.cohort.networks]
    best = best_network(accs)
    acc = linear_probe(trainer.cohort.networks[best], trainer.train_set, trainer.test_set,
                       seed=args.probe_seed)
    print(f"linear probe on net{best}: {acc:.4f} (full classifier: {accs[best]:.4f})")
    _summary("ok", "probe", f"net=net{best} probe={acc:.4f}")
    return 0


def _cmd_check(args) -> int:
    from .checks import run_checks

    results = run_checks(args.only or None)
    failed = [r for r in results if not r.passed]
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name}"
        if r.detail:
            line += f" ({r.detail})"
        print(line)
    if failed:
        _summary("fail", "check", f"{len(failed)}/{len(results)} checks failed")
        return 1
    _summary("ok", "check", f"{len(results)} checks passed")
    return 0


def _cmd_export(args) -> int:
    trainer, ckpt = _restored_trainer(args)
    out_dir = Path(trainer.cfg.out_dir)
    paths = []
    for m, net in enumerate(trainer.cohort.networks):
        paths.append(export_embeddings(net, trainer.test_set, out_dir / f"embeddings_net{m}.csv"))
    for p in paths:
        print(f"wrote {p}")
    _summary("ok", "export-embeddings", f"files={len(paths)}")
    return 0


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "check": _cmd_check,
    "export-embeddings": _cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code not in (0, None):
            _summary("error", "parse", "unrecognized arguments")
            return 2
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        _summary("error", "none", "no command given")
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        _summary("error", args.command, str(e))
        return 2
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        _summary("fail", args.command, str(e))
        return 1
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        _summary("error", args.command, str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
