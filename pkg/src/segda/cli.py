"""``segda`` command line.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
Diagnostics go to stderr; results are JSON files under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .etf import ClassMemory, UnsupportedDimensionError, make_etf, verify_etf
from .networks import load_checkpoint, save_checkpoint
from .synthdata import SceneConfigError, write_benchmark

log = logging.getLogger("segda")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; usage problems are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segda", description="Desk-scale segment-representation domain adaptation.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment config JSON")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (overrides SEGDA_SEED and the config)")

    sp = sub.add_parser("synth", help="write the synthetic benchmark to disk")
    common(sp)
    sp = sub.add_parser("train-source", help="source-domain training with the fixed classifier")
    common(sp)
    sp = sub.add_parser("adapt", help="target adaptation from a source checkpoint")
    common(sp)
    sp.add_argument("--source", required=True, help="source checkpoint directory")
    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--split", default="target_val", choices=["source_train", "source_val", "target_train", "target_val"])
    sp = sub.add_parser("verify-etf", help="check simplex geometry of the fixed classifier")
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--dim", type=int, required=True)
    sp.add_argument("--rotation-seed", type=int, default=1)
    sp.add_argument("--tolerance", type=float, default=1e-9)
    sp.add_argument("--out", help="report file (default: stdout)")
    sp = sub.add_parser("ablate", help="adaptation ablation grid on a shared source model")
    common(sp)
    sp.add_argument("--variants", help=f"comma-separated subset of {','.join(pipeline.ABLATIONS)}")
    sp.add_argument("--supervised-target", action="store_true", help="add a supervised-on-target reference row")
    return p


# config and artifacts

def resolve_seed(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("SEGDA_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise pipeline.ConfigError(f"SEGDA_SEED must be an integer, got {env!r}") from None


def load_config(path: str, seed: int | None) -> pipeline.ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise pipeline.ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise pipeline.ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise pipeline.ConfigError(f"{p}: top level must be an object")
    cfg = pipeline.ExperimentConfig.from_dict(raw)
    if seed is not None:
        # the master seed drives both the data and the model streams
        data = cfg.data.__class__(**{**cfg.data.__dict__, "seed": seed})
        cfg = cfg.with_overrides(seed=seed, data=data)
    return cfg


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=pipeline._json_default) + "\n")


def write_snapshot(cfg: pipeline.ExperimentConfig, out: Path, command: str) -> None:
    _dump({"command": command, "config": cfg.to_dict()}, out / "effective_config.json")


def save_model(directory: Path, cfg: pipeline.ExperimentConfig, pixel, clf, memory: ClassMemory | None) -> None:
    arrays = pixel.state()
    groups = {k: p.group for k, p in pixel.params.items()}
    if clf.head is not None:
        arrays.update(clf.head.state())
        groups.update({k: p.group for k, p in clf.head.params.items()})
    if memory is not None:
        arrays["memory.sums"] = memory.sums
        arrays["memory.counts"] = memory.counts.astype(np.float64)
    save_checkpoint(directory, arrays, cfg.to_dict(), groups)


def load_model(directory, cfg: pipeline.ExperimentConfig):
    if not (Path(directory) / "manifest.json").is_file():
        raise pipeline.ConfigError(f"no checkpoint manifest in {directory}")
    arrays, manifest = load_checkpoint(directory)
    saved = pipeline.ExperimentConfig.from_dict(manifest["config"])
    # architecture and head come from the checkpoint, the rest from the run config
    cfg = cfg.with_overrides(arch=saved.arch, head=saved.head, rotation_seed=saved.rotation_seed)
    pixel, clf = pipeline.build_models(cfg)
    pixel.load_state(arrays)
    if clf.head is not None:
        clf.head.load_state(arrays)
    memory = None
    if "memory.sums" in arrays:
        memory = ClassMemory(arrays["memory.sums"].copy(), arrays["memory.counts"].astype(np.int64))
    return cfg, pixel, clf, memory


# commands

def cmd_synth(cfg, args) -> None:
    write_benchmark(cfg.data, args.out)


def cmd_train_source(cfg, args) -> None:
    out = Path(args.out)
    data = pipeline.load_data(cfg)
    src = pipeline.train_source(cfg, data)
    save_model(out / "checkpoint", cfg, src.pixel, src.classifier, src.memory)
    pipeline.write_jsonl(src.log, out / "log.jsonl")
    report = {split: pipeline.evaluate(src.pixel, src.classifier, data[split]).to_dict()
              for split in ("source_val", "target_val") if data.get(split)}
    _dump(report, out / "report.json")


def cmd_adapt(cfg, args) -> None:
    out = Path(args.out)
    cfg, pixel, clf, memory = load_model(args.source, cfg)
    if memory is None:
        raise pipeline.ConfigError(f"{args.source} has no class memory; train-source writes one")
    data = pipeline.load_data(cfg)
    src = pipeline.SourceArtifacts(pixel, clf, memory, [], cfg)
    ad = pipeline.adapt_target(cfg, src, data)
    save_model(out / "checkpoint", cfg, ad.pixel, ad.classifier, memory)
    pipeline.write_jsonl(ad.log, out / "log.jsonl")
    report = pipeline.evaluate(ad.pixel, ad.classifier, data["target_val"]).to_dict()
    report["counters"] = ad.counters
    _dump(report, out / "report.json")


def cmd_eval(cfg, args) -> None:
    cfg, pixel, clf, _ = load_model(args.checkpoint, cfg)
    data = pipeline.load_data(cfg)
    report = pipeline.evaluate(pixel, clf, data[args.split], with_nc=True)
    _dump({"split": args.split, **report.to_dict()}, Path(args.out) / "report.json")


def cmd_ablate(cfg, args) -> None:
    variants = pipeline.ABLATIONS
    if args.variants:
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [n for n in names if n not in pipeline.ABLATIONS]
        if unknown:
            raise pipeline.ConfigError(f"unknown variants {unknown}; choose from {list(pipeline.ABLATIONS)}")
        variants = {n: pipeline.ABLATIONS[n] for n in names}
    result = pipeline.run_ablation(cfg, variants, supervised_target=args.supervised_target)
    _dump(result, Path(args.out) / "ablation.json")


COMMANDS = {"synth": cmd_synth, "train-source": cmd_train_source, "adapt": cmd_adapt,
            "eval": cmd_eval, "ablate": cmd_ablate}
VALIDATION_ERRORS = (pipeline.ConfigError, SceneConfigError, UnsupportedDimensionError)


def _verify_etf(args) -> int:
    try:
        if args.classes < 2 or args.dim < 1:
            raise pipeline.ConfigError("need --classes >= 2 and --dim >= 1")
        etf = make_etf(args.classes, args.dim, args.rotation_seed)
    except VALIDATION_ERRORS as exc:
        print(f"segda: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = verify_etf(etf, args.tolerance)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK if report["pass"] else EXIT_RUNTIME


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "verify-etf":
        return _verify_etf(args)

    try:
        cfg = load_config(args.config, resolve_seed(args.seed))
        out = Path(args.out)
        write_snapshot(cfg, out, args.command)
    except VALIDATION_ERRORS as exc:
        parser.print_usage(sys.stderr)
        print(f"segda: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"segda: cannot write to {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"segda: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001  every failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"segda: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
