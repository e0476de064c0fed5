"""Command-line entry point: ``kwtse <command> [--config PATH] [--seed N] [--set k=v ...] [--out DIR]``.

Commands: simulate, train-kce, train-tse, infer, evaluate, sweep, grad-check,
experiment.  Exit status is 0 on success, 2 for configuration errors and 1
for runtime failures.  When ``--out`` is omitted, output goes under
``$KWTSE_OUT`` (default ``./runs``) in a directory named after the command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

log = logging.getLogger("kwtse")

OUT_ENV = "KWTSE_OUT"
COMMANDS = ("simulate", "train-kce", "train-tse", "infer", "evaluate", "sweep", "grad-check", "experiment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kwtse", description="Keyword-cued target speaker extraction")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="section.key = value file")
    common.add_argument("--seed", type=int, help="base seed (overrides run.seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable, applied last")
    common.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write a manifest of evaluation mixtures with WAVs")
    sub.add_parser("train-kce", parents=[common], help="train the keyword cue encoder")
    p = sub.add_parser("train-tse", parents=[common], help="train the extraction backbone with a frozen encoder")
    p.add_argument("--kce", type=Path, required=True, help="directory holding kce.ckpt")
    p = sub.add_parser("infer", parents=[common], help="detect the cue and extract the target from one WAV")
    p.add_argument("--kce", type=Path, required=True)
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--mixture", type=Path, required=True, help="mixture WAV")
    p.add_argument("--cue", required=True, help="keyword words separated by spaces")
    p.add_argument("--lexicon", type=Path, help="lexicon TSV (defaults to the configured synthetic world)")
    for name in ("evaluate", "sweep"):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a manifest or the configured held-out sets")
        p.add_argument("--kce", type=Path, required=True)
        if name == "evaluate":
            p.add_argument("--backbone", type=Path, required=True)
        p.add_argument("--manifest", type=Path, help="manifest.jsonl from `simulate` (default: generate)")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--max-entries", type=int, default=12, help="probed coordinates per parameter")
    sub.add_parser("experiment", parents=[common], help="train both stages and evaluate the toy world")
    return parser


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _held_out(cfg):
    from .experiment import build_pools, build_world

    world = build_world(cfg)
    return world, build_pools(cfg, world)


def cmd_simulate(cfg, args, out: Path) -> None:
    from .corpus import make_eval_set, spec_to_json, write_manifest
    from .textfront import save_lexicon

    world, (_, held_out) = _held_out(cfg)
    d = cfg["data"]
    samples = make_eval_set(world, held_out, d["n_simulate"], seed=1000 * cfg.seed + 5,
                            protocol=d["simulate_protocol"], negative_rate=d["negative_rate"])
    path = write_manifest(samples, out)
    save_lexicon(world.lexicon, out / "lexicon.tsv")
    (out / "world.json").write_text(spec_to_json(world.spec), encoding="utf-8")
    print(f"wrote {len(samples)} samples to {path}")


def cmd_train_kce(cfg, args, out: Path) -> None:
    from .experiment import build_pools, build_world, new_kce, train_config
    from .kce import save_kce
    from .pipeline import train_kce

    world = build_world(cfg)
    pool, _ = build_pools(cfg, world)
    kce = new_kce(cfg, world)
    history = train_kce(train_config(cfg, "kce"), world, pool, kce, out / "kce_log.jsonl")
    save_kce(kce, out / "kce")
    if history:
        print(f"trained {len(history)} steps, final loss {history[-1]['total']:.4f}")
    print(f"checkpoint in {out / 'kce'}")


def cmd_train_tse(cfg, args, out: Path) -> None:
    from .experiment import build_pools, build_world, new_backbone, train_config
    from .extractor import save_backbone
    from .kce import load_kce
    from .pipeline import train_backbone

    world = build_world(cfg)
    pool, _ = build_pools(cfg, world)
    kce = load_kce(args.kce)
    backbone = new_backbone(cfg, kce.config)
    history = train_backbone(train_config(cfg, "tse"), world, pool, kce, backbone, out / "tse_log.jsonl")
    save_backbone(backbone, out / "backbone")
    if history:
        print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.4f}")
    print(f"checkpoint in {out / 'backbone'}")


def cmd_infer(cfg, args, out: Path) -> None:
    from .extractor import load_backbone
    from .kce import load_kce
    from .pipeline import infer
    from .signal import read_wav, write_wav
    from .textfront import load_lexicon, phonemize

    if args.lexicon is not None:
        lexicon = load_lexicon(args.lexicon)
    else:
        from .experiment import build_world

        lexicon = build_world(cfg).lexicon
    cue = phonemize(lexicon, args.cue.split())
    result = infer(read_wav(args.mixture), cue, load_kce(args.kce), load_backbone(args.backbone),
                   cfg["eval"]["tau"], cfg["eval"]["scoring"])
    write_wav(out / "output.wav", result.waveform)
    _write_json(out / "detection.json", result.detection.to_json())
    print(f"detected={result.detection.detected} score={result.detection.score:.4f} -> {out / 'output.wav'}")


def _eval_sets(cfg, args):
    from .corpus import read_manifest
    from .experiment import detection_set, extraction_set

    if args.manifest is not None:
        samples = read_manifest(args.manifest)
        return [s for s in samples if s.keyword_present], samples
    world, (_, held_out) = _held_out(cfg)
    return extraction_set(cfg, world, held_out), detection_set(cfg, world, held_out)


def cmd_evaluate(cfg, args, out: Path) -> None:
    from .evaluation import EvalReport
    from .experiment import evaluate_models
    from .extractor import load_backbone
    from .kce import load_kce

    extraction, detection = _eval_sets(cfg, args)
    metrics = evaluate_models(cfg, load_kce(args.kce), load_backbone(args.backbone), extraction, detection)
    report = EvalReport(**metrics["report"])
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    print(report.to_text())


def cmd_sweep(cfg, args, out: Path) -> None:
    from .evaluation import format_sweep, score_samples, sweep_thresholds
    from .kce import load_kce

    _, detection = _eval_sets(cfg, args)
    scored, _ = score_samples(load_kce(args.kce), detection)
    rows = sweep_thresholds(scored, cfg["eval"]["taus"], cfg["eval"]["scoring"])
    table = format_sweep(rows)
    (out / "sweep.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "sweep.json", [r.__dict__ for r in rows])
    print(table)


def cmd_grad_check(cfg, args, out: Path) -> int:
    from .gradsuite import run_suite

    reports = run_suite(args.max_entries)
    lines = [f"{name:<20} {'PASS' if r.passed else 'FAIL'}  max rel err {r.max_error:.3e}  tol {r.tolerance:.0e}"
             for name, r in reports.items()]
    (out / "grad_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_experiment(cfg, args, out: Path) -> None:
    from .experiment import run_toy_experiment

    metrics = run_toy_experiment(cfg, out, progress=print)
    print(json.dumps(metrics["report"], indent=1, sort_keys=True))


HANDLERS = {
    "simulate": cmd_simulate,
    "train-kce": cmd_train_kce,
    "train-tse": cmd_train_tse,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args)
    (out / "config.snapshot").write_text(cfg.snapshot(), encoding="utf-8")
    np.seterr(all="ignore")
    try:
        status = HANDLERS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - categorised exit status for any runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
