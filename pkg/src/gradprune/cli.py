"""Command line entry point: ``gradprune {run,attack,defend,eval,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import GradPruneError
from .experiment import (DEFENSES, ExperimentFailed, aggregate_runs, build_data, load_config,
                         obtain_backdoored_model, run_defense, run_experiment, write_text_atomic)
from .data import make_defender_split
from .metrics import evaluate, reports_to_csv, reports_to_jsonl
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("gradprune")


def _spc_list(text: str):
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--spc expects comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("--spc needs at least one value")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, spc=False, defense=False):
        p.add_argument("--config", required=True, help="flat key = value experiment config")
        p.add_argument("--seed", type=int, help="overrides base_seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint to load")
        if spc:
            p.add_argument("--spc", type=_spc_list, help="samples per class, e.g. 2,10,100")
        if defense:
            p.add_argument("--defense", choices=DEFENSES)

    p = sub.add_parser("run", help="full experiment: attack, defend every (spc, trial), summarize")
    common(p, spc=True, defense=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int, help="parallel trial worker processes")

    p = sub.add_parser("attack", help="train and checkpoint a backdoored model")
    common(p)

    p = sub.add_parser("defend", help="run one defense on a checkpoint")
    common(p, checkpoint=True, spc=True, defense=True)
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("eval", help="ACC / ASR / RA of a checkpoint on the test set")
    common(p, checkpoint=True)

    p = sub.add_parser("report", help="aggregate metrics.jsonl of several runs into one summary CSV")
    p.add_argument("runs", nargs="+", help="run directories or metrics.jsonl files")
    p.add_argument("--out", help="write the summary here instead of stdout")
    return parser


def _config(args, **extra):
    overrides = dict(base_seed=args.seed, output_dir=args.out, **extra)
    return load_config(args.config, **overrides)


def _write_reports(out: Path, reports) -> None:
    write_text_atomic(out / "metrics.jsonl", reports_to_jsonl(reports))
    write_text_atomic(out / "metrics.csv", reports_to_csv(reports))


def cmd_run(args) -> int:
    cfg = _config(args, spc=args.spc, defense=args.defense, trials=args.trials, jobs=args.jobs)
    out = run_experiment(cfg)
    print(out / "summary.csv")
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    data = build_data(cfg)
    trig = cfg.trigger_spec()
    model, _ = obtain_backdoored_model(cfg, data, trig)
    out = Path(cfg.output_dir)
    save_checkpoint(model, out / "backdoored.ckpt")
    report = evaluate(model, data.test, trig, stage="baseline", seed=cfg.base_seed, attack=cfg.attack_name,
                      defense="none")
    _write_reports(out, [report])
    print(report.to_json())
    return 0


def cmd_defend(args) -> int:
    spc = args.spc[0] if args.spc else None
    cfg = _config(args, defense=args.defense)
    spc = spc if spc is not None else cfg.spc[0]
    data = build_data(cfg)
    trig = cfg.trigger_spec()
    model = load_checkpoint(args.checkpoint)
    seed = cfg.base_seed + args.trial
    defender = make_defender_split(data.pool, spc, trig, seed)
    result = run_defense(cfg.defense, model, defender, cfg, seed)
    out = Path(cfg.output_dir)
    tags = dict(trial=args.trial, seed=seed, spc=spc, attack=cfg.attack_name, defense=cfg.defense)
    reports = [evaluate(model, data.test, trig, stage="baseline", **tags),
               evaluate(result.post_prune, data.test, trig, stage="post-prune", **tags),
               evaluate(result.final, data.test, trig, stage="post-finetune", **tags)]
    save_checkpoint(result.final, out / "defended.ckpt")
    if result.trace is not None:
        write_text_atomic(out / "prune_trace.jsonl", result.trace.to_jsonl())
    if result.history is not None:
        write_text_atomic(out / "finetune_history.jsonl", result.history.to_jsonl())
    _write_reports(out, reports)
    for r in reports:
        print(r.to_json())
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = build_data(cfg)
    model = load_checkpoint(args.checkpoint)
    report = evaluate(model, data.test, cfg.trigger_spec(), stage="eval", seed=cfg.base_seed,
                      attack=cfg.attack_name)
    if args.out:
        _write_reports(Path(args.out), [report])
    print(report.to_json())
    return 0


def cmd_report(args) -> int:
    summary = aggregate_runs(args.runs)
    if args.out:
        write_text_atomic(args.out, summary)
    else:
        sys.stdout.write(summary)
    return 0


COMMANDS = {"run": cmd_run, "attack": cmd_attack, "defend": cmd_defend, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ExperimentFailed as exc:
        print(f"gradprune: {exc}", file=sys.stderr)
        return 1
    except GradPruneError as exc:
        print(f"gradprune {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
