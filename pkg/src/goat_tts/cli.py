"""Command-line entry point: ``goat-tts <subcommand> ...``.

Exit codes: 0 success, 2 argument error, 3 missing prerequisite, 4 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ArgumentError, DataError, DependencyError, FormatError, StateError
from .pipeline import (STEPS, PipelineConfig, Run, datagen, eval_table, evaluate, forgetting, forgetting_table,
                       format_table, prompt_from_uid, run_pipeline, synthesize, train)
from .toy_world.io import read_frames

EXIT_OK, EXIT_ARGS, EXIT_DEPENDENCY, EXIT_DATA = 0, 2, 3, 4


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _new_config(args) -> PipelineConfig:
    kv = _overrides(args.set)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.config:
        return PipelineConfig.from_file(args.config, kv)
    return PipelineConfig.from_kv(kv)


def _tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ArgumentError(f"text must be space-separated integer token ids: {text!r}") from exc


def cmd_datagen(args) -> int:
    cfg = _new_config(args)
    bal = datagen(cfg, args.run)
    print(f"wrote {args.run}/data  ({bal['train']} train, {bal['heldout']} held-out, "
          f"{bal['quadruples']['count']} quadruples)")
    rows = [("dialect", "corpus", "pairs", "tts pairs", "quadruples")]
    for d in bal["dialect"]["corpus"]:
        rows.append((d,) + tuple(str(bal["dialect"][k][d]) for k in
                                 ("corpus", "pairs_transcript", "pairs_tts", "quadruples")))
    print(format_table(rows), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = Run(args.run).config()
    steps = list(STEPS) if args.step == "all" else [args.step]
    for step in steps:
        rec = train(cfg, args.run, step)
        loss = rec.get("epoch_loss") or [rec.get("final_loss")]
        freeze = "" if "freeze_ok" not in rec else f"  freeze_ok={rec['freeze_ok']}"
        print(f"{step}: final loss {loss[-1]}{freeze}", flush=True)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = Run(args.run).config()
    if (args.prompt is None) == (args.prompt_uid is None):
        raise ArgumentError("give exactly one of --prompt or --prompt-uid")
    prompt = read_frames(args.prompt) if args.prompt else prompt_from_uid(args.run, args.prompt_uid)
    if args.text == "-":
        # one chunk per input line, pushed as it arrives
        chunks = (_tokens(line) for line in sys.stdin)
    else:
        chunks = [_tokens(args.text)]

    def show(events):
        for ev in events:
            print(json.dumps(ev.to_record(with_time=False)), flush=True)

    summary = synthesize(cfg, args.run, prompt, chunks, args.out, args.mode, args.decode, args.seed,
                         args.checkpoint, on_events=show if args.mode == "streaming" else None)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = Run(args.run).config()
    summary = evaluate(cfg, args.run, args.checkpoint, args.items)
    print(f"token error rate over {summary['scored']} scored items "
          f"({summary['oracle_failed']} oracle failures excluded)")
    print(eval_table(summary), end="")
    return EXIT_OK


def cmd_forget(args) -> int:
    report = forgetting(Run(args.run).config(), args.run)
    print(forgetting_table(report), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_loss_curves, plot_ter_bars
    run = Run(args.run)
    train_reports = []
    for step in STEPS:
        path = run.reports / f"train_{step}.json"
        if path.exists() and step != "cfm":
            train_reports.append(json.loads(path.read_text()))
    if not train_reports:
        raise DependencyError(f"no training reports under {run.reports}: run 'train' first")
    fig_dir = run.reports / "figures"
    fig_dir.mkdir(exist_ok=True)
    made = [plot_loss_curves(train_reports, fig_dir / "loss_curves.png")]
    evals = {p.stem[len("eval_"):]: json.loads(p.read_text()) for p in sorted(run.reports.glob("eval_*.json"))}
    if evals:
        made.append(plot_ter_bars(evals, fig_dir / "ter_by_dialect.png"))
    for p in made:
        print(p)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _new_config(args)
    out = run_pipeline(cfg, args.run, with_forgetting=not args.no_forget, log=lambda m: print(m, flush=True))
    print(eval_table(out["eval"]), end="")
    if "forgetting" in out:
        print(forgetting_table(out["forgetting"]), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="goat-tts", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def run_arg(p):
        p.add_argument("--run", required=True, type=Path, help="run directory")

    def config_args(p):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("datagen", help="generate corpus, pairs and quadruples")
    run_arg(p)
    config_args(p)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="run one training step (or all of them)")
    run_arg(p)
    p.add_argument("--step", required=True, choices=list(STEPS) + ["all"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="synthesize speech tokens and frames for a text")
    run_arg(p)
    p.add_argument("--prompt", type=Path, help="prompt frames file")
    p.add_argument("--prompt-uid", type=int, help="use a corpus utterance as the prompt")
    p.add_argument("--text", required=True, help="token ids, or '-' to stream lines from stdin")
    p.add_argument("--mode", choices=("streaming", "offline"), default="streaming")
    p.add_argument("--decode", choices=("greedy", "sampled"), default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default="generate2", choices=("generate1", "generate2"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="token error rate on held-out utterances")
    run_arg(p)
    p.add_argument("--checkpoint", default="generate2", choices=("generate1", "generate2", "baseline"))
    p.add_argument("--items", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("forget", help="text-ability comparison across the three arms")
    run_arg(p)
    p.set_defaults(fn=cmd_forget)

    p = sub.add_parser("report", help="render loss and TER figures")
    run_arg(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("pipeline", help="datagen, every training step, eval and forget")
    run_arg(p)
    config_args(p)
    p.add_argument("--no-forget", action="store_true", help="skip the baseline arm and forgetting report")
    p.set_defaults(fn=cmd_pipeline)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ArgumentError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
