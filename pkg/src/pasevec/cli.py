"""Command-line entry point.

    pasevec <subcommand> --config <path> [--seed N] [--out DIR] [--force-stage NAME]

Subcommands expose the pipeline stages individually; `run` executes the whole
DAG and is equivalent to chaining them. Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pipeline as pipeline_mod
from .corpus import CorpusError
from .pipeline import PipelineError, Run, load_experiment_config, render_report

CACHE_ENV = "PASEVEC_CACHE_DIR"

STAGE_PREFIXES = {
    "corpus": ("corpus.",),
    "stage1": ("stage1_",),
    "stage2": ("table_aud_",),
    "textref": ("table_txt_",),
    "parallel": ("parallel.",),
    "retrieval": ("retrieval.",),
}


def _build_run(args):
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        raw = _cfg_as_dict(cfg)
        # Drop per-stage seeds so the override reaches every stage.
        for sub in ("synth", "stage1", "stage2", "textref", "align"):
            if isinstance(raw.get(sub), dict):
                raw[sub].pop("seed", None)
        cfg = pipeline_mod.experiment_config_from_dict({**raw, "seed": args.seed})
    out = args.out or os.environ.get(CACHE_ENV) or cfg.out_dir
    run = Run(cfg, out_dir=out)
    if args.force_stage:
        if args.force_stage not in STAGE_PREFIXES:
            raise PipelineError(
                f"unknown stage {args.force_stage!r}; one of {sorted(STAGE_PREFIXES)}"
            )
        for prefix in STAGE_PREFIXES[args.force_stage]:
            for path in run.dir.glob(prefix + "*"):
                if path.is_dir():
                    for child in path.iterdir():
                        child.unlink()
                    path.rmdir()
                else:
                    path.unlink()
    return run


def _cfg_as_dict(cfg):
    import dataclasses

    raw = dataclasses.asdict(cfg)
    raw = {k: v for k, v in raw.items() if v is not None}
    raw.pop("corpus_path", None)
    if cfg.corpus_path is not None:
        raw["corpus_path"] = cfg.corpus_path
    return json.loads(json.dumps(raw, default=list))


def cmd_synth(run, args):
    corpus, _ = run.ensure_corpus()
    print(f"corpus: {corpus.size} segments, {len(corpus.documents)} documents -> {run.corpus_dir()}")


def cmd_train_stage1(run, args):
    for variant in ("full", "merged"):
        if variant == "merged" and "aud_phm_se" not in run.cfg.audio_variants:
            continue
        run.ensure_stage1(variant)
        print(f"stage1[{variant}]: {run.stage1_path(variant)}")


def cmd_train_stage2(run, args):
    for name in run.cfg.audio_variants:
        run.ensure_table(name)
        print(f"table[{name}]: {run.table_path(name)}")


def cmd_train_text(run, args):
    for name in run.cfg.text_variants:
        run.ensure_table(name)
        print(f"table[{name}]: {run.table_path(name)}")


def cmd_align(run, args):
    _require_tables(run, [args.audio, args.text])
    model, accs = run.align_pair(args.audio, args.text, args.tier)
    for k, acc in sorted(accs.items()):
        print(f"{args.audio} -> {args.text} (tier {args.tier}): top-{k} accuracy {acc:.3f}")


def cmd_eval_parallel(run, args):
    _require_tables(run, list(run.cfg.audio_variants) + list(run.cfg.text_variants))
    run.ensure_parallel_report()
    print(f"parallel report: {run.eval_parallel_path()}")


def cmd_retrieve(run, args):
    _require_tables(run, ["aud_ph", "aud_ph_se"])
    run.ensure_retrieval_report()
    print(f"retrieval report: {run.retrieval_path()}")


def _require_tables(run, names):
    missing = [n for n in names if not run.table_path(n).exists()]
    if missing:
        raise PipelineError(
            "missing upstream artifacts: "
            + ", ".join(str(run.table_path(n)) for n in missing)
            + " (run train-stage2 / train-text first)"
        )


def cmd_report(run, args):
    report = {"seed": run.cfg.seed, "parallel": {}, "retrieval": {}}
    incomplete = []
    if run.eval_parallel_path().exists():
        report["parallel"] = json.loads(run.eval_parallel_path().read_text())
    else:
        incomplete.append("parallel accuracy matrix")
    if run.retrieval_path().exists():
        report["retrieval"] = json.loads(run.retrieval_path().read_text())
    else:
        incomplete.append("retrieval MAP")
    text = render_report(report, incomplete=incomplete)
    (run.dir / "report.txt").write_text(text)
    pipeline_mod._write_json(run.report_path(), {**report, "incomplete": incomplete})
    print(text)


def cmd_run(run, args):
    run.run_all()
    print((run.dir / "report.txt").read_text())
    print(f"report: {run.report_path()}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="pasevec")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": cmd_synth,
        "train-stage1": cmd_train_stage1,
        "train-stage2": cmd_train_stage2,
        "train-text": cmd_train_text,
        "align": cmd_align,
        "eval-parallel": cmd_eval_parallel,
        "retrieve": cmd_retrieve,
        "report": cmd_report,
        "run": cmd_run,
    }
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--force-stage", default=None)
        if name == "align":
            p.add_argument("--audio", default="aud_ph_se")
            p.add_argument("--text", default="txt_se_ph")
            p.add_argument("--tier", type=int, required=True)

    args = parser.parse_args(argv)
    try:
        run = _build_run(args)
    except (PipelineError, CorpusError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        commands[args.command](run, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
