"""Command-line entry point: ``lertlab <command> [--config FILE] [--section.key VALUE ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .corpus import build_vocab, read_corpus_file, encode_sentence, write_corpus_file, synth_corpus
from .masking import extend_vocab_for_lmlm, mask_sentence, sentence_rng
from .schedule import ScheduleConfig, trace_csv
from .tags import tagsets_json

log = logging.getLogger("lertlab")


class UsageError(Exception):
    pass


def _overrides(extra: list[str]) -> dict:
    """Turn leftover ``--a.b VALUE`` / ``--a.b=VALUE`` arguments into dotted overrides."""
    out = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {arg}")
            raw = extra[i + 1]
            i += 1
        if "." not in key and key not in ("seed", "output_dir"):
            raise UsageError(f"unknown option {arg!r}")
        out[key] = C.parse_value(raw)
        i += 1
    return out


def _resolve(args, extra) -> dict:
    overrides = _overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None and "output_dir" not in overrides:
        overrides["output_dir"] = str(args.out)
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    return C.load(args.config, overrides)


def _echo(cfg) -> None:
    print(C.dumps(cfg), file=sys.stderr)


def cmd_gen_corpus(args, extra) -> int:
    cfg = _resolve(args, extra)
    _echo(cfg)
    syn = cfg["corpus"]["synthetic"]
    grammar = C.grammar_config(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_corpus_file(synth_corpus(syn["train_seed"], syn["n_train"], grammar), out / "train.tsv")
    write_corpus_file(synth_corpus(syn["heldout_seed"], syn["n_heldout"], grammar), out / "heldout.tsv")
    (out / "tagsets.json").write_text(tagsets_json() + "\n", encoding="utf-8")
    print(f"wrote {syn['n_train']} train and {syn['n_heldout']} heldout sentences to {out}")
    return 0


def cmd_build_vocab(args, extra) -> int:
    cfg = _resolve(args, extra)
    _echo({"corpus": str(args.corpus), "lmlm_mode": cfg["masking"]["lmlm_mode"], "out": str(args.vocab_out)})
    corpus = read_corpus_file(args.corpus)
    vocab = extend_vocab_for_lmlm(build_vocab(corpus), C.masking_config(cfg), corpus)
    Path(args.vocab_out).write_text(vocab.to_text(), encoding="utf-8")
    print(f"{len(vocab)} tokens written to {args.vocab_out}")
    return 0


def cmd_mask_dump(args, extra) -> int:
    cfg = _resolve(args, extra)
    _echo(cfg)
    corpus = read_corpus_file(args.corpus)
    masking = C.masking_config(cfg)
    vocab = extend_vocab_for_lmlm(build_vocab(corpus), masking, corpus)
    max_len = C.model_config(cfg, len(vocab)).max_len
    lines = []
    for i, s in enumerate(corpus):
        enc = encode_sentence(s, vocab, max_len)
        lines.append(mask_sentence(enc, sentence_rng(cfg["seed"], args.epoch, i), masking, vocab).to_json())
    text = "".join(line + "\n" for line in lines)
    if args.dump_out:
        Path(args.dump_out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_pretrain(args, extra) -> int:
    from .pipeline import pretrain

    cfg = _resolve(args, extra)
    _echo(cfg)
    res = pretrain(cfg, resume_from=args.resume)
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"checkpoint": str(res.checkpoint), "vocab_size": len(res.vocab),
                      "steps": last.get("step", -1) + 1, "final_loss_mlm": last.get("loss_mlm")}))
    return 0


def cmd_probe(args, extra) -> int:
    from .pipeline import evaluate_run, load_corpora
    from .probe import probe_finetune
    from .trainer import Pretrained

    cfg = _resolve(args, extra)
    _echo(cfg)
    model = Pretrained.load(args.checkpoint)
    if args.task is None:
        row = evaluate_run(cfg, model)
    else:
        corpus = read_corpus_file(args.corpus) if args.corpus else load_corpora(cfg)[1]
        p = cfg["probe"]
        res = probe_finetune(model, corpus[: p["n_sentences"]], args.task, frozen=p["frozen"], seed=p["seed"],
                             dev_fraction=p["dev_fraction"], steps=p["steps"], lr=p["lr"])
        row = {"task": res.task, "metric": res.metric, "score": res.score, "train_score": res.train_score,
               "frozen": res.frozen}
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_ablate(args, extra) -> int:
    from .probe import builtin_matrix, report_markdown, run_ablation

    cfg = _resolve(args, extra)
    _echo(cfg)
    matrix = builtin_matrix(args.matrix, cfg)
    rows = run_ablation(matrix, cfg["output_dir"], jobs=args.jobs)
    sys.stdout.write(report_markdown(rows))
    return 0 if all(r.get("status") == "ok" for r in rows) else 1


def cmd_trace_schedule(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    tasks = tuple(args.tasks.split(",")) if args.tasks else ("pos", "ner", "dep")
    sched = ScheduleConfig(args.total, args.preset, tasks)
    _echo({"total": args.total, "preset": args.preset, "tasks": list(tasks)})
    if args.at:
        steps = [int(x) for x in args.at.split(",")]
    else:
        steps = range(0, args.total + 1, args.every or max(1, args.total // 100))
    text = trace_csv(sched, steps)
    if args.trace_out:
        Path(args.trace_out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args, extra) -> int:
    from .probe import merge_reports, report_markdown, write_report

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    rows = merge_reports(args.run_dirs)
    _echo({"run_dirs": [str(d) for d in args.run_dirs], "out": str(args.report_out)})
    if args.report_out:
        write_report(rows, args.report_out)
    sys.stdout.write(report_markdown(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lertlab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config; --section.key VALUE flags override it")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("gen-corpus", help="write synthetic train/heldout TSV corpora"))
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_gen_corpus)

    p = with_config(sub.add_parser("build-vocab", help="derive a vocabulary file from a TSV corpus"))
    p.add_argument("corpus", type=Path)
    p.add_argument("--vocab-out", type=Path, required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = with_config(sub.add_parser("mask-dump", help="dump masked examples as JSON lines"))
    p.add_argument("corpus", type=Path)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--dump-out", type=Path)
    p.set_defaults(func=cmd_mask_dump)

    p = with_config(sub.add_parser("pretrain", help="run multi-task pre-training"))
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("probe", help="evaluate a checkpoint"))
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--task", choices=("pos", "ner", "dep"))
    p.add_argument("--corpus", type=Path)
    p.set_defaults(func=cmd_probe)

    p = with_config(sub.add_parser("ablate", help="run a built-in study matrix"))
    p.add_argument("--matrix", choices=("features", "order", "lmlm"), required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trace-schedule", help="emit loss-weight ramps as CSV")
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--preset", default="PND")
    p.add_argument("--tasks")
    p.add_argument("--at", help="comma-separated steps")
    p.add_argument("--every", type=int)
    p.add_argument("--trace-out", type=Path)
    p.set_defaults(func=cmd_trace_schedule)

    p = sub.add_parser("report", help="merge run directories into one table")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--report-out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (UsageError, C.ConfigError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"lertlab: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"lertlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
