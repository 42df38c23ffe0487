"""Command-line pipeline: ingest a sequence dump, train embeddings, probe
them for integer properties, and run the evaluation tasks, emitting
line-delimited JSON report records plus human-readable summaries.

Exit codes: 0 success, 2 input error, 3 data-format error, 4 numerical
abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .corpus import (
    CorpusSplit,
    StrippedParseError,
    apply_manifest,
    compute_stats,
    read_manifest,
    read_stripped,
    split_corpus,
    write_manifest,
)
from .embeddings import (
    TableFormatError,
    concat_tables,
    load_pretrained_integers,
    load_text,
    save_text,
)
from .tasks import ProblemFormatError
from .vocab import SubwordConfig, build_vocab

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "INTEMBED_DATA_DIR"

DEFAULTS = {
    "seed": 2020,
    "min_count": 3,
    "sg_dim": 100,
    "sg_window": 5,
    "sg_negatives": 5,
    "sg_epochs": 5,
    "sg_lr": 0.05,
    "sg_subsample": 1e-4,
    "sg_buckets": 2**21,
    "sg_ngram_min": 3,
    "sg_ngram_max": 6,
    "sg_workers": 1,
    "lm_embed_dim": 100,
    "lm_hidden_dim": 200,
    "lm_layers": 2,
    "lm_bptt": 35,
    "lm_batch": 20,
    "lm_lr": 20.0,
    "lm_lr_shrink": 4.0,
    "lm_clip": 0.25,
    "lm_epochs": 40,
    "lm_dropout": 0.2,
    "lsa_k": 65,
    "lsa_oversample": 10,
    "lsa_power_iters": 4,
}


class InputError(ValueError):
    """Bad paths or arguments (exit code 2)."""


_data_dir = "."  # set by main() from --data-dir / the environment


def _load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _require_file(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    path = Path(path)
    if path.is_file():
        return path
    fallback = Path(_data_dir) / path
    if not path.is_absolute() and fallback.is_file():
        return fallback
    raise InputError(f"{what} not found: {path}")


def _load_split(args, cfg) -> CorpusSplit:
    records = read_stripped(_require_file(args.dump, "sequence dump"))
    if getattr(args, "manifest", None):
        manifest_path = _require_file(args.manifest, "split manifest")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            assignment = read_manifest(fh)
        return apply_manifest(records, assignment, seed=cfg["seed"])
    return split_corpus(records, cfg["seed"])


def _emit_records(path: Path, records: list[dict], cfg: dict) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            full = {
                "tool_version": __version__,
                "timestamp": stamp,
                "seed": cfg["seed"],
                **record,
                "config": cfg,
            }
            fh.write(json.dumps(full, sort_keys=True) + "\n")
    logger.info("wrote %d record(s) to %s", len(records), path)


def cmd_ingest(args, cfg) -> int:
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.tsv", "w", encoding="utf-8") as fh:
        write_manifest(split, fh)
    unfiltered = build_vocab(split.train, min_count=1)
    records = []
    for name, part in split.parts().items():
        stats = compute_stats(part, vocab=None if name == "train" else unfiltered)
        records.append({"record": "corpus_stats", "split": name, **stats.as_record()})
        print(
            f"{name}: {stats.sequence_count} sequences, {stats.token_count} tokens, "
            f"mean length {stats.mean_sequence_length:.1f}, {stats.type_count} types"
            + (f", OOV {100 * stats.oov_rate:.1f}%" if stats.oov_rate is not None else "")
        )
    _emit_records(out / "stats.jsonl", records, cfg)
    return 0


def cmd_train(args, cfg) -> int:
    split = _load_split(args, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(split.train, min_count=cfg["min_count"])
    logger.info(
        "train split: %d sequences, vocabulary %d tokens", len(split.train), len(vocab)
    )
    if args.method == "lsa":
        from .lsa import lsa_embeddings

        table = lsa_embeddings(
            split.train,
            vocab,
            k=cfg["lsa_k"],
            oversample=cfg["lsa_oversample"],
            power_iters=cfg["lsa_power_iters"],
            seed=cfg["seed"],
        )
    elif args.method == "skipgram":
        from .skipgram import SkipgramConfig, train_skipgram

        subword = None
        if args.subword:
            subword = SubwordConfig(
                n_min=cfg["sg_ngram_min"],
                n_max=cfg["sg_ngram_max"],
                bucket_count=cfg["sg_buckets"],
            )
        sg_config = SkipgramConfig(
            dim=cfg["sg_dim"],
            window=cfg["sg_window"],
            negatives=cfg["sg_negatives"],
            epochs=cfg["sg_epochs"],
            lr_start=cfg["sg_lr"],
            min_count=cfg["min_count"],
            subword=subword,
            subsample_threshold=cfg["sg_subsample"],
            seed=cfg["seed"],
            workers=cfg["sg_workers"],
        )
        table = train_skipgram(
            split.train,
            vocab,
            sg_config,
            heldout=split.dev[:1000],
            checkpoint_path=str(out),
            checkpoint_every=args.checkpoint_every,
        )
    elif args.method == "lstm":
        from .lstm import LstmLmConfig, extract_embeddings, save_checkpoint, train_lm

        lm_config = LstmLmConfig(
            embed_dim=cfg["lm_embed_dim"],
            hidden_dim=cfg["lm_hidden_dim"],
            layers=cfg["lm_layers"],
            bptt_len=cfg["lm_bptt"],
            batch_size=cfg["lm_batch"],
            lr_start=cfg["lm_lr"],
            lr_shrink=cfg["lm_lr_shrink"],
            clip_norm=cfg["lm_clip"],
            epochs=cfg["lm_epochs"],
            dropout=cfg["lm_dropout"],
            seed=cfg["seed"],
        )
        model = train_lm(split.train, split.dev, vocab, lm_config)
        save_checkpoint(model, f"{out}.ckpt")
        logger.info("checkpoint written to %s.ckpt", out)
        table = extract_embeddings(model)
    else:
        raise InputError(f"unknown method {args.method!r}")
    save_text(table, out)
    print(f"{table.source_tag}: {len(table)} tokens, dim {table.dim} -> {out}")
    return 0


def _gather_tables(args) -> list:
    tables = []
    for path in args.table or []:
        tables.append(load_text(_require_file(path, "embedding table")))
    for path, tag in args.pretrained or []:
        tables.append(
            load_pretrained_integers(_require_file(path, "pretrained vectors"), source_tag=tag)
        )
    for left, right in args.concat or []:
        a = load_text(_require_file(left, "embedding table"))
        b = load_text(_require_file(right, "embedding table"))
        tables.append(concat_tables(a, b))
    if not tables:
        raise InputError("no tables given (use --table/--pretrained/--concat)")
    return tables


def _parse_range(text: str) -> range:
    try:
        lo, hi = text.split(":")
        return range(int(lo), int(hi) + 1)
    except ValueError as exc:
        raise InputError(f"bad range {text!r}, expected 'lo:hi'") from exc


def cmd_probe(args, cfg) -> int:
    from .probes import majority_baseline, probe_binary, probe_regression

    tables = _gather_tables(args)
    train_range = _parse_range(args.train_range)
    test_range = _parse_range(args.test_range)
    regression_range = _parse_range(args.regression_range)
    properties = [p for p in args.properties.split(",") if p]
    regressions = [p for p in args.regressions.split(",") if p]
    records = []
    for prop in properties:
        records.append(
            {
                "record": "majority_baseline",
                "property": prop,
                "accuracy": majority_baseline(prop, test_range),
            }
        )
    for table in tables:
        for prop in properties:
            report = probe_binary(table, prop, train_range=train_range, test_range=test_range)
            records.append({"record": "probe", **report.as_record()})
            print(
                f"{table.source_tag} {prop}: all={report.accuracy_all:.3f} "
                f"single={report.accuracy_single:.3f} (dim {report.chosen_dimension}) "
                f"coverage={report.coverage:.3f}"
            )
        for target in regressions:
            report = probe_regression(table, target, eval_range=regression_range)
            records.append({"record": "regression", **report.as_record()})
            print(
                f"{table.source_tag} {target}: R2 all={report.r2_all:.3f} "
                f"single={report.r2_single:.3f} (dim {report.chosen_dimension})"
            )
    _emit_records(Path(args.out), records, cfg)
    return 0


def cmd_eval_complete(args, cfg) -> int:
    from .tasks import (
        batch_search_complete,
        completion_problems_from_records,
        load_problems,
        precision_at_k,
    )

    k = max(args.k, 5)
    if args.test_split:
        split = _load_split(args, cfg)
        problems = completion_problems_from_records(split.test)
        searched = split.train  # never search the split being evaluated
        test_set = "oeis-test"
    else:
        problems = load_problems(_require_file(args.problems, "problem file"), "completion")
        searched = None
        test_set = Path(args.problems).stem
    if not problems:
        raise InputError("no completion problems to evaluate")
    if args.method == "search":
        if searched is None:
            searched = read_stripped(_require_file(args.dump, "sequence dump"))
        predictions = batch_search_complete(searched, problems, mode=args.mode, k=k)
        method = f"search-{args.mode}"
    else:
        from .lstm import load_checkpoint, next_token_topk

        model = load_checkpoint(_require_file(args.checkpoint, "model checkpoint"))
        predictions = [next_token_topk(model, list(p.prompt), k) for p in problems]
        method = "lstm"
    golds = [p.answer for p in problems]
    record = {
        "record": "completion",
        "test_set": test_set,
        "method": method,
        "n_problems": len(problems),
        "p_at_1": precision_at_k(predictions, golds, 1),
        "p_at_5": precision_at_k(predictions, golds, 5),
    }
    print(
        f"{test_set} / {method}: P@1 {record['p_at_1']:.3f}, "
        f"P@5 {record['p_at_5']:.3f} over {len(problems)} problems"
    )
    _emit_records(Path(args.out), [record], cfg)
    return 0


def cmd_eval_analogy(args, cfg) -> int:
    from .tasks import analogy_accuracy, load_problems, random_choice_accuracy

    table = load_text(_require_file(args.table, "embedding table"))
    problems = load_problems(_require_file(args.problems, "problem file"), "analogy")
    if not problems:
        raise InputError("no analogy problems to evaluate")
    accuracy, log = analogy_accuracy(table, problems)
    baseline = random_choice_accuracy(problems)
    records = [
        {
            "record": "analogy",
            "source_tag": table.source_tag,
            "n_problems": len(problems),
            "accuracy": accuracy,
            "random_baseline": baseline,
        }
    ]
    records.extend({"record": "analogy_detail", "source_tag": table.source_tag, **row} for row in log)
    print(f"{table.source_tag}: analogy accuracy {accuracy:.3f} (random {baseline:.3f})")
    _emit_records(Path(args.out), records, cfg)
    return 0


def cmd_eval_expand(args, cfg) -> int:
    from .tasks import expand_seed_set

    table = load_text(_require_file(args.table, "embedding table"))
    seeds = [s.strip() for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise InputError("no seeds given")
    scope = None
    if args.scope:
        scope = [str(n) for n in _parse_range(args.scope)]
    ranked = expand_seed_set(table, seeds, k=args.k, scope=scope)
    for token, sim in ranked:
        print(f"{token}\t{sim:.4f}")
    record = {
        "record": "seed_expansion",
        "source_tag": table.source_tag,
        "seeds": seeds,
        "k": args.k,
        "candidates": [{"token": t, "similarity": s} for t, s in ranked],
    }
    _emit_records(Path(args.out), [record], cfg)
    return 0


def _format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(headers[c]), max((len(r[c]) for r in rows), default=0))
        for c in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def cmd_report(args, cfg) -> int:
    bundle = Path(args.bundle)
    if not bundle.is_dir():
        raise InputError(f"bundle directory not found: {bundle}")
    by_kind: dict[str, list[dict]] = {}
    for path in sorted(bundle.glob("*.jsonl")):
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise TableFormatError(f"{path} line {lineno}: {exc}") from exc
                if "record" not in record:
                    raise TableFormatError(f"{path} line {lineno}: missing 'record' field")
                by_kind.setdefault(record["record"], []).append(record)
    if not by_kind:
        print("no records")
        return 0

    if "corpus_stats" in by_kind:
        print("# Corpus statistics")
        rows = [
            [
                r["split"],
                str(r["sequences"]),
                str(r["tokens"]),
                f"{r['mean_length']:.1f}",
                str(r["types"]),
                str(r["singleton_types"]),
                "-" if r.get("oov_rate") is None else f"{100 * r['oov_rate']:.1f}%",
            ]
            for r in by_kind["corpus_stats"]
        ]
        print(_format_table(
            ["split", "sequences", "tokens", "mean_len", "types", "singletons", "oov"], rows
        ))
        print()
    if "probe" in by_kind or "majority_baseline" in by_kind:
        print("# Binary property probes")
        probes = by_kind.get("probe", [])
        props = sorted({r["property"] for r in probes + by_kind.get("majority_baseline", [])})
        headers = ["embeddings"] + [f"{p} {c}" for p in props for c in ("single", "all")]
        rows = []
        baselines = {r["property"]: r["accuracy"] for r in by_kind.get("majority_baseline", [])}
        if baselines:
            rows.append(
                ["Random baseline"]
                + [
                    f"{baselines[p]:.2f}" if p in baselines else "-"
                    for p in props
                    for _ in range(2)
                ]
            )
        for tag in sorted({r["source_tag"] for r in probes}):
            row = [tag]
            for p in props:
                match = [r for r in probes if r["source_tag"] == tag and r["property"] == p]
                if match:
                    row += [f"{match[0]['accuracy_single']:.2f}", f"{match[0]['accuracy_all']:.2f}"]
                else:
                    row += ["-", "-"]
            rows.append(row)
        print(_format_table(headers, rows))
        print()
    if "regression" in by_kind:
        print("# Value/magnitude regressions (R^2)")
        regs = by_kind["regression"]
        targets = sorted({r["target"] for r in regs})
        headers = ["embeddings"] + [f"{t} {c}" for t in targets for c in ("single", "all")]
        rows = []
        for tag in sorted({r["source_tag"] for r in regs}):
            row = [tag]
            for t in targets:
                match = [r for r in regs if r["source_tag"] == tag and r["target"] == t]
                if match:
                    row += [f"{match[0]['r2_single']:.2f}", f"{match[0]['r2_all']:.2f}"]
                else:
                    row += ["-", "-"]
            rows.append(row)
        print(_format_table(headers, rows))
        print()
    if "completion" in by_kind:
        print("# Sequence completion")
        rows = [
            [r["test_set"], r["method"], f"{r['p_at_1']:.2f}", f"{r['p_at_5']:.2f}", str(r["n_problems"])]
            for r in by_kind["completion"]
        ]
        print(_format_table(["test set", "method", "P@1", "P@5", "n"], rows))
        print()
    if "analogy" in by_kind:
        print("# Analogies")
        rows = [
            [r["source_tag"], f"{r['accuracy']:.2f}", f"{r['random_baseline']:.2f}", str(r["n_problems"])]
            for r in by_kind["analogy"]
        ]
        print(_format_table(["embeddings", "accuracy", "random", "n"], rows))
        print()
    if "seed_expansion" in by_kind:
        print("# Seed-set expansions")
        for r in by_kind["seed_expansion"]:
            cands = ", ".join(c["token"] for c in r["candidates"])
            print(f"{' '.join(r['seeds'])} ({r['source_tag']}): {cands}")
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intembed",
        description="Train, probe and evaluate integer embeddings from sequence corpora.",
    )
    parser.add_argument("--config", help="JSON config file (flat key-value; flags override)")
    parser.add_argument("--seed", type=int, help="split/training seed")
    parser.add_argument(
        "--data-dir",
        default=os.environ.get(DATA_DIR_ENV, "."),
        help=f"default data directory (env {DATA_DIR_ENV})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse a dump, split it, emit stats")
    p_ingest.add_argument("--dump", required=True, help="stripped-format dump (.gz ok)")
    p_ingest.add_argument("--out", required=True, help="output directory")
    p_ingest.set_defaults(func=cmd_ingest)

    p_train = sub.add_parser("train", help="train an embedding table")
    p_train.add_argument("method", choices=["lsa", "skipgram", "lstm"])
    p_train.add_argument("--dump", required=True)
    p_train.add_argument("--manifest", help="pinned split manifest (else split by seed)")
    p_train.add_argument("--out", required=True, help="output table path")
    p_train.add_argument(
        "--subword", action=argparse.BooleanOptionalAction, default=True,
        help="digit n-gram subword units (skipgram only)",
    )
    p_train.add_argument("--checkpoint-every", type=int, default=0, metavar="EPOCHS")
    for flag, key, ftype in [
        ("--min-count", "min_count", int),
        ("--dim", "sg_dim", int),
        ("--window", "sg_window", int),
        ("--negatives", "sg_negatives", int),
        ("--epochs", "sg_epochs", int),
        ("--lr", "sg_lr", float),
        ("--buckets", "sg_buckets", int),
        ("--workers", "sg_workers", int),
        ("--k", "lsa_k", int),
        ("--embed-dim", "lm_embed_dim", int),
        ("--hidden-dim", "lm_hidden_dim", int),
        ("--bptt", "lm_bptt", int),
        ("--batch-size", "lm_batch", int),
        ("--dropout", "lm_dropout", float),
        ("--lm-epochs", "lm_epochs", int),
        ("--lm-lr", "lm_lr", float),
    ]:
        p_train.add_argument(flag, dest=key, type=ftype, default=None)
    p_train.set_defaults(func=cmd_train)

    p_probe = sub.add_parser("probe", help="probe tables for integer properties")
    p_probe.add_argument("--table", action="append", help="table path (repeatable)")
    p_probe.add_argument(
        "--pretrained", action="append", nargs=2, metavar=("PATH", "TAG"),
        help="published word-vector file; keeps integer tokens only",
    )
    p_probe.add_argument(
        "--concat", action="append", nargs=2, metavar=("A", "B"),
        help="probe the concatenation of two saved tables",
    )
    p_probe.add_argument("--properties", default="even,div3,div4,prime")
    p_probe.add_argument("--regressions", default="value,digits")
    p_probe.add_argument("--train-range", default="1:1000")
    p_probe.add_argument("--test-range", default="1001:2000")
    p_probe.add_argument("--regression-range", default="1:2000")
    p_probe.add_argument("--out", required=True, help="report file (.jsonl)")
    p_probe.set_defaults(func=cmd_probe)

    p_eval = sub.add_parser("eval", help="run an evaluation task")
    eval_sub = p_eval.add_subparsers(dest="task", required=True)

    p_complete = eval_sub.add_parser("complete", help="sequence completion")
    p_complete.add_argument("--method", choices=["search", "lstm"], required=True)
    p_complete.add_argument("--mode", choices=["full", "last5"], default="full")
    p_complete.add_argument("--problems", help="completion problem file")
    p_complete.add_argument(
        "--test-split", action="store_true",
        help="evaluate on the held-out test split (search uses the train split)",
    )
    p_complete.add_argument("--dump")
    p_complete.add_argument("--manifest")
    p_complete.add_argument("--checkpoint", help="LSTM checkpoint (method=lstm)")
    p_complete.add_argument("--k", type=int, default=5)
    p_complete.add_argument("--out", required=True)
    p_complete.set_defaults(func=cmd_eval_complete)

    p_analogy = eval_sub.add_parser("analogy", help="multiple-choice analogies")
    p_analogy.add_argument("--table", required=True)
    p_analogy.add_argument("--problems", required=True)
    p_analogy.add_argument("--out", required=True)
    p_analogy.set_defaults(func=cmd_eval_analogy)

    p_expand = eval_sub.add_parser("expand", help="seed-set expansion")
    p_expand.add_argument("--table", required=True)
    p_expand.add_argument("--seeds", required=True, help="comma-separated seed integers")
    p_expand.add_argument("--k", type=int, default=6)
    p_expand.add_argument("--scope", help="restrict candidates to 'lo:hi'")
    p_expand.add_argument("--out", required=True)
    p_expand.set_defaults(func=cmd_eval_expand)

    p_report = sub.add_parser("report", help="render report bundles as text tables")
    p_report.add_argument("bundle", help="directory of .jsonl report files")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    global _data_dir
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    _data_dir = args.data_dir
    overrides = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    try:
        cfg = _load_config(args.config, overrides)
        return args.func(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StrippedParseError, TableFormatError, ProblemFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
