"""Command line entry point: ``labs <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from . import tensor as T
from .checkpoint import CheckpointError
from .config import DESK_PROFILE, ConfigError, RunConfig, load_config
from .data import DataError, collate, corpus_stats, dump_jsonl, load_jsonl, synth_generate
from .mathtext import FormulaMode, MathTextError, Segmenter, tokenize
from .model import ModelError
from .trainer import (
    DivergenceError,
    load_bundle,
    model_config_for,
    predict_split,
    prepare,
    run_ablation,
    save_bundle,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("labs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False)


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


def _lexicon(path: str) -> list[str] | None:
    if not path:
        return None
    return Path(path).read_text(encoding="utf-8").split()


def _load_run(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("config has no 'data' path")
    examples = load_jsonl(cfg.data)
    prepared = prepare(
        examples,
        cfg.seed,
        cfg.formula_mode,
        cfg.max_len,
        cfg.formula_table_rows,
        _lexicon(cfg.lexicon),
    )
    prepared.manifest["config_hash"] = cfg.digest()
    return prepared


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_stats(args) -> int:
    examples = load_jsonl(args.data)
    lexicon = _lexicon(args.lexicon)
    segmenter = Segmenter(lexicon) if lexicon is not None else Segmenter.from_corpus(ex.text for ex in examples)
    stats = corpus_stats(examples, segmenter)
    text = _dump(stats) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "stats.json", text)
        if not args.no_plots:
            lengths = {m.value: [len(tokenize(ex.text, m, segmenter, strict=False)) for ex in examples] for m in FormulaMode}
            plotting.plot_length_histogram(lengths, out / "lengths.png")
    return EXIT_OK


def _write_run(out: Path, record, plots: bool) -> None:
    record.write_json(out / "run.json")
    record.write_curve_csv(out / "curve.csv")
    if plots:
        rows = [{"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss} for e in record.epochs]
        plotting.plot_learning_curves({record.variant: rows}, out / "learning_curve.png")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    prepared = _load_run(cfg)
    mcfg = model_config_for(cfg.model_config(), prepared.encoder)
    model, record = train(mcfg, cfg.train_config(), prepared.train, prepared.val)
    out = Path(cfg.out_dir) / mcfg.variant.value
    save_bundle(out, model, prepared.encoder, prepared.manifest)
    _write(out / "config.txt", cfg.to_text())
    _write_run(out, record, not args.no_plots)
    report = predict_split(model, prepared.test).metrics().to_dict()
    _write(out / "test_metrics.json", _dump(report) + "\n")
    sys.stdout.write(_dump({"checkpoint": str(out), "best_epoch": record.best_epoch, "test": report}) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, encoder = load_bundle(args.checkpoint)
    items = encoder.encode_all(load_jsonl(args.data))
    report = predict_split(model, items).metrics().to_dict()
    text = _dump({"variant": model.config.variant.value, "n": len(items), "metrics": report}) + "\n"
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out), text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, encoder = load_bundle(args.checkpoint)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    item = encoder.encode_text(args.text)
    with T.no_grad():
        out = model.forward(collate([item]))
    logits, scores = out.logits.data[0], out.y_p.data[0]
    order = np.argsort(-logits, kind="stable")[: args.top_k]
    ranked = [{"label": encoder.vocab.labels[j], "score": float(scores[j])} for j in order]
    sys.stdout.write(_dump({"tokens": item.tokens, "ranked": ranked}) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    prepared = _load_run(cfg)
    result = run_ablation(prepared, cfg.model_config(), cfg.train_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "ablation.json", result.table_json())
    _write(out / "ablation.txt", result.table_text())
    plots = not args.no_plots
    for name, record in result.records.items():
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        _write_run(run_dir, record, False)
    if plots:
        table = result.table()
        curves = {
            name: [{"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss} for e in r.epochs]
            for name, r in result.records.items()
        }
        plotting.plot_learning_curves(curves, out / "learning_curves.png")
        plotting.plot_stop_epochs(table["stop_epochs"], out / "stop_epochs.png")
        plotting.plot_metric_table(table, out / "ablation.png")
    sys.stdout.write(result.table_text())
    return EXIT_OK


def _forward_full(checkpoint, data_path, limit):
    model, encoder = load_bundle(checkpoint)
    examples = load_jsonl(data_path)
    if limit:
        examples = examples[:limit]
    for ex in examples:
        item = encoder.encode(ex)
        with T.no_grad():
            out = model.forward(collate([item], trim=False))
        yield model, encoder, ex, item, out


def cmd_export_attention(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (model, encoder, ex, item, out) in enumerate(_forward_full(args.checkpoint, args.data, args.limit)):
        if out.a_fwd is None:
            raise ModelError(f"{model.config.variant.value} checkpoint has no label attention to export")
        record = {
            "tokens": item.tokens,
            "labels": list(ex.labels),
            "A_fwd": out.a_fwd.data[0].tolist(),
            "A_bwd": out.a_bwd.data[0].tolist(),
            "label_names": encoder.vocab.labels,
        }
        _write(out_dir / f"attention_{i:05d}.json", json.dumps(record, ensure_ascii=False) + "\n")
        if i < args.plots:
            plotting.plot_attention(record, out_dir / f"attention_{i:05d}.png")
    return EXIT_OK


def cmd_export_distributions(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (model, encoder, ex, item, out) in enumerate(_forward_full(args.checkpoint, args.data, args.limit)):
        record = {
            "labels": list(ex.labels),
            "y_t": item.target.tolist(),
            "y_c": None if out.y_c is None else out.y_c.data[0].tolist(),
            "y_s": None if out.y_s is None else out.y_s.data[0].tolist(),
            "y_p": out.y_p.data[0].tolist(),
        }
        _write(out_dir / f"distribution_{i:05d}.json", json.dumps(record, ensure_ascii=False) + "\n")
        if i < args.plots:
            plotting.plot_distributions(record, out_dir / f"distribution_{i:05d}.png")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    examples = synth_generate(args.n, args.labels, args.seed)
    out = Path(args.out)
    dump_jsonl(examples, out)
    if args.config_out:
        cfg = RunConfig(data=str(out.resolve()), profile="desk", seed=args.seed, **DESK_PROFILE)
        _write(Path(args.config_out), cfg.to_text())
    sys.stdout.write(_dump({"examples": len(examples), "labels": args.labels, "out": str(out)}) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="labs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("stats", help="corpus statistics per formula mode (JSON)")
    p.add_argument("data", help="JSONL dataset with 'text' and 'labels'")
    p.add_argument("--lexicon", default="", help="word list for segmentation (default: derived from the corpus)")
    p.add_argument("--out", default="", help="also write stats.json and lengths.png into this directory")
    p.add_argument("--no-plots", action="store_true", help="skip the length histogram")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train one variant from a config file")
    p.add_argument("--config", required=True, help="key = value run configuration")
    p.add_argument("--no-plots", action="store_true", help="skip learning_curve.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Precision/Recall/F1@k of a checkpoint on a dataset (JSON)")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--out", default="", help="also write the JSON report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="ranked labels for one text")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    p.add_argument("--text", required=True, help="problem text; formulas delimited by $...$")
    p.add_argument("--top-k", type=int, default=3, help="number of labels to print (default 3)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train Basic, LAB, LBS and LABS on identical splits")
    p.add_argument("--config", required=True, help="key = value run configuration (variant is ignored)")
    p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_ablate)

    for name, func, what in (
        ("export-attention", cmd_export_attention, "label attention maps"),
        ("export-distributions", cmd_export_distributions, "true, confusion, simulated and predicted label vectors"),
    ):
        p = sub.add_parser(name, help=f"write per-example {what} as JSON")
        p.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
        p.add_argument("--data", required=True, help="JSONL dataset")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--limit", type=int, default=0, help="only the first N examples (default: all)")
        p.add_argument("--plots", type=int, default=2, help="render PNGs for the first N examples (default 2)")
        p.set_defaults(func=func)

    p = sub.add_parser("gen-synthetic", help="write a separable synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of examples")
    p.add_argument("--labels", type=int, required=True, help="number of labels (<= 26)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--config-out", default="", help="also write a desk-profile config for this dataset")
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, MathTextError, ConfigError, CheckpointError, ModelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
