"""Command-line entry point: ``lrqa <command> [--config run.json] ...``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import plotting
from .align import AlignParams, MissingTranslationError, align_corpus, load_translations
from .config import RunConfig, load_config
from .cost import CostReport, TrackedRunError, cost_table, estimate_energy, tracker_from_config
from .data import (
    Dataset,
    DatasetError,
    Tokenizer,
    concat_datasets,
    corpus_stats,
    featurize_dataset,
    load_squad,
    save_squad,
    split_validation,
    train_tokenizer,
)
from .hpo import DEFAULT_SPACE, SearchSpace, pbt_search, qa_factory, surrogate_factory
from .metrics import evaluate, load_predictions
from .model import CheckpointError, ConfigError, build_model, load_checkpoint, save_checkpoint
from .trainer import TrainingError, finetune_qa, predict_spans, pretrain_mlm

log = logging.getLogger("lrqa")

CHECKPOINT = "model.lrqa"
FINETUNED = "finetuned.lrqa"
TOKENIZER = "tokenizer.json"


class UsageError(Exception):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _tracked(cfg: RunConfig, label: str, fn):
    tracker = tracker_from_config(cfg.section("cost"), label)
    tracker.start()
    try:
        result = fn()
    except Exception as exc:
        report = tracker.stop(completed=False)
        _write(cfg.out / f"{label}_cost.json", report.to_json())
        raise TrackedRunError(exc, report) from exc
    report = tracker.stop()
    _write(cfg.out / f"{label}_cost.json", report.to_json())
    return result, report


def _print_cost(report: CostReport) -> None:
    print(cost_table([report]), end="")


def _corpus_lines(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _dataset_texts(ds: Dataset) -> list[str]:
    return [p.context for a in ds.articles for p in a.paragraphs] + [qa.question for _, qa in ds.examples()]


def _tokenizer_path(cfg: RunConfig, checkpoint: Path | None) -> Path | None:
    explicit = cfg.path("tokenizer", required=False)
    if explicit is not None:
        return explicit
    if checkpoint is not None and (checkpoint.parent / TOKENIZER).exists():
        return checkpoint.parent / TOKENIZER
    return None


# ---------------------------------------------------------------- commands


def cmd_pretrain(cfg: RunConfig, args) -> int:
    corpus_path = cfg.path("corpus")
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    lines = _corpus_lines(corpus_path)
    tok_cfg = cfg.section("tokenizer")
    tokenizer = train_tokenizer(lines, int(tok_cfg.get("vocab_size", model_cfg.vocab_size)),
                                bool(tok_cfg.get("lowercase", True)))
    if len(tokenizer) > model_cfg.vocab_size:
        raise ConfigError(f"tokenizer has {len(tokenizer)} pieces but model.vocab_size is {model_cfg.vocab_size}")
    model = build_model(model_cfg, cfg.seed)
    (model, record), report = _tracked(cfg, "pretrain", lambda: pretrain_mlm(model, lines, tokenizer, train_cfg))
    out = cfg.out
    size = save_checkpoint(model, out / CHECKPOINT)
    tokenizer.save(out / TOKENIZER)
    _write(out / "pretrain_loss.csv", record.loss_csv())
    _write(out / "pretrain_summary.json", record.summary_json())
    plotting.plot_training(record, out / "pretrain_loss.png", "masked-LM pretraining")
    print(f"checkpoint: {out / CHECKPOINT} ({size:.2f} MB, {model.num_parameters():,} parameters)")
    if record.epoch_losses:
        print(f"MLM loss: {record.epoch_losses[0]:.4f} -> {record.epoch_losses[-1]:.4f}")
    _print_cost(report)
    return 0


def _load_train_data(cfg: RunConfig, args) -> tuple[Dataset, Dataset]:
    train = load_squad(cfg.path("train"))
    augment = cfg.path("augment", required=False)
    if augment is not None:
        if not augment.exists():
            raise ConfigError(f"data.augment: path {augment} does not exist")
        train = concat_datasets(train, load_squad(augment), ("main", "aug"))
    dev_path = cfg.path("dev", required=False)
    if dev_path is not None:
        if not dev_path.exists():
            raise ConfigError(f"data.dev: path {dev_path} does not exist")
        return train, load_squad(dev_path)
    return split_validation(train, 0.10, cfg.seed)


def _model_and_tokenizer(cfg: RunConfig, texts: list[str]):
    checkpoint = cfg.path("checkpoint", required=False)
    if checkpoint is not None:
        if not checkpoint.exists():
            raise ConfigError(f"data.checkpoint: path {checkpoint} does not exist")
        model = load_checkpoint(checkpoint)
        tok_path = _tokenizer_path(cfg, checkpoint)
        if tok_path is None:
            raise ConfigError("no tokenizer found for data.checkpoint; set data.tokenizer")
        return model, Tokenizer.load(tok_path)
    model_cfg = cfg.model_config()
    tok_cfg = cfg.section("tokenizer")
    tokenizer = train_tokenizer(texts, int(tok_cfg.get("vocab_size", model_cfg.vocab_size)),
                                bool(tok_cfg.get("lowercase", True)))
    return build_model(model_cfg, cfg.seed), tokenizer


def cmd_finetune(cfg: RunConfig, args) -> int:
    train_cfg = cfg.train_config()
    train, dev = _load_train_data(cfg, args)
    model, tokenizer = _model_and_tokenizer(cfg, _dataset_texts(train))
    train_feats = featurize_dataset(train, tokenizer, train_cfg.max_len, train_cfg.stride)
    dev_feats = featurize_dataset(dev, tokenizer, train_cfg.max_len, train_cfg.stride)
    val = (dev, dev_feats)
    (model, record), report = _tracked(cfg, "finetune", lambda: finetune_qa(model, train_feats, val, train_cfg))
    preds = predict_spans(model, dev_feats, train_cfg.max_answer_len, example_ids=dev.question_ids())
    result = evaluate(preds, dev)
    out = cfg.out
    save_checkpoint(model, out / FINETUNED)
    tokenizer.save(out / TOKENIZER)
    save_squad(dev, out / "dev.json")
    _write(out / "finetune_loss.csv", record.loss_csv())
    _write(out / "finetune_summary.json", record.summary_json())
    _write(out / "finetune_eval.json", result.to_json())
    plotting.plot_training(record, out / "finetune.png", "span-QA fine-tuning")
    print(f"train questions: {len(train)}  dev questions: {len(dev)}  epochs: {train_cfg.epochs}")
    print(f"F1 / EM: {result.f1:.1f} / {result.exact_match:.1f}")
    _print_cost(report)
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else (cfg.path("checkpoint", required=False) or cfg.out / FINETUNED)
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    dataset_path = Path(args.dataset) if args.dataset else (cfg.path("dev", required=False) or cfg.out / "dev.json")
    if not dataset_path.exists():
        raise ConfigError(f"dataset {dataset_path} does not exist")
    model = load_checkpoint(checkpoint)
    tok_path = _tokenizer_path(cfg, checkpoint)
    if tok_path is None:
        raise ConfigError("no tokenizer found next to the checkpoint; set data.tokenizer")
    tokenizer = Tokenizer.load(tok_path)
    train_cfg = cfg.train_config()
    dataset = load_squad(dataset_path)
    feats = featurize_dataset(dataset, tokenizer, train_cfg.max_len, train_cfg.stride)
    preds = predict_spans(model, feats, train_cfg.max_answer_len, example_ids=dataset.question_ids())
    target = Path(args.output) if args.output else cfg.out / "predictions.json"
    _write(target, json.dumps(preds, ensure_ascii=False, indent=1, sort_keys=True) + "\n")
    print(f"predictions: {target} ({len(preds)} questions)")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    pred_path = Path(args.predictions) if args.predictions else (cfg.path("predictions", required=False) or cfg.out / "predictions.json")
    data_path = Path(args.dataset) if args.dataset else (cfg.path("dataset", required=False) or cfg.path("dev", required=False) or cfg.out / "dev.json")
    for name, p in (("predictions", pred_path), ("dataset", data_path)):
        if not p.exists():
            raise ConfigError(f"{name} file {p} does not exist")
    report = evaluate(load_predictions(pred_path), load_squad(data_path))
    _write(cfg.out / "eval_report.json", report.to_json())
    print(report.to_text(), end="")
    return 0


def cmd_align(cfg: RunConfig, args) -> int:
    a = cfg.section("align")
    params = AlignParams(int(a["max_char_n"]), int(a["max_word_n"]), float(a["beta"]),
                         float(args.threshold if args.threshold is not None else a["threshold"]),
                         tuple(a["len_band"]))
    source = load_squad(cfg.path("source"))
    translations = load_translations(cfg.path("translations"))
    dataset, report = align_corpus(source, translations, params)
    out = cfg.out
    save_squad(dataset, out / "aligned.json")
    _write(out / "align_report.json", report.to_json())
    _write(out / "align_report.txt", report.to_text())
    plotting.plot_alignment(report, out / "align.png")
    print(report.to_text(), end="")
    print(f"aligned dataset: {out / 'aligned.json'} ({len(dataset)} questions)")
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    paths = [Path(p) for p in args.datasets] or [cfg.path("dataset", required=False) or cfg.path("train")]
    reports = {}
    for p in paths:
        if not p.exists():
            raise ConfigError(f"dataset {p} does not exist")
        reports[p.stem] = corpus_stats(load_squad(p))
    out = cfg.out
    text = "".join(r.to_text(name) for name, r in reports.items())
    _write(out / "stats.txt", text)
    _write(out / "stats.csv", "".join(f"# {name}\n{r.to_csv()}" for name, r in reports.items()))
    plotting.plot_stats(reports, out / "stats.png")
    print(text, end="")
    return 0


def cmd_tune(cfg: RunConfig, args) -> int:
    h = dict(cfg.section("hpo"))
    if args.population is not None:
        h["population_size"] = args.population
    if args.generations is not None:
        h["generations"] = args.generations
    if int(h["population_size"]) < 1:
        raise ConfigError("hpo.population_size must be >= 1")
    space = SearchSpace.from_dict(h["space"]) if h.get("space") else DEFAULT_SPACE
    kwargs = dict(population_size=int(h["population_size"]), generations=int(h["generations"]),
                  steps_per_generation=int(h["steps_per_generation"]), seed=cfg.seed,
                  quantile=float(h["quantile"]), perturb_factors=tuple(h["perturb_factors"]),
                  resample_prob=float(h["resample_prob"]), jobs=args.jobs or 1)
    if args.surrogate:
        factory = surrogate_factory()
    else:
        train_cfg = cfg.train_config()
        train, dev = _load_train_data(cfg, args)
        _, tokenizer = _model_and_tokenizer(cfg, _dataset_texts(train))
        train_feats = featurize_dataset(train, tokenizer, train_cfg.max_len, train_cfg.stride)
        dev_feats = featurize_dataset(dev, tokenizer, train_cfg.max_len, train_cfg.stride)
        total = kwargs["generations"] * kwargs["steps_per_generation"]
        factory = qa_factory(cfg.model_config(), train_cfg, train_feats, (dev, dev_feats), total, cfg.seed)
        if h.get("include_default", True):
            default = {"learning_rate": train_cfg.learning_rate, "warmup_fraction": train_cfg.warmup_fraction,
                       "batch_size": train_cfg.batch_size, "dropout": cfg.model_config().dropout}
            kwargs["initial"] = [{k: v for k, v in default.items() if k in space.names()}]
    result, report = _tracked(cfg, "tune", lambda: pbt_search(factory, space, **kwargs))
    out = cfg.out
    _write(out / "hpo_history.csv", result.history_csv())
    _write(out / "hpo_history.json", result.to_json())
    plotting.plot_pbt(result, out / "hpo.png")
    print("best hyperparameters: " + json.dumps(result.best_hyperparameters, sort_keys=True))
    label = "surrogate score" if args.surrogate else "F1"
    print(f"best {label}: {result.best_score:.4f} (member {result.best_member}, generation {result.best_generation})")
    _print_cost(report)
    return 0


def cmd_cost_report(cfg: RunConfig, args) -> int:
    reports = []
    if args.seconds is not None:
        c = cfg.section("cost")
        watts = args.watts if args.watts is not None else float(c["power"]["avg_watts"])
        intensity = float(c["carbon"]["intensity_g_per_kwh"])
        reports.append(CostReport.build(args.seconds, estimate_energy(args.seconds, watts), intensity,
                                        {"avg_power_watts": watts, "kind": "fixed (estimated)"}, args.label or "manual"))
    files = [Path(p) for p in args.reports] or sorted(cfg.out.glob("*_cost.json"))
    for p in files:
        if not p.exists():
            raise ConfigError(f"cost report {p} does not exist")
        r = CostReport.from_json(p.read_text(encoding="utf-8"))
        r.label = r.label or p.stem
        reports.append(r)
    if not reports:
        raise ConfigError("no cost reports found; pass report files or --seconds")
    table = cost_table(reports)
    _write(cfg.out / "cost_table.txt", table)
    plotting.plot_costs(reports, cfg.out / "costs.png")
    print(table, end="")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "align": cmd_align,
    "stats": cmd_stats,
    "tune": cmd_tune,
    "cost-report": cmd_cost_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: $LRQA_CONFIG)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel workers for tune")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lrqa", description="Low-resource extractive QA toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="masked-LM pretraining on data.corpus")
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="span-QA fine-tuning on data.train")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--augment", help="second training set concatenated before splitting")
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("predict", parents=[common], help="write a predictions JSON map")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--output")

    p = sub.add_parser("evaluate", parents=[common], help="EM / F1 of predictions against a dataset")
    p.add_argument("--predictions")
    p.add_argument("--dataset")

    p = sub.add_parser("align", parents=[common], help="build a SQuAD file from translated triples")
    p.add_argument("--source")
    p.add_argument("--translations")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("stats", parents=[common], help="dataset descriptives")
    p.add_argument("datasets", nargs="*")

    p = sub.add_parser("tune", parents=[common], help="population-based hyperparameter search")
    p.add_argument("--surrogate", action="store_true", help="analytic objective instead of QA training")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--augment")

    p = sub.add_parser("cost-report", parents=[common], help="tabulate cost reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--seconds", type=float)
    p.add_argument("--watts", type=float)
    p.add_argument("--label")
    return parser


def _apply_flags(cfg: RunConfig, args) -> None:
    cfg.override("seed", args.seed)
    if args.out is not None:
        cfg.raw["out"] = str(Path(args.out).resolve())
    for key in ("train", "dev", "augment", "corpus", "source", "translations", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.raw["data"][key] = str(Path(value).resolve())
    if getattr(args, "epochs", None) is not None:
        if args.command == "pretrain":
            cfg.raw["train"].setdefault("mlm", {})["epochs"] = args.epochs
        else:
            cfg.raw["train"]["epochs"] = args.epochs
    cfg.override("train.learning_rate", getattr(args, "lr", None))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_flags(cfg, args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"lrqa {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except MissingTranslationError as exc:
        print(f"lrqa {args.command}: {exc.args[0]}", file=sys.stderr)
        return 1
    except TrackedRunError as exc:
        print(f"lrqa {args.command}: failed: {exc.original}", file=sys.stderr)
        print(cost_table([exc.cost_report]), end="", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"lrqa {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
