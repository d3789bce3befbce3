"""Command-line entry point: ``floodtl <subcommand> [flags]``.

Each subcommand writes into ``<out>/<subcommand>/`` together with the fully
resolved config (``config.resolved.json``) and wall-clock timings kept apart
in ``timing.json``. Later stages find earlier checkpoints in the sibling
directories unless ``paths`` in the config points elsewhere.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import __version__, corpus as C, eval as E, lm, synthetic, transfer as T
from .errors import ConfigError, DataError, FloodTLError, NumericsError

DEFAULTS = {
    "seed": 0,
    "paths": {
        "corpus": None,           # labeled tweet CSV (tweet_id,text,label)
        "general_corpus": None,   # plain text, one document per line; None = bundled
        "out": "runs",
        "pretrained": None,       # default <out>/pretrain/pretrained.ulmf
        "lm_finetuned": None,     # default <out>/finetune-lm/lm_finetuned.ulmf
        "classifier": None,       # default <out>/train-clf/classifier.ulmf
    },
    "cleaning": {"profile": "model"},
    "split": {"ratio": 0.7, "stratified": True, "seed": None},
    "lm": {"preset": "desk", "overrides": {}},
    "finetune_lm": {"lr_max": 0.01, "cut_frac": 0.1, "ratio": 32.0, "disc_factor": 2.6,
                    "epochs": 2, "batch_size": 32, "dropout_mult": lm.DROPOUT_MULT},
    "classifier": {"lr_max": 0.03, "cut_frac": 0.1, "ratio": 32.0, "disc_factor": 2.6,
                   "epochs": 10, "batch_size": 8, "dropout_mult": lm.DROPOUT_MULT,
                   "unfreeze_policy": "gradual", "head_hidden": 50, "label_fraction": 100.0,
                   "lr_range_test": False},
    "ablation": {"fractions": list(E.DEFAULT_FRACTIONS), "seeds": [0], "workers": 1},
    "stats": {"top_k": 20},
    "synth": {"n": 2000, "related_frac": 0.5},
}

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICS = 0, 1, 2, 3
PLAN_KEYS = ("lr_max", "cut_frac", "ratio", "disc_factor", "epochs", "batch_size", "dropout_mult")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


# --- config -------------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key != "overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    """Defaults merged with a YAML or JSON file; unknown keys are rejected."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {str(exc).splitlines()[0]}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must hold a mapping at top level")
    return _merge(DEFAULTS, raw)


def resolve(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    if args.preset is not None:
        cfg["lm"]["preset"] = args.preset
    if args.out is not None:
        cfg["paths"]["out"] = args.out
    if args.fractions is not None:
        try:
            fr = [float(x) for x in args.fractions.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"--fractions must be comma-separated numbers, got {args.fractions!r}") from None
        if not fr:
            raise ConfigError("--fractions is empty")
        cfg["ablation"]["fractions"] = fr
        if args.command == "train-clf":
            if len(fr) != 1:
                raise ConfigError("train-clf takes exactly one --fractions value")
            cfg["classifier"]["label_fraction"] = fr[0]
    if cfg["split"]["seed"] is None:
        cfg["split"]["seed"] = cfg["seed"]
    out = Path(cfg["paths"]["out"])
    defaults = {"pretrained": out / "pretrain" / "pretrained.ulmf",
                "lm_finetuned": out / "finetune-lm" / "lm_finetuned.ulmf",
                "classifier": out / "train-clf" / "classifier.ulmf"}
    for key, p in defaults.items():
        if cfg["paths"][key] is None:
            cfg["paths"][key] = str(p)
    if cfg["lm"]["preset"] not in lm.PRESETS:
        raise ConfigError(f"unknown preset {cfg['lm']['preset']!r}; choose from {sorted(lm.PRESETS)}")
    if cfg["cleaning"]["profile"] not in ("model", "stats"):
        raise ConfigError(f"unknown cleaning profile {cfg['cleaning']['profile']!r}")
    return cfg


def _plan(section: dict, stage: str, **extra) -> T.FineTunePlan:
    s = {k: section[k] for k in PLAN_KEYS}
    plan = T.FineTunePlan(stage=stage,
                          stlr=T.StlrConfig(lr_max=float(s["lr_max"]), cut_frac=float(s["cut_frac"]),
                                            ratio=float(s["ratio"])),
                          disc_factor=float(s["disc_factor"]), epochs=int(s["epochs"]),
                          batch_size=int(s["batch_size"]), dropout_mult=float(s["dropout_mult"]),
                          **extra)
    plan.validate()
    plan.stlr.validate()
    return plan


def lm_plan(cfg) -> T.FineTunePlan:
    return _plan(cfg["finetune_lm"], "lm_finetune", unfreeze_policy="all_at_once")


def clf_plan(cfg) -> T.FineTunePlan:
    return _plan(cfg["classifier"], "classifier", unfreeze_policy=cfg["classifier"]["unfreeze_policy"])


# --- shared helpers -------------------------------------------------------------

def _outdir(cfg, command: str) -> Path:
    d = Path(cfg["paths"]["out"]) / command
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_step_log(rows, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "group", "lr", "loss"])
        for step, group, lr_, loss in rows:
            w.writerow([step, group, repr(float(lr_)), repr(float(loss))])


def _require(path: str, what: str) -> lm.Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing {what} checkpoint: expected {p}")
    return lm.load_checkpoint(p)


def _tweets(cfg) -> list:
    path = cfg["paths"]["corpus"]
    if path is None:
        raise ConfigError("paths.corpus is not set; point it at a tweet_id,text,label CSV")
    if not Path(path).is_file():
        raise DataError(f"corpus file not found: {path}")
    return C.load_tweets(path)


def _split(cfg) -> C.DatasetSplit:
    clean = C.clean_corpus(_tweets(cfg), cfg["cleaning"]["profile"])
    s = cfg["split"]
    return C.split(clean, float(s["ratio"]), int(s["seed"]), bool(s["stratified"]))


def _general_docs(cfg) -> list:
    path = cfg["paths"]["general_corpus"]
    if path is None:
        with resources.as_file(resources.files("floodtl") / "data" / "general_corpus.txt") as p:
            return C.read_text_corpus(p)
    if not Path(path).is_file():
        raise DataError(f"general corpus not found: {path}")
    return C.read_text_corpus(path)


def _save_last_good(exc: NumericsError, outdir: Path) -> None:
    if exc.checkpoint is not None:
        lm.save_checkpoint(exc.checkpoint, outdir / "last_good.ulmf")


# --- subcommands ----------------------------------------------------------------

def cmd_stats(cfg) -> dict:
    out = _outdir(cfg, "stats")
    raw = _tweets(cfg)
    clean = C.clean_corpus(raw, "stats")
    k = int(cfg["stats"]["top_k"])
    for n, name in ((1, "unigrams"), (2, "bigrams"), (3, "trigrams")):
        C.write_ngram_csv(C.ngram_stats(clean, n, k), out / f"{name}.csv")
    words, chars = C.length_stats(raw)
    C.write_histogram_csv(words, out / "words_per_tweet.csv")
    C.write_histogram_csv(chars, out / "chars_per_tweet.csv")
    counts = C.class_counts(raw)
    with (out / "class_counts.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "count"])
        for label, c in counts.items():
            w.writerow([label, c])
        w.writerow(["Total", sum(counts.values())])
    for label, c in counts.items():
        print(f"{label}\t{c}")
    return {}


def cmd_synth(cfg) -> dict:
    out = _outdir(cfg, "synth")
    s = cfg["synth"]
    tweets = synthetic.synthetic_tweets(int(s["n"]), cfg["seed"], float(s["related_frac"]))
    C.write_tweets(tweets, out / "tweets.csv")
    print(out / "tweets.csv")
    return {}


def cmd_pretrain(cfg) -> dict:
    out = _outdir(cfg, "pretrain")
    seed = cfg["seed"]
    docs = _general_docs(cfg)
    vocab_docs = list(docs)
    if cfg["paths"]["corpus"] is not None:
        # target train text joins the vocabulary so fine-tuning has rows for it
        vocab_docs += [t.tokens for t in _split(cfg).train]
    vocab = C.build_vocab(vocab_docs)
    n_valid = max(1, len(docs) // 10)
    train_stream = C.token_stream(docs[:-n_valid], vocab)
    valid_stream = C.token_stream(docs[-n_valid:], vocab)
    config = lm.preset(cfg["lm"]["preset"], len(vocab), **cfg["lm"]["overrides"])
    model = lm.init_lm(config, seed, vocab)
    t0 = time.perf_counter()
    try:
        ckpt = lm.train_lm(model, train_stream, valid=valid_stream, seed=seed,
                           on_epoch=lambda e: print(json.dumps(e, sort_keys=True), flush=True))
    except NumericsError as exc:
        _save_last_good(exc, out)
        raise
    seconds = time.perf_counter() - t0
    ckpt.meta = {"seed": seed, "preset": cfg["lm"]["preset"]}
    lm.save_checkpoint(ckpt, cfg["paths"]["pretrained"])
    _write_json(out / "train_log.json", ckpt.log)
    _write_step_log(ckpt.step_log, out / "step_log.csv")
    return {"train_seconds": seconds}


def cmd_finetune_lm(cfg) -> dict:
    out = _outdir(cfg, "finetune-lm")
    pre = _require(cfg["paths"]["pretrained"], "pretrained")
    data = _split(cfg)
    train_stream = C.token_stream([t.tokens for t in data.train], pre.vocab)
    valid_stream = C.token_stream([t.tokens for t in data.test], pre.vocab)
    t0 = time.perf_counter()
    try:
        ckpt = T.finetune_lm(pre, train_stream, lm_plan(cfg), seed=cfg["seed"], valid=valid_stream)
    except NumericsError as exc:
        _save_last_good(exc, out)
        raise
    seconds = time.perf_counter() - t0
    lm.save_checkpoint(ckpt, cfg["paths"]["lm_finetuned"])
    _write_json(out / "train_log.json", ckpt.log)
    _write_step_log(ckpt.step_log, out / "step_log.csv")
    return {"train_seconds": seconds}


def _labeled(cfg, data: C.DatasetSplit) -> list:
    return C.subsample_labels(data.train, float(cfg["classifier"]["label_fraction"]), cfg["seed"])


def cmd_train_clf(cfg) -> dict:
    out = _outdir(cfg, "train-clf")
    enc = _require(cfg["paths"]["lm_finetuned"], "LM fine-tuned")
    data = _split(cfg)
    labeled = _labeled(cfg, data)
    plan = clf_plan(cfg)
    c = cfg["classifier"]
    model = T.build_classifier(enc, int(c["head_hidden"]), cfg["seed"], plan.dropout_mult)
    timing = {}
    if c["lr_range_test"]:
        t0 = time.perf_counter()
        sweep = T.lr_range_test(model, labeled, batch_size=plan.batch_size, seed=cfg["seed"])
        timing["lr_range_seconds"] = time.perf_counter() - t0
        with (out / "lr_range.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lr", "loss"])
            for lr_, loss in sweep:
                w.writerow([repr(lr_), repr(loss)])
    t0 = time.perf_counter()
    T.train_classifier(model, labeled, plan, cfg["seed"],
                       on_epoch=lambda e, _m: print(json.dumps(e, sort_keys=True), flush=True))
    timing["train_seconds"] = time.perf_counter() - t0
    ckpt = model.to_checkpoint(meta={"label_fraction": c["label_fraction"], "n_labeled": len(labeled),
                                     "seed": cfg["seed"]})
    lm.save_checkpoint(ckpt, cfg["paths"]["classifier"])
    _write_json(out / "train_log.json", model.log)
    _write_step_log(model.step_log, out / "step_log.csv")
    return timing


def cmd_eval(cfg) -> dict:
    out = _outdir(cfg, "eval")
    model = T.ClassifierModel.from_checkpoint(_require(cfg["paths"]["classifier"], "classifier"))
    data = _split(cfg)
    t0 = time.perf_counter()
    report, curve = E.evaluate(model, data.test, _labeled(cfg, data))
    seconds = time.perf_counter() - t0
    _write_json(out / "metrics.json", {**report.to_dict(include_timing=False),
                                       "average_precision": curve.average_precision,
                                       "test_split_sha256": E.split_hash(data.test)})
    E.write_pr_csv(curve, out / "pr_curve.csv")
    m = report.metrics
    print(f"accuracy\t{m.accuracy:.4f}")
    print(f"train_loss\t{report.train_loss:.4f}")
    print(f"test_loss\t{report.test_loss:.4f}")
    for name, cm in m.per_class().items():
        print(f"{name}\tprecision {cm.precision:.4f}\trecall {cm.recall:.4f}\tf1 {cm.f1:.4f}")
    print(f"average_precision\t{curve.average_precision:.4f}")
    return {"eval_seconds": seconds}


def cmd_ablate(cfg) -> dict:
    out = _outdir(cfg, "ablate")
    enc = _require(cfg["paths"]["lm_finetuned"], "LM fine-tuned")
    data = _split(cfg)
    a = cfg["ablation"]
    c = cfg["classifier"]
    t0 = time.perf_counter()

    def report(row):
        print(f"fraction {E._fmt_fraction(row.fraction)}\tseed {row.seed}\t"
              f"accuracy {row.report.metrics.accuracy:.4f}", flush=True)

    try:
        table = E.ablation_run(data, [float(f) for f in a["fractions"]], [int(s) for s in a["seeds"]],
                               enc, clf_plan(cfg), int(c["head_hidden"]), int(a["workers"]), on_row=report)
    except FloodTLError as exc:
        partial = getattr(exc, "partial_table", None)
        if partial is not None:
            partial.write_csv(out / "ablation.csv")
            partial.write_json(out / "ablation.json", include_timing=False)
        raise
    table.write_csv(out / "ablation.csv")
    table.write_json(out / "ablation.json", include_timing=False)
    return {"total_seconds": time.perf_counter() - t0,
            "rows": [{"fraction": r.fraction, "seed": r.seed, "seconds": r.report.seconds}
                     for r in table.rows]}


def cmd_predict(cfg, texts: Sequence[str]) -> dict:
    model = T.ClassifierModel.from_checkpoint(_require(cfg["paths"]["classifier"], "classifier"))
    for text in texts:
        p = T.predict(model, text)
        print(json.dumps({"text": text, **p.as_dict(), "empty_input": p.empty_input}))
    return {}


COMMANDS = {
    "stats": cmd_stats,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune-lm": cmd_finetune_lm,
    "train-clf": cmd_train_clf,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="floodtl", description="Transfer-learning flood tweet classifier.")
    parser.add_argument("--version", action="version", version=f"floodtl {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
    common.add_argument("--preset", choices=sorted(lm.PRESETS), help="language-model size preset")
    common.add_argument("--fractions", help="comma-separated label percentages, e.g. 5,10,20,50,80")
    common.add_argument("--out", help="output root directory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "stats": "n-gram, length and class-count tables for the tweet corpus",
        "synth": "write a synthetic labeled tweet CSV",
        "pretrain": "train the general-domain language model",
        "finetune-lm": "fine-tune the language model on target tweets",
        "train-clf": "train the classifier on a labeled fraction",
        "eval": "score the classifier on the held-out split",
        "ablate": "classifier accuracy across label fractions and seeds",
        "predict": "classify tweets given on the command line",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "predict":
            p.add_argument("texts", nargs="*", help="tweet texts")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        t0 = time.perf_counter()
        if args.command == "predict":
            timing = cmd_predict(cfg, args.texts)
        else:
            timing = COMMANDS[args.command](cfg)
            timing["wall_seconds"] = time.perf_counter() - t0
            _write_json(Path(cfg["paths"]["out"]) / args.command / "timing.json", timing)
    except NumericsError as exc:
        return _fail(exc, EXIT_NUMERICS)
    except FloodTLError as exc:
        return _fail(exc, exc.exit_code)
    except IndexError as exc:
        return _fail(exc, EXIT_DATA)
    except OSError as exc:
        return _fail(exc, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
